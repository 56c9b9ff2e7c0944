//! Seeded FourRooms gridworld.
//!
//! A [`Level`] is an immutable map generated from a 64-bit seed: an outer
//! wall, one vertical and one horizontal internal wall splitting the interior
//! into four rooms, one gap per internal wall segment, and a random start pose
//! and goal. Dynamics are deterministic. The agent perceives a 7x7x3
//! egocentric [`Observation`] and is rewarded only when it reaches the goal.
//!
//! Coordinates: `x` grows to the east, `y` grows to the south.

use std::collections::VecDeque;
use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const VIEW_SIZE: usize = 7;
pub const OBS_CHANNELS: usize = 3;
pub const OBS_LEN: usize = VIEW_SIZE * VIEW_SIZE * OBS_CHANNELS;

/// Object-type codes (observation channel 0).
pub const CODE_UNSEEN: u8 = 0;
pub const CODE_EMPTY: u8 = 1;
pub const CODE_WALL: u8 = 2;
pub const CODE_GOAL: u8 = 3;
/// Largest code per channel; channels 1 and 2 are always 0.
pub const CHANNEL_MAX: [u8; OBS_CHANNELS] = [CODE_GOAL, 0, 0];

/// Reward for reaching the goal after `steps_used` of `max_steps` steps.
pub fn success_reward(steps_used: u32, max_steps: u32) -> f64 {
    let max = max_steps as f64;
    (max - 0.9 * steps_used as f64) / max
}

/// Max placement draws for the goal before giving up.
const MAX_PLACEMENT_RETRIES: u32 = 1000;

// Stream labels for level generation, in generation order.
const STREAM_VERTICAL_WALL: u64 = 1;
const STREAM_HORIZONTAL_WALL: u64 = 2;
const STREAM_GAP_BASE: u64 = 3; // 3..=6, one per wall segment
const STREAM_START: u64 = 7;
const STREAM_DIR: u64 = 8;
const STREAM_GOAL: u64 = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[i32; 2]", into = "[i32; 2]")]
pub struct Pos {
    pub x: i32,
    pub y: i32,
}

impl Pos {
    pub const fn new(x: i32, y: i32) -> Self {
        Pos { x, y }
    }

    fn offset(self, dx: i32, dy: i32) -> Self {
        Pos::new(self.x + dx, self.y + dy)
    }
}

impl From<[i32; 2]> for Pos {
    fn from([x, y]: [i32; 2]) -> Self {
        Pos { x, y }
    }
}

impl From<Pos> for [i32; 2] {
    fn from(p: Pos) -> Self {
        [p.x, p.y]
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dir {
    N,
    E,
    S,
    W,
}

impl Dir {
    pub const ALL: [Dir; 4] = [Dir::N, Dir::E, Dir::S, Dir::W];

    pub fn left(self) -> Dir {
        match self {
            Dir::N => Dir::W,
            Dir::W => Dir::S,
            Dir::S => Dir::E,
            Dir::E => Dir::N,
        }
    }

    pub fn right(self) -> Dir {
        match self {
            Dir::N => Dir::E,
            Dir::E => Dir::S,
            Dir::S => Dir::W,
            Dir::W => Dir::N,
        }
    }

    pub fn delta(self) -> (i32, i32) {
        match self {
            Dir::N => (0, -1),
            Dir::E => (1, 0),
            Dir::S => (0, 1),
            Dir::W => (-1, 0),
        }
    }

    pub fn glyph(self) -> char {
        match self {
            Dir::N => '^',
            Dir::E => '>',
            Dir::S => 'v',
            Dir::W => '<',
        }
    }

    pub fn from_glyph(c: char) -> Option<Dir> {
        match c {
            '^' => Some(Dir::N),
            '>' => Some(Dir::E),
            'v' => Some(Dir::S),
            '<' => Some(Dir::W),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Action {
    TurnLeft = 0,
    TurnRight = 1,
    Forward = 2,
}

impl Action {
    pub const COUNT: usize = 3;
    pub const ALL: [Action; 3] = [Action::TurnLeft, Action::TurnRight, Action::Forward];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LevelConfig {
    pub width: u32,
    pub height: u32,
    pub max_steps: u32,
}

impl Default for LevelConfig {
    fn default() -> Self {
        LevelConfig {
            width: 9,
            height: 9,
            max_steps: 100,
        }
    }
}

impl LevelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("width", self.width), ("height", self.height)] {
            if v < 9 || v % 2 == 0 {
                return Err(Error::InvalidLevelConfig(format!(
                    "{name} must be odd and at least 9, got {v}"
                )));
            }
            if v > 1024 {
                return Err(Error::InvalidLevelConfig(format!(
                    "{name} must be at most 1024, got {v}"
                )));
            }
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidLevelConfig(
                "max_steps must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// An immutable map plus start pose, goal and step budget.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "LevelJson", try_from = "LevelJson")]
pub struct Level {
    seed: u64,
    width: i32,
    height: i32,
    max_steps: u32,
    /// Row-major, `true` for walls.
    walls: Vec<bool>,
    gaps: Vec<Pos>,
    start_pos: Pos,
    start_dir: Dir,
    goal_pos: Pos,
}

/// Generates the FourRooms level for `seed`. Pure in its arguments.
///
/// Generation order: vertical wall column, horizontal wall row, the four
/// gaps (upper, lower, left, right segment), start cell, start direction,
/// goal cell. Each step reads its own stream of the level seed.
pub fn generate_level(seed: u64, config: &LevelConfig) -> Result<Level> {
    config.validate()?;
    let w = config.width as i32;
    let h = config.height as i32;

    let wall_x = rng::stream(seed, STREAM_VERTICAL_WALL).gen_range(3..=w - 4);
    let wall_y = rng::stream(seed, STREAM_HORIZONTAL_WALL).gen_range(3..=h - 4);

    let mut walls = vec![false; (w * h) as usize];
    let idx = |p: Pos| (p.y * w + p.x) as usize;
    for y in 0..h {
        for x in 0..w {
            if x == 0 || y == 0 || x == w - 1 || y == h - 1 || x == wall_x || y == wall_y {
                walls[idx(Pos::new(x, y))] = true;
            }
        }
    }

    // (fixed coordinate, segment start, segment end, vertical?)
    let segments = [
        (wall_x, 1, wall_y - 1, true),
        (wall_x, wall_y + 1, h - 2, true),
        (wall_y, 1, wall_x - 1, false),
        (wall_y, wall_x + 1, w - 2, false),
    ];
    let mut gaps = Vec::with_capacity(4);
    for (i, &(fixed, lo, hi, vertical)) in segments.iter().enumerate() {
        let t = rng::stream(seed, STREAM_GAP_BASE + i as u64).gen_range(lo..=hi);
        let gap = if vertical {
            Pos::new(fixed, t)
        } else {
            Pos::new(t, fixed)
        };
        walls[idx(gap)] = false;
        gaps.push(gap);
    }

    let open: Vec<Pos> = (0..h)
        .flat_map(|y| (0..w).map(move |x| Pos::new(x, y)))
        .filter(|&p| !walls[idx(p)])
        .collect();

    let start_pos = open[rng::stream(seed, STREAM_START).gen_range(0..open.len())];
    let start_dir = Dir::ALL[rng::stream(seed, STREAM_DIR).gen_range(0..4)];
    let mut goal_rng = rng::stream(seed, STREAM_GOAL);
    let goal_pos = (0..MAX_PLACEMENT_RETRIES)
        .map(|_| open[goal_rng.gen_range(0..open.len())])
        .find(|&g| g != start_pos)
        .ok_or(Error::Placement {
            seed,
            retries: MAX_PLACEMENT_RETRIES,
        })?;

    let level = Level {
        seed,
        width: w,
        height: h,
        max_steps: config.max_steps,
        walls,
        gaps,
        start_pos,
        start_dir,
        goal_pos,
    };
    if level
        .shortest_path_len(level.start_pos, level.goal_pos)
        .is_none()
    {
        return Err(Error::InvalidLevel(format!(
            "goal unreachable in level {seed}"
        )));
    }
    Ok(level)
}

impl Level {
    /// Builds a level from explicit parts. Used for hand-made maps; no
    /// FourRooms structure is required. Gaps are inferred when the walls
    /// have the FourRooms shape and left empty otherwise.
    pub fn from_parts(
        seed: u64,
        width: u32,
        height: u32,
        max_steps: u32,
        walls: impl IntoIterator<Item = Pos>,
        start: (Pos, Dir),
        goal: Pos,
    ) -> Result<Level> {
        if width < 3 || height < 3 || width > 1024 || height > 1024 {
            return Err(Error::InvalidLevel(format!(
                "dimensions {width}x{height} out of range"
            )));
        }
        if max_steps == 0 {
            return Err(Error::InvalidLevel("max_steps must be at least 1".into()));
        }
        let (w, h) = (width as i32, height as i32);
        let mut grid = vec![false; (w * h) as usize];
        for p in walls {
            if p.x < 0 || p.y < 0 || p.x >= w || p.y >= h {
                return Err(Error::InvalidLevel(format!("wall {p} outside the map")));
            }
            grid[(p.y * w + p.x) as usize] = true;
        }
        let mut level = Level {
            seed,
            width: w,
            height: h,
            max_steps,
            walls: grid,
            gaps: Vec::new(),
            start_pos: start.0,
            start_dir: start.1,
            goal_pos: goal,
        };
        for (name, p) in [("start", start.0), ("goal", goal)] {
            if !level.in_bounds(p) || level.is_wall(p) {
                return Err(Error::InvalidLevel(format!(
                    "{name} {p} is not an open cell"
                )));
            }
        }
        if start.0 == goal {
            return Err(Error::InvalidLevel("start and goal coincide".into()));
        }
        level.gaps = level.infer_gaps();
        Ok(level)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn width(&self) -> u32 {
        self.width as u32
    }

    pub fn height(&self) -> u32 {
        self.height as u32
    }

    pub fn max_steps(&self) -> u32 {
        self.max_steps
    }

    pub fn start_pos(&self) -> Pos {
        self.start_pos
    }

    pub fn start_dir(&self) -> Dir {
        self.start_dir
    }

    pub fn goal_pos(&self) -> Pos {
        self.goal_pos
    }

    /// Door cells of the internal walls; empty for maps without FourRooms shape.
    pub fn gaps(&self) -> &[Pos] {
        &self.gaps
    }

    pub fn in_bounds(&self, p: Pos) -> bool {
        p.x >= 0 && p.y >= 0 && p.x < self.width && p.y < self.height
    }

    /// Out-of-bounds cells count as walls.
    pub fn is_wall(&self, p: Pos) -> bool {
        !self.in_bounds(p) || self.walls[(p.y * self.width + p.x) as usize]
    }

    /// Wall cells sorted by `(x, y)`.
    pub fn walls(&self) -> Vec<Pos> {
        let mut out: Vec<Pos> = (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| Pos::new(x, y)))
            .filter(|&p| self.is_wall(p))
            .collect();
        out.sort();
        out
    }

    /// BFS distance in cells (4-connectivity), ignoring orientation.
    pub fn shortest_path_len(&self, from: Pos, to: Pos) -> Option<usize> {
        if self.is_wall(from) || self.is_wall(to) {
            return None;
        }
        let mut dist = vec![usize::MAX; self.walls.len()];
        let idx = |p: Pos| (p.y * self.width + p.x) as usize;
        let mut queue = VecDeque::from([from]);
        dist[idx(from)] = 0;
        while let Some(p) = queue.pop_front() {
            if p == to {
                return Some(dist[idx(p)]);
            }
            for d in Dir::ALL {
                let (dx, dy) = d.delta();
                let q = p.offset(dx, dy);
                if !self.is_wall(q) && dist[idx(q)] == usize::MAX {
                    dist[idx(q)] = dist[idx(p)] + 1;
                    queue.push_back(q);
                }
            }
        }
        None
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("level serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Level> {
        Ok(serde_json::from_str(text)?)
    }

    fn infer_gaps(&self) -> Vec<Pos> {
        let (w, h) = (self.width, self.height);
        let interior_walls_in_col =
            |x: i32| (1..h - 1).filter(|&y| self.is_wall(Pos::new(x, y))).count() as i32;
        let interior_walls_in_row =
            |y: i32| (1..w - 1).filter(|&x| self.is_wall(Pos::new(x, y))).count() as i32;
        let col = (1..w - 1).find(|&x| interior_walls_in_col(x) == h - 4);
        let row = (1..h - 1).find(|&y| interior_walls_in_row(y) == w - 4);
        match (col, row) {
            (Some(x), Some(y)) => {
                let vertical = (1..h - 1)
                    .map(|yy| Pos::new(x, yy))
                    .filter(|&p| !self.is_wall(p));
                let horizontal = (1..w - 1)
                    .map(|xx| Pos::new(xx, y))
                    .filter(|&p| !self.is_wall(p));
                vertical.chain(horizontal).collect()
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LevelJson {
    seed: u64,
    width: u32,
    height: u32,
    max_steps: u32,
    walls: Vec<Pos>,
    start: Pos,
    dir: Dir,
    goal: Pos,
}

impl From<Level> for LevelJson {
    fn from(level: Level) -> Self {
        LevelJson {
            seed: level.seed,
            width: level.width(),
            height: level.height(),
            max_steps: level.max_steps,
            walls: level.walls(),
            start: level.start_pos,
            dir: level.start_dir,
            goal: level.goal_pos,
        }
    }
}

impl TryFrom<LevelJson> for Level {
    type Error = Error;

    fn try_from(j: LevelJson) -> Result<Level> {
        Level::from_parts(
            j.seed,
            j.width,
            j.height,
            j.max_steps,
            j.walls,
            (j.start, j.dir),
            j.goal,
        )
    }
}

/// Agent-egocentric 7x7x3 view. `grid[row][col][channel]`; row 0 is the
/// farthest row ahead, the agent sits at row 6, column 3, facing up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Observation {
    pub grid: [[[u8; OBS_CHANNELS]; VIEW_SIZE]; VIEW_SIZE],
}

impl Observation {
    pub const AGENT_ROW: usize = VIEW_SIZE - 1;
    pub const AGENT_COL: usize = VIEW_SIZE / 2;

    /// Object-type code at a view cell.
    pub fn object(&self, row: usize, col: usize) -> u8 {
        self.grid[row][col][0]
    }

    /// Row-major flattening `(row, col, channel)`, each code divided by its
    /// channel maximum (channels with maximum 0 stay 0).
    pub fn features(&self) -> [f64; OBS_LEN] {
        let mut out = [0.0; OBS_LEN];
        for (r, row) in self.grid.iter().enumerate() {
            for (c, cell) in row.iter().enumerate() {
                for (ch, &code) in cell.iter().enumerate() {
                    if CHANNEL_MAX[ch] > 0 {
                        out[(r * VIEW_SIZE + c) * OBS_CHANNELS + ch] =
                            code as f64 / CHANNEL_MAX[ch] as f64;
                    }
                }
            }
        }
        out
    }

    /// Every code within its channel's enumeration.
    pub fn is_valid(&self) -> bool {
        self.grid
            .iter()
            .flatten()
            .all(|cell| cell.iter().zip(CHANNEL_MAX).all(|(&c, max)| c <= max))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnvState<'a> {
    pub level: &'a Level,
    pub agent_pos: Pos,
    pub agent_dir: Dir,
    pub steps_used: u32,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step<'a> {
    pub state: EnvState<'a>,
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
}

pub fn reset(level: &Level) -> (EnvState<'_>, Observation) {
    let state = EnvState {
        level,
        agent_pos: level.start_pos,
        agent_dir: level.start_dir,
        steps_used: 0,
        done: false,
    };
    (state, observe(&state))
}

pub fn step<'a>(state: &EnvState<'a>, action: Action) -> Result<Step<'a>> {
    if state.done {
        return Err(Error::EpisodeDone);
    }
    let level = state.level;
    let mut next = *state;
    match action {
        Action::TurnLeft => next.agent_dir = state.agent_dir.left(),
        Action::TurnRight => next.agent_dir = state.agent_dir.right(),
        Action::Forward => {
            let (dx, dy) = state.agent_dir.delta();
            let target = state.agent_pos.offset(dx, dy);
            if !level.is_wall(target) {
                next.agent_pos = target;
            }
        }
    }
    next.steps_used += 1;

    let mut reward = 0.0;
    if next.agent_pos == level.goal_pos {
        next.done = true;
        reward = success_reward(next.steps_used, level.max_steps);
    } else if next.steps_used >= level.max_steps {
        next.done = true;
    }
    Ok(Step {
        state: next,
        observation: observe(&next),
        reward,
        done: next.done,
    })
}

/// World cell seen at view `(row, col)`.
fn view_to_world(state: &EnvState<'_>, row: usize, col: usize) -> Pos {
    let ahead = (Observation::AGENT_ROW - row) as i32;
    let lateral = col as i32 - Observation::AGENT_COL as i32;
    let (fx, fy) = state.agent_dir.delta();
    let (rx, ry) = state.agent_dir.right().delta();
    state
        .agent_pos
        .offset(fx * ahead + rx * lateral, fy * ahead + ry * lateral)
}

/// Cells behind walls are reported; only cells off the map are unseen.
pub fn observe(state: &EnvState<'_>) -> Observation {
    let level = state.level;
    let mut grid = [[[0u8; OBS_CHANNELS]; VIEW_SIZE]; VIEW_SIZE];
    for (r, row) in grid.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            let p = view_to_world(state, r, c);
            cell[0] = if !level.in_bounds(p) {
                CODE_UNSEEN
            } else if level.is_wall(p) {
                CODE_WALL
            } else if p == level.goal_pos {
                CODE_GOAL
            } else {
                CODE_EMPTY
            };
        }
    }
    Observation { grid }
}

/// One line per map row: `#` wall, `.` empty, `G` goal, agent by direction.
pub fn render_ascii(state: &EnvState<'_>) -> String {
    let level = state.level;
    let mut out = String::with_capacity(((level.width + 1) * level.height) as usize);
    for y in 0..level.height {
        for x in 0..level.width {
            let p = Pos::new(x, y);
            let glyph = if p == state.agent_pos {
                state.agent_dir.glyph()
            } else if level.is_wall(p) {
                '#'
            } else if p == level.goal_pos {
                'G'
            } else {
                '.'
            };
            out.push(glyph);
        }
        out.push('\n');
    }
    out
}

/// Inverse of [`render_ascii`]: builds a level whose start pose is the agent
/// glyph. The seed is set to 0.
pub fn parse_ascii(text: &str, max_steps: u32) -> Result<Level> {
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let height = lines.len();
    let width = lines.first().map_or(0, |l| l.chars().count());
    let mut walls = Vec::new();
    let mut goal = None;
    let mut agent = None;
    for (y, line) in lines.iter().enumerate() {
        if line.chars().count() != width {
            return Err(Error::InvalidLevel(format!("ragged map row {y}")));
        }
        for (x, c) in line.chars().enumerate() {
            let p = Pos::new(x as i32, y as i32);
            match c {
                '#' => walls.push(p),
                '.' => {}
                'G' => goal = Some(p),
                other => match Dir::from_glyph(other) {
                    Some(d) => agent = Some((p, d)),
                    None => return Err(Error::InvalidLevel(format!("unknown glyph {other:?}"))),
                },
            }
        }
    }
    let goal = goal.ok_or_else(|| Error::InvalidLevel("map has no goal".into()))?;
    let agent = agent.ok_or_else(|| Error::InvalidLevel("map has no agent".into()))?;
    Level::from_parts(
        0,
        width as u32,
        height as u32,
        max_steps,
        walls,
        agent,
        goal,
    )
}
