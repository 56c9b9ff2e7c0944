use std::collections::VecDeque;

use ecopool::gridworld::{
    generate_level, observe, reset, step, Action, Level, LevelConfig, Pos, CHANNEL_MAX,
};
use proptest::prelude::*;

/// Independent flood fill over open cells.
fn reachable(level: &Level, from: Pos, to: Pos) -> bool {
    let (w, h) = (level.width() as i32, level.height() as i32);
    let mut seen = vec![false; (w * h) as usize];
    let mut queue = VecDeque::from([from]);
    seen[(from.y * w + from.x) as usize] = true;
    while let Some(p) = queue.pop_front() {
        if p == to {
            return true;
        }
        for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            let q = Pos::new(p.x + dx, p.y + dy);
            if q.x < 0 || q.y < 0 || q.x >= w || q.y >= h || level.is_wall(q) {
                continue;
            }
            let i = (q.y * w + q.x) as usize;
            if !seen[i] {
                seen[i] = true;
                queue.push_back(q);
            }
        }
    }
    false
}

fn config() -> impl Strategy<Value = LevelConfig> {
    (4u32..12, 4u32..12, 1u32..300).prop_map(|(w, h, m)| LevelConfig {
        width: 2 * w + 1,
        height: 2 * h + 1,
        max_steps: m,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn generated_levels_are_valid(seed in any::<u64>(), cfg in config()) {
        let level = generate_level(seed, &cfg).unwrap();
        prop_assert_eq!(&level, &generate_level(seed, &cfg).unwrap());
        prop_assert!(reachable(&level, level.start_pos(), level.goal_pos()));
        prop_assert_ne!(level.start_pos(), level.goal_pos());
        prop_assert_eq!(level.gaps().len(), 4);
        for g in level.gaps() {
            prop_assert!(!level.is_wall(*g));
        }
        let back = Level::from_json(&level.to_json()).unwrap();
        prop_assert_eq!(back, level);
    }

    #[test]
    fn episodes_respect_reward_and_length_contracts(
        seed in any::<u64>(),
        actions in prop::collection::vec(0usize..3, 1..400),
    ) {
        let level = generate_level(seed, &LevelConfig::default()).unwrap();
        let (mut state, _) = reset(&level);
        let mut steps = 0;
        for a in actions {
            if state.done {
                break;
            }
            let s = step(&state, Action::ALL[a]).unwrap();
            steps += 1;
            prop_assert!((0.0..=1.0).contains(&s.reward));
            prop_assert!(s.reward == 0.0 || s.done);
            prop_assert!(!level.is_wall(s.state.agent_pos));
            prop_assert!(s.state.steps_used <= level.max_steps());
            prop_assert!(s.observation.is_valid());
            prop_assert_eq!(s.observation, observe(&s.state));
            if s.done {
                prop_assert!(s.state.agent_pos == level.goal_pos()
                    || s.state.steps_used == level.max_steps());
            }
            prop_assert_eq!(step(&state, Action::ALL[a]).unwrap(), s);
            state = s.state;
        }
        prop_assert!(steps <= level.max_steps() as usize);
    }
}

#[test]
fn channel_maxima_are_declared() {
    assert_eq!(CHANNEL_MAX, [3, 0, 0]);
}
