//! On-policy training: rollouts, advantage estimation, clipped-surrogate
//! updates, and the `learn_epoch` / `test_agent` primitives used by the
//! eco-system.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{self, Action, Level, Observation};
use crate::policy::{
    accumulate_grad, sample_action, Adam, Gradients, LossBreakdown, LossSpec, PolicyParams, Sample,
    Scratch,
};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    /// Clip range of the probability ratio.
    pub epsilon: f64,
    pub rollout_steps: usize,
    pub minibatch_size: usize,
    pub update_epochs: usize,
    pub lr: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    /// Global gradient-norm cap per minibatch; 0 disables it.
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            lambda: 0.95,
            epsilon: 0.2,
            rollout_steps: 512,
            minibatch_size: 64,
            update_epochs: 10,
            lr: 3e-4,
            value_coef: 0.5,
            entropy_coef: 0.01,
            max_grad_norm: 0.5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Config(format!("ppo.{key}: {msg}")));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma", "must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda", "must be in [0, 1]");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon", "must be positive");
        }
        if self.rollout_steps == 0 {
            return bad("rollout_steps", "must be positive");
        }
        if self.minibatch_size == 0 || self.minibatch_size > self.rollout_steps {
            return bad("minibatch_size", "must be in 1..=rollout_steps");
        }
        if self.update_epochs == 0 {
            return bad("update_epochs", "must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(self.value_coef >= 0.0) || !(self.entropy_coef >= 0.0) {
            return bad("value_coef", "coefficients must be non-negative");
        }
        if !(self.max_grad_norm >= 0.0) {
            return bad("max_grad_norm", "must be non-negative");
        }
        Ok(())
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            clip_eps: self.epsilon,
            value_coef: self.value_coef,
            entropy_coef: self.entropy_coef,
        }
    }
}

/// Transitions in collection order. Parallel arrays of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub observations: Vec<Observation>,
    /// Scaled observations, `input_len` values per step.
    pub features: Vec<f64>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    /// Critic value of the state following the last transition; 0 when that
    /// transition ended an episode.
    pub last_value: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn features_at(&self, t: usize) -> &[f64] {
        let stride = self.features.len() / self.len().max(1);
        &self.features[t * stride..(t + 1) * stride]
    }
}

/// Runs episodes back to back on `level` until `n_steps` transitions are stored.
pub fn collect_rollout(
    params: &PolicyParams,
    level: &Level,
    n_steps: usize,
    rng: &mut Rng,
) -> Result<Trajectory> {
    let mut scratch = Scratch::new(params);
    let input = params.input_len();
    let mut traj = Trajectory {
        observations: Vec::with_capacity(n_steps),
        features: Vec::with_capacity(n_steps * input),
        actions: Vec::with_capacity(n_steps),
        rewards: Vec::with_capacity(n_steps),
        dones: Vec::with_capacity(n_steps),
        log_probs: Vec::with_capacity(n_steps),
        values: Vec::with_capacity(n_steps),
        last_value: 0.0,
    };
    let (mut state, mut obs) = gridworld::reset(level);
    let mut features = obs.features();
    for _ in 0..n_steps {
        let (dist, value) = crate::policy::forward_features(params, &features, &mut scratch)?;
        let action = sample_action(&dist, rng);
        let step = gridworld::step(&state, action)?;

        traj.observations.push(obs);
        traj.features.extend_from_slice(&features);
        traj.actions.push(action);
        traj.rewards.push(step.reward);
        traj.dones.push(step.done);
        traj.log_probs.push(dist.log_prob(action));
        traj.values.push(value);

        if step.done {
            (state, obs) = gridworld::reset(level);
        } else {
            state = step.state;
            obs = step.observation;
        }
        features = obs.features();
    }
    if traj.dones.last() == Some(&false) {
        let (_, value) = crate::policy::forward_features(params, &features, &mut scratch)?;
        traj.last_value = value;
    }
    Ok(traj)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gae {
    /// Raw (unnormalized) advantages.
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Generalized advantage estimates, truncated at episode ends.
pub fn compute_gae(traj: &Trajectory, gamma: f64, lambda: f64) -> Result<Gae> {
    let n = traj.len();
    if n == 0 {
        return Err(Error::EmptyTrajectory);
    }
    let mut advantages = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 == n {
            traj.last_value
        } else {
            traj.values[t + 1]
        };
        let nonterminal = if traj.dones[t] { 0.0 } else { 1.0 };
        let delta = traj.rewards[t] + gamma * next_value * nonterminal - traj.values[t];
        running = delta + gamma * lambda * nonterminal * running;
        advantages[t] = running;
    }
    let returns = advantages
        .iter()
        .zip(&traj.values)
        .map(|(a, v)| a + v)
        .collect();
    Ok(Gae {
        advantages,
        returns,
    })
}

/// Zero mean, unit (population) variance, with a 1e-8 guard on the scale.
pub fn normalize_advantages(advantages: &[f64]) -> Vec<f64> {
    let n = advantages.len() as f64;
    let mean = advantages.iter().sum::<f64>() / n;
    let var = advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let scale = var.sqrt() + 1e-8;
    advantages.iter().map(|a| (a - mean) / scale).collect()
}

/// Policy parameters with the optimizer state that belongs to them. A new
/// agent always starts with a fresh optimizer.
#[derive(Debug, Clone)]
pub struct Learner {
    pub params: PolicyParams,
    pub optimizer: Adam,
}

impl Learner {
    pub fn new(params: PolicyParams, cfg: &PpoConfig) -> Self {
        let optimizer = Adam::new(&params, cfg.lr);
        Learner { params, optimizer }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    /// Loss terms at the very first minibatch, before any parameter change.
    pub first: LossBreakdown,
    pub mean_loss: f64,
    pub minibatches: usize,
}

/// Several epochs of shuffled minibatch updates on one trajectory.
pub fn ppo_update(
    learner: &mut Learner,
    traj: &Trajectory,
    cfg: &PpoConfig,
    rng: &mut Rng,
) -> Result<UpdateStats> {
    if traj.len() < cfg.minibatch_size {
        return Err(Error::Shape(format!(
            "trajectory of {} steps is shorter than a minibatch of {}",
            traj.len(),
            cfg.minibatch_size
        )));
    }
    let gae = compute_gae(traj, cfg.gamma, cfg.lambda)?;
    let advantages = normalize_advantages(&gae.advantages);
    let spec = cfg.loss_spec();

    let mut grads = Gradients::zeros_like(&learner.params);
    let mut scratch = Scratch::new(&learner.params);
    let mut indices: Vec<usize> = (0..traj.len()).collect();
    let mut batch = Vec::with_capacity(cfg.minibatch_size);
    let mut stats = UpdateStats::default();
    let mut loss_sum = 0.0;

    for _ in 0..cfg.update_epochs {
        indices.shuffle(rng);
        for chunk in indices.chunks(cfg.minibatch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&t| Sample {
                features: traj.features_at(t),
                action: traj.actions[t],
                old_log_prob: traj.log_probs[t],
                advantage: advantages[t],
                ret: gae.returns[t],
            }));
            let loss = accumulate_grad(&learner.params, &batch, &spec, &mut grads, &mut scratch)?;
            if stats.minibatches == 0 {
                stats.first = loss;
            }
            if cfg.max_grad_norm > 0.0 {
                let norm = grads.global_norm();
                if norm > cfg.max_grad_norm {
                    grads.scale(cfg.max_grad_norm / (norm + 1e-6));
                }
            }
            learner.optimizer.step(&mut learner.params, &grads);
            loss_sum += loss.total;
            stats.minibatches += 1;
        }
    }
    if !learner.params.is_finite() {
        return Err(Error::Diverged("non-finite parameters after update".into()));
    }
    stats.mean_loss = loss_sum / stats.minibatches as f64;
    Ok(stats)
}

/// One rollout of `cfg.rollout_steps` transitions plus one update. Returns
/// the number of environment steps consumed.
pub fn learn_epoch(
    learner: &mut Learner,
    level: &Level,
    cfg: &PpoConfig,
    rng: &mut Rng,
) -> Result<usize> {
    let traj = collect_rollout(&learner.params, level, cfg.rollout_steps, rng)?;
    ppo_update(learner, &traj, cfg, rng)?;
    Ok(cfg.rollout_steps)
}

/// Total reward of one greedy episode. No learning, no randomness.
pub fn test_agent(params: &PolicyParams, level: &Level) -> Result<f64> {
    let mut scratch = Scratch::new(params);
    let (mut state, mut obs) = gridworld::reset(level);
    let mut total = 0.0;
    loop {
        let (dist, _) = crate::policy::forward_features(params, &obs.features(), &mut scratch)?;
        let step = gridworld::step(&state, dist.greedy())?;
        total += step.reward;
        if step.done {
            return Ok(total);
        }
        state = step.state;
        obs = step.observation;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{generate_level, parse_ascii, LevelConfig};
    use crate::policy::{forward, init_params, Arch};
    use crate::rng;

    fn traj_from(rewards: &[f64], dones: &[bool], values: &[f64], last_value: f64) -> Trajectory {
        let n = rewards.len();
        Trajectory {
            observations: Vec::new(),
            features: Vec::new(),
            actions: vec![Action::Forward; n],
            rewards: rewards.to_vec(),
            dones: dones.to_vec(),
            log_probs: vec![0.0; n],
            values: values.to_vec(),
            last_value,
        }
    }

    #[test]
    fn gae_lambda_zero_is_td_error() {
        let t = traj_from(
            &[0.0, 0.5, 0.0, 1.0],
            &[false, false, true, false],
            &[0.1, 0.2, 0.3, 0.4],
            0.7,
        );
        let g = compute_gae(&t, 0.9, 0.0).unwrap();
        let deltas = [
            0.0 + 0.9 * 0.2 - 0.1,
            0.5 + 0.9 * 0.3 - 0.2,
            0.0 - 0.3,
            1.0 + 0.9 * 0.7 - 0.4,
        ];
        for (a, d) in g.advantages.iter().zip(deltas) {
            assert!((a - d).abs() < 1e-15);
        }
    }

    #[test]
    fn gae_single_step_episode() {
        let t = traj_from(&[0.7], &[true], &[0.0], 0.0);
        let g = compute_gae(&t, 1.0, 0.95).unwrap();
        assert_eq!(g.advantages, vec![0.7]);
        assert_eq!(g.returns, vec![0.7]);
    }

    #[test]
    fn gae_rejects_empty() {
        let t = traj_from(&[], &[], &[], 0.0);
        assert!(matches!(
            compute_gae(&t, 0.99, 0.95),
            Err(Error::EmptyTrajectory)
        ));
    }

    #[test]
    fn normalized_advantages_have_unit_scale() {
        let a = normalize_advantages(&[1.0, 2.0, 3.0, 4.0]);
        let mean: f64 = a.iter().sum::<f64>() / 4.0;
        let var: f64 = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
        assert!(normalize_advantages(&[0.0; 5]).iter().all(|x| *x == 0.0));
    }

    #[test]
    fn rollout_has_requested_length_and_consistent_records() {
        let level = generate_level(5, &LevelConfig::default()).unwrap();
        let params = init_params(3);
        let mut rng = rng::stream(1, 0);
        let traj = collect_rollout(&params, &level, 512, &mut rng).unwrap();
        assert_eq!(traj.len(), 512);
        assert_eq!(traj.observations.len(), 512);
        assert_eq!(traj.features.len(), 512 * 147);
        assert!(traj.rewards.iter().all(|r| (0.0..=1.0).contains(r)));
        for t in 0..traj.len() {
            let (dist, value) = forward(&params, &traj.observations[t]).unwrap();
            assert_eq!(dist.log_prob(traj.actions[t]), traj.log_probs[t]);
            assert_eq!(value, traj.values[t]);
        }
    }

    #[test]
    fn update_rejects_short_trajectory() {
        let level = generate_level(5, &LevelConfig::default()).unwrap();
        let cfg = PpoConfig::default();
        let mut learner = Learner::new(init_params(3), &cfg);
        let mut rng = rng::stream(1, 0);
        let traj = collect_rollout(&learner.params, &level, 10, &mut rng).unwrap();
        assert!(ppo_update(&mut learner, &traj, &cfg, &mut rng).is_err());
    }

    #[test]
    fn unclipped_first_step_surrogate_is_mean_ratio_times_advantage() {
        let level = generate_level(9, &LevelConfig::default()).unwrap();
        let cfg = PpoConfig {
            epsilon: f64::INFINITY,
            rollout_steps: 64,
            minibatch_size: 64,
            update_epochs: 1,
            ..PpoConfig::default()
        };
        let mut learner = Learner::new(init_params(2), &cfg);
        let mut rng = rng::stream(2, 0);
        let traj = collect_rollout(&learner.params, &level, 64, &mut rng).unwrap();
        let stats = ppo_update(&mut learner, &traj, &cfg, &mut rng).unwrap();
        // ratio == 1 at collection parameters, so the mean of r*A is the mean
        // of the normalized advantages, which is zero.
        let adv = normalize_advantages(
            &compute_gae(&traj, cfg.gamma, cfg.lambda)
                .unwrap()
                .advantages,
        );
        let mean_adv = adv.iter().sum::<f64>() / adv.len() as f64;
        assert!((stats.first.surrogate - stats.first.unclipped_surrogate).abs() < 1e-12);
        assert!((stats.first.surrogate - mean_adv).abs() < 1e-12);
        assert_eq!(stats.first.clip_fraction, 0.0);
    }

    #[test]
    fn update_is_reproducible() {
        let level = generate_level(9, &LevelConfig::default()).unwrap();
        let cfg = PpoConfig {
            rollout_steps: 128,
            ..PpoConfig::default()
        };
        let run = || {
            let mut learner = Learner::new(init_params(2), &cfg);
            let mut rng = rng::stream(2, 0);
            let steps = learn_epoch(&mut learner, &level, &cfg, &mut rng).unwrap();
            (steps, learner.params)
        };
        let (s1, p1) = run();
        let (s2, p2) = run();
        assert_eq!(s1, 128);
        assert_eq!(s1, s2);
        assert_eq!(p1, p2);
        assert_ne!(p1, init_params(2));
    }

    fn forward_only_params() -> PolicyParams {
        let mut p = PolicyParams::zeros(&Arch::default());
        p.actor.layers.last_mut().unwrap().bias = vec![0.0, 0.0, 10.0];
        p
    }

    #[test]
    fn scripted_forward_agent_scores_formula_reward() {
        let level = parse_ascii("#########\n#>..G...#\n#########\n", 100).unwrap();
        let p = forward_only_params();
        let r = test_agent(&p, &level).unwrap();
        assert_eq!(r, 1.0 - 0.9 * (3.0 / 100.0));
        assert_eq!(r, test_agent(&p, &level).unwrap());
    }

    #[test]
    fn untrained_agents_mostly_fail_hard_levels() {
        let cfg = LevelConfig::default();
        let mut zero = 0;
        for seed in 0..20u64 {
            let level = generate_level(1000 + seed, &cfg).unwrap();
            if test_agent(&init_params(seed), &level).unwrap() == 0.0 {
                zero += 1;
            }
        }
        assert!(zero > 10, "only {zero}/20 untrained agents timed out");
    }

    #[test]
    fn config_validation() {
        assert!(PpoConfig::default().validate().is_ok());
        let bad = PpoConfig {
            minibatch_size: 1024,
            ..PpoConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = PpoConfig {
            gamma: 0.0,
            ..PpoConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
