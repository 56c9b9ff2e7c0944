//! Oracles shared by several test targets.
#![allow(dead_code)]

use ecopool::gridworld::Action;
use ecopool::policy::{grad_loss, Arch, LossSpec, PolicyParams, Sample};
use ecopool::ppo::Trajectory;
use ecopool::rng;
use rand::Rng;

pub const H: f64 = 1e-5;

pub struct Batch {
    pub features: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Batch {
    pub fn samples(&self) -> Vec<Sample<'_>> {
        (0..self.features.len())
            .map(|i| Sample {
                features: &self.features[i],
                action: self.actions[i],
                old_log_prob: self.old_log_probs[i],
                advantage: self.advantages[i],
                ret: self.returns[i],
            })
            .collect()
    }
}

pub fn log_prob(params: &PolicyParams, features: &[f64], action: Action) -> f64 {
    let mut scratch = ecopool::policy::Scratch::new(params);
    let (dist, _) = ecopool::policy::forward_features(params, features, &mut scratch).unwrap();
    dist.log_prob(action)
}

/// Random small net and batch. Old log-probs are offset from the current
/// ones so some ratios fall outside the clip range, but never within 1e-3
/// of its edges where the loss has a kink.
pub fn instance(seed: u64, n: usize, hidden: usize, spec: &LossSpec) -> (PolicyParams, Batch) {
    let mut rng = rng::stream(seed, 42);
    let arch = Arch {
        input: 147,
        hidden: vec![hidden],
    };
    let params = PolicyParams::init(&arch, seed);
    let mut batch = Batch {
        features: Vec::new(),
        actions: Vec::new(),
        old_log_probs: Vec::new(),
        advantages: Vec::new(),
        returns: Vec::new(),
    };
    while batch.features.len() < n {
        // Observation-like inputs: codes/3 on channel 0, zeros elsewhere.
        let features: Vec<f64> = (0..147)
            .map(|i| {
                if i % 3 == 0 {
                    rng.gen_range(0..4) as f64 / 3.0
                } else {
                    0.0
                }
            })
            .collect();
        let action = Action::ALL[rng.gen_range(0..3)];
        let lp = log_prob(&params, &features, action);
        let offset: f64 = rng.gen_range(-0.4..0.4);
        let ratio = (-offset as f64).exp();
        let near_edge = [1.0 - spec.clip_eps, 1.0 + spec.clip_eps]
            .iter()
            .any(|e| (ratio - e).abs() < 1e-3);
        if near_edge {
            continue;
        }
        batch.features.push(features);
        batch.actions.push(action);
        batch.old_log_probs.push(lp + offset);
        batch.advantages.push(rng.gen_range(-2.0..2.0));
        batch.returns.push(rng.gen_range(-1.0..1.0));
    }
    (params, batch)
}

/// Largest relative error between analytic and central-difference gradients.
/// The denominator is floored at 1e-6 so parameters with ~zero gradient are
/// judged on absolute error.
pub fn max_relative_error(params: &PolicyParams, batch: &Batch, spec: &LossSpec) -> f64 {
    let samples = batch.samples();
    let (_, grads) = grad_loss(params, &samples, spec).unwrap();
    let analytic: Vec<f64> = grads.values().copied().collect();
    let loss_at = |p: &PolicyParams| grad_loss(p, &samples, spec).unwrap().0.total;

    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (k, a) in analytic.iter().enumerate() {
        let original = *probe.values().nth(k).unwrap();
        *probe.values_mut().nth(k).unwrap() = original + H;
        let plus = loss_at(&probe);
        *probe.values_mut().nth(k).unwrap() = original - H;
        let minus = loss_at(&probe);
        *probe.values_mut().nth(k).unwrap() = original;
        let numeric = (plus - minus) / (2.0 * H);
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

/// `A_t = sum_k (gamma*lambda)^k delta_{t+k}`, summed until the first episode
/// end at or after `t`.
pub fn brute_force(
    rewards: &[f64],
    dones: &[bool],
    values: &[f64],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let n = rewards.len();
    let delta = |t: usize| {
        let next = if t + 1 < n { values[t + 1] } else { last_value };
        let bootstrap = if dones[t] { 0.0 } else { gamma * next };
        rewards[t] + bootstrap - values[t]
    };
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            for k in 0..(n - t) {
                sum += (gamma * lambda).powi(k as i32) * delta(t + k);
                if dones[t + k] {
                    break;
                }
            }
            sum
        })
        .collect()
}

pub fn trajectory(
    rewards: Vec<f64>,
    dones: Vec<bool>,
    values: Vec<f64>,
    last_value: f64,
) -> Trajectory {
    let n = rewards.len();
    Trajectory {
        observations: Vec::new(),
        features: Vec::new(),
        actions: vec![Action::Forward; n],
        rewards,
        dones,
        log_probs: vec![0.0; n],
        values,
        last_value,
    }
}
