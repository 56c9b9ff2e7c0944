//! Actor-critic network with a hand-derived backward pass.
//!
//! Two separate tanh MLPs share the observation input: the actor maps it to
//! action logits, the critic to a scalar state value. [`PolicyParams`] holds
//! every weight and bias and is the unit copied between agents.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{Action, Observation, OBS_LEN};
use crate::rng::{self, Rng};

pub const HIDDEN: [usize; 2] = [64, 64];
pub const N_ACTIONS: usize = Action::COUNT;
pub const PARAMS_FORMAT_VERSION: u32 = 1;

const STREAM_INIT: u64 = 0x1417;

/// Layer sizes of both heads. Only tests use anything but the default.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arch {
    pub input: usize,
    pub hidden: Vec<usize>,
}

impl Default for Arch {
    fn default() -> Self {
        Arch {
            input: OBS_LEN,
            hidden: HIDDEN.to_vec(),
        }
    }
}

impl Arch {
    fn sizes(&self, head: usize) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.hidden.len() + 2);
        s.push(self.input);
        s.extend_from_slice(&self.hidden);
        s.push(head);
        s
    }
}

/// Fully connected layer; `weights` is `outputs x inputs`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in self
            .weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .enumerate()
        {
            out[o] = b + dot(row, x);
        }
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
/// Summation order is fixed, so results are reproducible.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Tanh on every hidden layer, identity on the output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    fn zeros(sizes: &[usize]) -> Self {
        Mlp {
            layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    fn init(sizes: &[usize], rng: &mut Rng) -> Self {
        let mut mlp = Mlp::zeros(sizes);
        for layer in &mut mlp.layers {
            let bound = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.gen_range(-bound..bound);
            }
        }
        mlp
    }

    fn output_len(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    /// Writes each layer's output into `acts`; the last entry is the head output.
    fn forward(&self, x: &[f64], acts: &mut [Vec<f64>]) {
        let n = self.layers.len();
        for k in 0..n {
            let (before, after) = acts.split_at_mut(k);
            let input = if k == 0 { x } else { &before[k - 1][..] };
            let out = &mut after[0];
            self.layers[k].forward(input, out);
            if k + 1 < n {
                for v in out.iter_mut() {
                    *v = v.tanh();
                }
            }
        }
    }

    /// Accumulates parameter gradients into `grad` given d(loss)/d(output).
    fn backward(
        &self,
        x: &[f64],
        acts: &[Vec<f64>],
        d_out: &[f64],
        grad: &mut Mlp,
        scratch: &mut [Vec<f64>; 2],
    ) {
        let n = self.layers.len();
        let [delta, next] = scratch;
        delta.clear();
        delta.extend_from_slice(d_out);
        for k in (0..n).rev() {
            let layer = &self.layers[k];
            let g = &mut grad.layers[k];
            let input = if k == 0 { x } else { &acts[k - 1][..] };
            for (o, &d) in delta.iter().enumerate() {
                g.bias[o] += d;
                if d != 0.0 {
                    axpy(
                        d,
                        input,
                        &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs],
                    );
                }
            }
            if k == 0 {
                break;
            }
            next.clear();
            next.resize(layer.inputs, 0.0);
            for (o, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    axpy(
                        d,
                        &layer.weights[o * layer.inputs..(o + 1) * layer.inputs],
                        next,
                    );
                }
            }
            for (v, a) in next.iter_mut().zip(&acts[k - 1]) {
                *v *= 1.0 - a * a;
            }
            std::mem::swap(delta, next);
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }
}

/// All weights and biases of the actor and critic.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub actor: Mlp,
    pub critic: Mlp,
}

/// Fresh parameters for the default architecture.
pub fn init_params(seed: u64) -> PolicyParams {
    PolicyParams::init(&Arch::default(), seed)
}

/// Deep copy. Exists to name the copy step of agent initialization.
pub fn clone_params(src: &PolicyParams) -> PolicyParams {
    src.clone()
}

impl PolicyParams {
    /// Glorot-uniform weights, zero biases; deterministic in `seed`.
    pub fn init(arch: &Arch, seed: u64) -> Self {
        let mut rng = rng::stream(seed, STREAM_INIT);
        let actor = Mlp::init(&arch.sizes(N_ACTIONS), &mut rng);
        let critic = Mlp::init(&arch.sizes(1), &mut rng);
        PolicyParams { actor, critic }
    }

    pub fn zeros(arch: &Arch) -> Self {
        PolicyParams {
            actor: Mlp::zeros(&arch.sizes(N_ACTIONS)),
            critic: Mlp::zeros(&arch.sizes(1)),
        }
    }

    pub fn arch(&self) -> Arch {
        let layers = &self.actor.layers;
        Arch {
            input: layers.first().map_or(0, |l| l.inputs),
            hidden: layers.iter().skip(1).map(|l| l.inputs).collect(),
        }
    }

    pub fn input_len(&self) -> usize {
        self.actor.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn len(&self) -> usize {
        self.values().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every parameter in a fixed order: actor then critic, per layer
    /// weights then bias.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.actor.values().chain(self.critic.values())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.actor.values_mut().chain(self.critic.values_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &PolicyParams) -> bool {
        let shape = |m: &Mlp| -> Vec<(usize, usize)> {
            m.layers.iter().map(|l| (l.inputs, l.outputs)).collect()
        };
        shape(&self.actor) == shape(&other.actor) && shape(&self.critic) == shape(&other.critic)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&PolicyFile::from(self)).expect("params serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: PolicyFile = serde_json::from_str(text)?;
        file.try_into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PolicyParams::from_json(&text).map_err(|e| Error::format(path, e))
    }
}

#[derive(Serialize, Deserialize)]
struct Heads {
    actor: usize,
    critic: usize,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// On-disk layout: header, then per head the layers in order with row-major
/// weights.
#[derive(Serialize, Deserialize)]
struct PolicyFile {
    version: u32,
    arch: Vec<usize>,
    heads: Heads,
    actor: Vec<LayerFile>,
    critic: Vec<LayerFile>,
}

impl From<&PolicyParams> for PolicyFile {
    fn from(p: &PolicyParams) -> Self {
        let arch = p.arch();
        let mut sizes = vec![arch.input];
        sizes.extend(arch.hidden);
        let layers = |m: &Mlp| {
            m.layers
                .iter()
                .map(|l| LayerFile {
                    weights: l.weights.clone(),
                    bias: l.bias.clone(),
                })
                .collect()
        };
        PolicyFile {
            version: PARAMS_FORMAT_VERSION,
            arch: sizes,
            heads: Heads {
                actor: p.actor.output_len(),
                critic: p.critic.output_len(),
            },
            actor: layers(&p.actor),
            critic: layers(&p.critic),
        }
    }
}

impl TryFrom<PolicyFile> for PolicyParams {
    type Error = Error;

    fn try_from(f: PolicyFile) -> Result<Self> {
        if f.version != PARAMS_FORMAT_VERSION {
            return Err(Error::Shape(format!(
                "unsupported params version {}",
                f.version
            )));
        }
        if f.arch.is_empty() || f.heads.actor != N_ACTIONS || f.heads.critic != 1 {
            return Err(Error::Shape("unexpected architecture header".into()));
        }
        let build = |layers: Vec<LayerFile>, head: usize| -> Result<Mlp> {
            let mut sizes = f.arch.clone();
            sizes.push(head);
            if layers.len() != sizes.len() - 1 {
                return Err(Error::Shape(format!(
                    "expected {} layers, found {}",
                    sizes.len() - 1,
                    layers.len()
                )));
            }
            let layers = layers
                .into_iter()
                .zip(sizes.windows(2))
                .map(|(l, w)| {
                    if l.weights.len() != w[0] * w[1] || l.bias.len() != w[1] {
                        return Err(Error::Shape(format!(
                            "layer {}x{} has wrong size",
                            w[1], w[0]
                        )));
                    }
                    if !l.weights.iter().chain(&l.bias).all(|v| v.is_finite()) {
                        return Err(Error::Shape("non-finite parameter".into()));
                    }
                    Ok(Dense {
                        inputs: w[0],
                        outputs: w[1],
                        weights: l.weights,
                        bias: l.bias,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Mlp { layers })
        };
        let actor = build(f.actor, N_ACTIONS)?;
        let critic = build(f.critic, 1)?;
        Ok(PolicyParams { actor, critic })
    }
}

/// Partial derivatives of a scalar loss, shaped like [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub PolicyParams);

impl Gradients {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        Gradients(PolicyParams::zeros(&params.arch()))
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.0.values()
    }

    pub fn global_norm(&self) -> f64 {
        self.values().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.0.values_mut() {
            *g *= factor;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionDistribution {
    pub probs: [f64; N_ACTIONS],
}

impl ActionDistribution {
    pub fn log_prob(&self, action: Action) -> f64 {
        self.probs[action.index()].ln()
    }

    /// Highest-probability action; ties go to the lowest index.
    pub fn greedy(&self) -> Action {
        let mut best = 0;
        for i in 1..N_ACTIONS {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        Action::ALL[best]
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }
}

/// Numerically stable softmax returning `(probs, log_probs)`.
fn log_softmax(logits: &[f64]) -> ([f64; N_ACTIONS], [f64; N_ACTIONS]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    let mut probs = [0.0; N_ACTIONS];
    let mut logp = [0.0; N_ACTIONS];
    for i in 0..N_ACTIONS {
        logp[i] = logits[i] - lse;
        probs[i] = logp[i].exp();
    }
    (probs, logp)
}

/// Reusable activation buffers for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct Scratch {
    actor: Vec<Vec<f64>>,
    critic: Vec<Vec<f64>>,
    back: [Vec<f64>; 2],
}

impl Scratch {
    pub fn new(params: &PolicyParams) -> Self {
        let bufs = |m: &Mlp| m.layers.iter().map(|l| vec![0.0; l.outputs]).collect();
        Scratch {
            actor: bufs(&params.actor),
            critic: bufs(&params.critic),
            back: [Vec::new(), Vec::new()],
        }
    }
}

/// Action distribution and state value for a feature vector.
pub fn forward_features(
    params: &PolicyParams,
    features: &[f64],
    scratch: &mut Scratch,
) -> Result<(ActionDistribution, f64)> {
    if features.len() != params.input_len() {
        return Err(Error::Shape(format!(
            "expected {} features, got {}",
            params.input_len(),
            features.len()
        )));
    }
    params.actor.forward(features, &mut scratch.actor);
    params.critic.forward(features, &mut scratch.critic);
    let logits = scratch.actor.last().expect("actor has layers");
    let value = scratch.critic.last().expect("critic has layers")[0];
    let (probs, _) = log_softmax(logits);
    if !value.is_finite() || !probs.iter().all(|p| p.is_finite()) {
        return Err(Error::Diverged("non-finite network output".into()));
    }
    Ok((ActionDistribution { probs }, value))
}

/// Scaled observation through both heads.
pub fn forward(params: &PolicyParams, obs: &Observation) -> Result<(ActionDistribution, f64)> {
    let mut scratch = Scratch::new(params);
    forward_features(params, &obs.features(), &mut scratch)
}

/// Inverse-CDF draw; advances `rng` by one `f64`.
pub fn sample_action(dist: &ActionDistribution, rng: &mut Rng) -> Action {
    let u: f64 = rng.gen();
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (i, &p) in dist.probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        cumulative += p;
        if u < cumulative {
            return Action::ALL[i];
        }
    }
    Action::ALL[last_positive]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            clip_eps: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
        }
    }
}

/// One training sample for [`grad_loss`].
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub features: &'a [f64],
    pub action: Action,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

/// Mean-reduced loss terms of one [`grad_loss`] call.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Clipped surrogate (to be maximized).
    pub surrogate: f64,
    /// Mean of the unclipped `ratio * advantage` terms.
    pub unclipped_surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
}

/// Clipped-surrogate loss `-L_clip + c_v * mse(ret, V) - c_e * H` averaged
/// over the batch, with its exact gradient.
pub fn grad_loss(
    params: &PolicyParams,
    batch: &[Sample<'_>],
    spec: &LossSpec,
) -> Result<(LossBreakdown, Gradients)> {
    let mut grads = Gradients::zeros_like(params);
    let mut scratch = Scratch::new(params);
    let loss = accumulate_grad(params, batch, spec, &mut grads, &mut scratch)?;
    Ok((loss, grads))
}

/// [`grad_loss`] into caller-owned buffers; `grads` is overwritten.
pub fn accumulate_grad(
    params: &PolicyParams,
    batch: &[Sample<'_>],
    spec: &LossSpec,
    grads: &mut Gradients,
    scratch: &mut Scratch,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Shape("empty minibatch".into()));
    }
    for g in grads.0.values_mut() {
        *g = 0.0;
    }
    let n = batch.len() as f64;
    let mut out = LossBreakdown::default();
    let mut clipped = 0usize;
    let mut d_logits = [0.0; N_ACTIONS];

    for s in batch {
        if s.features.len() != params.input_len() {
            return Err(Error::Shape("sample feature length".into()));
        }
        params.actor.forward(s.features, &mut scratch.actor);
        params.critic.forward(s.features, &mut scratch.critic);
        let (probs, logp) = log_softmax(scratch.actor.last().expect("actor has layers"));
        let value = scratch.critic.last().expect("critic has layers")[0];
        let a = s.action.index();

        let ratio = (logp[a] - s.old_log_prob).exp();
        let unclipped = ratio * s.advantage;
        let clipped_ratio = ratio.clamp(1.0 - spec.clip_eps, 1.0 + spec.clip_eps);
        let clipped_term = clipped_ratio * s.advantage;
        let surrogate = unclipped.min(clipped_term);
        debug_assert!(surrogate <= unclipped);
        // The surrogate follows the ratio unless the clipped branch is
        // strictly smaller, where it is constant.
        let d_surr_d_ratio = if unclipped <= clipped_term {
            s.advantage
        } else {
            clipped += 1;
            0.0
        };

        let entropy: f64 = -probs.iter().zip(&logp).map(|(p, l)| p * l).sum::<f64>();
        let err = s.ret - value;

        out.surrogate += surrogate / n;
        out.unclipped_surrogate += unclipped / n;
        out.value_loss += err * err / n;
        out.entropy += entropy / n;

        for j in 0..N_ACTIONS {
            let indicator = if j == a { 1.0 } else { 0.0 };
            let d_ratio = ratio * (indicator - probs[j]);
            let d_entropy = -probs[j] * (logp[j] + entropy);
            d_logits[j] = (-d_surr_d_ratio * d_ratio - spec.entropy_coef * d_entropy) / n;
        }
        let d_value = [-2.0 * spec.value_coef * err / n];

        params.actor.backward(
            s.features,
            &scratch.actor,
            &d_logits,
            &mut grads.0.actor,
            &mut scratch.back,
        );
        params.critic.backward(
            s.features,
            &scratch.critic,
            &d_value,
            &mut grads.0.critic,
            &mut scratch.back,
        );
    }

    out.total = -out.surrogate + spec.value_coef * out.value_loss - spec.entropy_coef * out.entropy;
    out.clip_fraction = clipped as f64 / n;
    if !out.total.is_finite() {
        return Err(Error::Diverged(format!("loss is {}", out.total)));
    }
    Ok(out)
}

/// Adaptive moment estimation. State is per agent and never copied between
/// agents.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: PolicyParams,
    v: PolicyParams,
}

impl Adam {
    pub fn new(params: &PolicyParams, lr: f64) -> Self {
        let arch = params.arch();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: PolicyParams::zeros(&arch),
            v: PolicyParams::zeros(&arch),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut PolicyParams, grads: &Gradients) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step = self.lr * c2.sqrt() / c1;
        let eps_hat = self.eps * c2.sqrt();
        for (((p, g), m), v) in params
            .values_mut()
            .zip(grads.values())
            .zip(self.m.values_mut())
            .zip(self.v.values_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step * *m / (v.sqrt() + eps_hat);
        }
    }
}
