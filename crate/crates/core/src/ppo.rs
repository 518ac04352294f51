//! Proximal policy optimization with hand-written reverse-mode gradients.
//!
//! Both networks are plain multilayer perceptrons whose parameters live in one
//! flat vector per network, so optimizer steps, gradient clipping and finite
//! difference checks all work on slices.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, SimRng};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn slope(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Linear => 1.0,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Linear => "linear",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "linear" => Ok(Activation::Linear),
            _ => Err(Error::Checkpoint(format!("unknown activation {s:?}"))),
        }
    }
}

/// Multilayer perceptron. Layer `l` maps `sizes[l]` inputs to `sizes[l+1]`
/// outputs; its weights are stored row-major (one row per output) and are
/// followed by its biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    acts: Vec<Activation>,
    params: Vec<f64>,
}

/// Post-activation values of every layer, input included.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map_or(&[], Vec::as_slice)
    }
}

impl Mlp {
    /// Xavier-uniform weights, zero biases. The last layer's weights are
    /// multiplied by `out_gain`.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, out_gain: f64, rng: &mut SimRng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::domain("an MLP needs at least two non-zero layer sizes"));
        }
        let n_layers = sizes.len() - 1;
        let acts: Vec<Activation> = (0..n_layers).map(|l| if l + 1 == n_layers { output } else { hidden }).collect();
        let mut params = Vec::with_capacity(Self::count(sizes));
        for l in 0..n_layers {
            let (i, o) = (sizes[l], sizes[l + 1]);
            let limit = (6.0 / (i + o) as f64).sqrt();
            let gain = if l + 1 == n_layers { out_gain } else { 1.0 };
            params.extend((0..i * o).map(|_| gain * rng.gen_range(-limit..limit)));
            params.extend(std::iter::repeat(0.0).take(o));
        }
        Ok(Mlp { sizes: sizes.to_vec(), acts, params })
    }

    /// Builds a network from explicit `(weights rows, bias, activation)` layers.
    pub fn from_layers(layers: &[(Vec<Vec<f64>>, Vec<f64>, Activation)]) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::domain("no layers"))?;
        let mut sizes = vec![first.0.first().map_or(0, Vec::len)];
        let mut acts = Vec::new();
        let mut params = Vec::new();
        for (w, b, act) in layers {
            let n_in = *sizes.last().unwrap();
            if w.len() != b.len() {
                return Err(Error::dim("bias length", w.len(), b.len()));
            }
            for row in w {
                if row.len() != n_in {
                    return Err(Error::dim("weight row length", n_in, row.len()));
                }
                params.extend_from_slice(row);
            }
            params.extend_from_slice(b);
            sizes.push(b.len());
            acts.push(*act);
        }
        if sizes.contains(&0) {
            return Err(Error::domain("empty layer"));
        }
        Ok(Mlp { sizes, acts, params })
    }

    fn count(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.acts
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut t = Trace::default();
        self.forward_trace(x, &mut t)?;
        Ok(t.acts.pop().unwrap())
    }

    /// Forward pass that keeps every layer's output for [`Mlp::backward`].
    pub fn forward_trace(&self, x: &[f64], trace: &mut Trace) -> Result<()> {
        if x.len() != self.sizes[0] {
            return Err(Error::dim("network input", self.sizes[0], x.len()));
        }
        let n_layers = self.acts.len();
        trace.acts.resize_with(n_layers + 1, Vec::new);
        trace.acts[0].clear();
        trace.acts[0].extend_from_slice(x);
        let mut off = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let (prev, next) = trace.acts.split_at_mut(l + 1);
            let input = &prev[l];
            let out = &mut next[0];
            out.clear();
            let act = self.acts[l];
            out.extend(w.chunks_exact(n_in).zip(b).map(|(row, bias)| act.apply(dot(row, input) + bias)));
            off += n_in * n_out + n_out;
        }
        Ok(())
    }

    /// Accumulates `∂(upstream · output)/∂params` into `grad` and returns the
    /// gradient with respect to the input.
    pub fn backward(&self, trace: &Trace, upstream: &[f64], grad: &mut [f64]) -> Result<Vec<f64>> {
        if upstream.len() != self.output_dim() {
            return Err(Error::dim("upstream gradient", self.output_dim(), upstream.len()));
        }
        if grad.len() != self.params.len() {
            return Err(Error::dim("gradient buffer", self.params.len(), grad.len()));
        }
        if trace.acts.len() != self.sizes.len() {
            return Err(Error::domain("backward called without a matching forward trace"));
        }
        let n_layers = self.acts.len();
        let mut delta: Vec<f64> = upstream
            .iter()
            .zip(&trace.acts[n_layers])
            .map(|(g, y)| g * self.acts[n_layers - 1].slope(*y))
            .collect();
        let mut off = self.params.len();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            off -= n_in * n_out + n_out;
            let input = &trace.acts[l];
            let (gw, gb) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            for ((row, gbias), d) in gw.chunks_exact_mut(n_in).zip(gb.iter_mut()).zip(&delta) {
                *gbias += d;
                axpy(*d, input, row);
            }
            let w = &self.params[off..off + n_in * n_out];
            let mut g_in = vec![0.0; n_in];
            for (row, d) in w.chunks_exact(n_in).zip(&delta) {
                axpy(*d, row, &mut g_in);
            }
            if l > 0 {
                let act = self.acts[l - 1];
                for (g, y) in g_in.iter_mut().zip(input) {
                    *g *= act.slope(*y);
                }
            }
            delta = g_in;
        }
        Ok(delta)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Diagonal Gaussian over the raw action with a state-independent log-std.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub net: Mlp,
    pub log_std: Vec<f64>,
}

/// `log N(a; μ, diag(σ²))`.
pub fn gaussian_log_prob(a: &[f64], mu: &[f64], log_std: &[f64]) -> f64 {
    let mut s = 0.0;
    for ((x, m), ls) in a.iter().zip(mu).zip(log_std) {
        let z = (x - m) * (-ls).exp();
        s += -0.5 * z * z - ls;
    }
    s - 0.5 * a.len() as f64 * LN_2PI
}

impl GaussianPolicy {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], init_log_std: f64, rng: &mut SimRng) -> Result<Self> {
        let mut sizes = vec![state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(action_dim);
        Ok(GaussianPolicy {
            net: Mlp::new(&sizes, Activation::Tanh, Activation::Linear, 0.01, rng)?,
            log_std: vec![init_log_std; action_dim],
        })
    }

    pub fn action_dim(&self) -> usize {
        self.net.output_dim()
    }

    /// Log-std after clamping to `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub fn effective_log_std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect()
    }

    pub fn mean(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(state)
    }

    /// `a = μ(s) + σ ⊙ z` and its log density.
    pub fn sample(&self, state: &[f64], rng: &mut SimRng) -> Result<(Vec<f64>, f64)> {
        let mu = self.mean(state)?;
        let ls = self.effective_log_std();
        let a: Vec<f64> = mu
            .iter()
            .zip(&ls)
            .map(|(m, l)| {
                let z: f64 = rng.sample(StandardNormal);
                m + l.exp() * z
            })
            .collect();
        let lp = gaussian_log_prob(&a, &mu, &ls);
        Ok((a, lp))
    }

    pub fn log_prob(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        if action.len() != self.action_dim() {
            return Err(Error::dim("action", self.action_dim(), action.len()));
        }
        Ok(gaussian_log_prob(action, &self.mean(state)?, &self.effective_log_std()))
    }
}

/// `δ_t = r_t + γ·V(s_{t+1})·(1 − done_t) − V(s_t)`, with `V(s_T) = last_value`.
pub fn td_residuals(rewards: &[f64], values: &[f64], dones: &[bool], last_value: f64, gamma: f64) -> Result<Vec<f64>> {
    let t = rewards.len();
    if t == 0 {
        return Err(Error::domain("empty trajectory"));
    }
    if values.len() != t {
        return Err(Error::dim("value estimates", t, values.len()));
    }
    if dones.len() != t {
        return Err(Error::dim("done flags", t, dones.len()));
    }
    Ok((0..t)
        .map(|i| {
            let next = if i + 1 < t { values[i + 1] } else { last_value };
            let cont = if dones[i] { 0.0 } else { 1.0 };
            rewards[i] + gamma * next * cont - values[i]
        })
        .collect())
}

/// Generalized advantage estimates by backward recursion:
/// `Â_t = δ_t + γλ·(1 − done_t)·Â_{t+1}`.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], last_value: f64, gamma: f64, lam: f64) -> Result<Vec<f64>> {
    let deltas = td_residuals(rewards, values, dones, last_value, gamma)?;
    let mut adv = vec![0.0; deltas.len()];
    let mut acc = 0.0;
    for i in (0..deltas.len()).rev() {
        let cont = if dones[i] { 0.0 } else { 1.0 };
        acc = deltas[i] + gamma * lam * cont * acc;
        adv[i] = acc;
    }
    Ok(adv)
}

/// `min(r·Â, clip(r, 1 − ε, 1 + ε)·Â)` with `r = exp(lp_new − lp_old)`.
pub fn clipped_surrogate(log_prob_new: f64, log_prob_old: f64, advantage: f64, eps: f64) -> f64 {
    let r = (log_prob_new - log_prob_old).exp();
    (r * advantage).min(r.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// Derivative of [`clipped_surrogate`] with respect to `lp_new`: `r·Â` on the
/// unclipped branch, zero on the clipped one.
fn clipped_surrogate_slope(log_prob_new: f64, log_prob_old: f64, advantage: f64, eps: f64) -> f64 {
    let r = (log_prob_new - log_prob_old).exp();
    let clipped = r.clamp(1.0 - eps, 1.0 + eps);
    if r * advantage <= clipped * advantage || clipped == r {
        r * advantage
    } else {
        0.0
    }
}

/// Mean of `(V − V̂)²`.
pub fn critic_loss(values: &[f64], targets: &[f64]) -> Result<f64> {
    if values.len() != targets.len() {
        return Err(Error::dim("critic targets", values.len(), targets.len()));
    }
    if values.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    Ok(values.iter().zip(targets).map(|(v, t)| (v - t) * (v - t)).sum::<f64>() / values.len() as f64)
}

/// One stored interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub log_prob_old: f64,
    pub reward: f64,
    pub value: f64,
    pub done: bool,
}

/// Training sample for one minibatch entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub log_prob_old: f64,
    pub advantage: f64,
    pub target: f64,
}

/// Actor loss `−mean_i min(r_i·Â_i, clip(r_i)·Â_i)`.
pub fn actor_loss(policy: &GaussianPolicy, batch: &[Sample], eps: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    let mut s = 0.0;
    for x in batch {
        let lp = policy.log_prob(&x.state, &x.action)?;
        s += clipped_surrogate(lp, x.log_prob_old, x.advantage, eps);
    }
    Ok(-s / batch.len() as f64)
}

/// [`actor_loss`] and its gradient, accumulated into `g_net` and `g_log_std`.
pub fn actor_loss_grad(
    policy: &GaussianPolicy,
    batch: &[Sample],
    eps: f64,
    g_net: &mut [f64],
    g_log_std: &mut [f64],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    if g_log_std.len() != policy.log_std.len() {
        return Err(Error::dim("log-std gradient", policy.log_std.len(), g_log_std.len()));
    }
    let ls = policy.effective_log_std();
    let inv_var: Vec<f64> = ls.iter().map(|l| (-2.0 * l).exp()).collect();
    let scale = 1.0 / batch.len() as f64;
    let mut trace = Trace::default();
    let mut up = vec![0.0; policy.action_dim()];
    let mut loss = 0.0;
    for x in batch {
        policy.net.forward_trace(&x.state, &mut trace)?;
        let mu = trace.output();
        if x.action.len() != mu.len() {
            return Err(Error::dim("action", mu.len(), x.action.len()));
        }
        let lp = gaussian_log_prob(&x.action, mu, &ls);
        loss -= clipped_surrogate(lp, x.log_prob_old, x.advantage, eps);
        let c = -scale * clipped_surrogate_slope(lp, x.log_prob_old, x.advantage, eps);
        if c == 0.0 {
            continue;
        }
        for j in 0..mu.len() {
            let d = x.action[j] - mu[j];
            up[j] = c * d * inv_var[j];
            let raw = policy.log_std[j];
            if (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw) {
                g_log_std[j] += c * (d * d * inv_var[j] - 1.0);
            }
        }
        policy.net.backward(&trace, &up, g_net)?;
    }
    Ok(loss * scale)
}

/// Critic loss over a batch and its gradient, accumulated into `grad`.
pub fn critic_loss_grad(critic: &Mlp, batch: &[Sample], grad: &mut [f64]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut trace = Trace::default();
    let mut loss = 0.0;
    for x in batch {
        critic.forward_trace(&x.state, &mut trace)?;
        let e = trace.output()[0] - x.target;
        loss += e * e;
        critic.backward(&trace, &[2.0 * e * scale], grad)?;
    }
    Ok(loss * scale)
}

/// Rescales `g` so its Euclidean norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        g.iter_mut().for_each(|x| *x *= s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Descent step on `params` along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lam: f64,
    pub clip_eps: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub minibatch_size: usize,
    pub buffer_capacity: usize,
    pub epochs_per_update: usize,
    pub max_episodes: usize,
    /// Steps per episode cap; the environment may end an episode earlier.
    pub max_steps: usize,
    pub grad_clip_actor: f64,
    pub grad_clip_critic: f64,
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    pub normalize_advantages: bool,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            lam: 0.95,
            clip_eps: 0.2,
            lr_actor: 1e-3,
            lr_critic: 3e-4,
            minibatch_size: 128,
            buffer_capacity: 2048,
            epochs_per_update: 10,
            max_episodes: 2000,
            max_steps: 32,
            grad_clip_actor: 0.5,
            grad_clip_critic: 0.5,
            hidden: vec![128, 128],
            init_log_std: -0.5,
            normalize_advantages: true,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("gamma must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.lam) {
            return Err(Error::config("lam must lie in [0, 1]"));
        }
        if !(self.clip_eps > 0.0) {
            return Err(Error::config("clip_eps must be > 0"));
        }
        if !(self.lr_actor >= 0.0 && self.lr_critic >= 0.0) {
            return Err(Error::config("learning rates must be >= 0"));
        }
        if self.minibatch_size == 0 || self.buffer_capacity == 0 || self.max_steps == 0 {
            return Err(Error::config("minibatch_size, buffer_capacity and max_steps must be >= 1"));
        }
        if !(self.grad_clip_actor > 0.0 && self.grad_clip_critic > 0.0) {
            return Err(Error::config("gradient clip thresholds must be > 0"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden layer sizes must be >= 1"));
        }
        if !(LOG_STD_MIN..=LOG_STD_MAX).contains(&self.init_log_std) {
            return Err(Error::config("init_log_std must lie in [-5, 1]"));
        }
        Ok(())
    }
}

/// What the learner needs back from one environment step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Feedback {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub ses_per_user: Vec<f64>,
    pub power_violated: bool,
    /// Fraction of users below their SES threshold.
    pub ses_violation_rate: f64,
    /// Flipped and sent bits on the common stream, summed over users.
    pub common_bits: (usize, usize),
    /// Flipped and sent bits on each private stream.
    pub private_bits: Vec<(usize, usize)>,
}

impl Feedback {
    pub fn mean_ses(&self) -> f64 {
        if self.ses_per_user.is_empty() {
            return 0.0;
        }
        self.ses_per_user.iter().sum::<f64>() / self.ses_per_user.len() as f64
    }
}

pub trait Environment {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn reset(&mut self) -> Result<Vec<f64>>;
    fn step(&mut self, action: &[f64]) -> Result<Feedback>;
}

impl Environment for crate::env::Env {
    fn state_dim(&self) -> usize {
        self.config().state_dim()
    }

    fn action_dim(&self) -> usize {
        self.config().action_dim()
    }

    fn reset(&mut self) -> Result<Vec<f64>> {
        crate::env::Env::reset(self)
    }

    fn step(&mut self, action: &[f64]) -> Result<Feedback> {
        let out = crate::env::Env::step(self, action)?;
        Ok(Feedback::from(out))
    }
}

impl From<crate::env::StepOutcome> for Feedback {
    fn from(out: crate::env::StepOutcome) -> Self {
        let k = out.per_user_ses.len() as f64;
        Feedback {
            ses_per_user: out.ses_totals(),
            power_violated: out.power_slack < 0.0,
            ses_violation_rate: out.ses_slacks.iter().filter(|s| **s < 0.0).count() as f64 / k,
            common_bits: out
                .ber_report
                .common_counts()
                .iter()
                .fold((0, 0), |(e, n), (a, b)| (e + a, n + b)),
            private_bits: out.ber_report.private_counts(),
            reward: out.reward,
            done: out.done,
            next_state: out.next_state,
        }
    }
}

fn rate((flips, bits): (usize, usize)) -> Option<f64> {
    (bits > 0).then(|| flips as f64 / bits as f64)
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    /// Mean per-step reward.
    pub mean_reward: f64,
    pub mean_ses_per_user: f64,
    pub power_violation_rate: f64,
    pub ses_violation_rate: f64,
    /// Per-user SES averaged over the episode.
    pub ses_per_user: Vec<f64>,
    /// Measured common-stream BER over the episode, if any bits were sent.
    pub ber_common: Option<f64>,
    pub ber_private: Vec<Option<f64>>,
}

#[derive(Default)]
struct EpisodeAcc {
    steps: usize,
    reward: f64,
    ses: Vec<f64>,
    power: f64,
    ses_viol: f64,
    common: (usize, usize),
    private: Vec<(usize, usize)>,
}

impl EpisodeAcc {
    fn add(&mut self, fb: &Feedback) {
        self.steps += 1;
        self.reward += fb.reward;
        self.ses.resize(fb.ses_per_user.len(), 0.0);
        self.ses.iter_mut().zip(&fb.ses_per_user).for_each(|(a, b)| *a += b);
        self.power += f64::from(u8::from(fb.power_violated));
        self.ses_viol += fb.ses_violation_rate;
        self.common.0 += fb.common_bits.0;
        self.common.1 += fb.common_bits.1;
        self.private.resize(fb.private_bits.len(), (0, 0));
        for (a, b) in self.private.iter_mut().zip(&fb.private_bits) {
            a.0 += b.0;
            a.1 += b.1;
        }
    }

    fn finish(self, episode: usize) -> EpisodeRecord {
        let n = self.steps.max(1) as f64;
        let ses_per_user: Vec<f64> = self.ses.iter().map(|s| s / n).collect();
        let mean_ses = if ses_per_user.is_empty() {
            0.0
        } else {
            ses_per_user.iter().sum::<f64>() / ses_per_user.len() as f64
        };
        EpisodeRecord {
            episode,
            mean_reward: self.reward / n,
            mean_ses_per_user: mean_ses,
            power_violation_rate: self.power / n,
            ses_violation_rate: self.ses_viol / n,
            ses_per_user,
            ber_common: rate(self.common),
            ber_private: self.private.into_iter().map(rate).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub log: Vec<EpisodeRecord>,
    pub actor: GaussianPolicy,
    pub critic: Mlp,
    /// Transitions consumed by each update.
    pub update_sizes: Vec<usize>,
}

impl TrainingOutcome {
    pub fn rewards(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.mean_reward).collect()
    }
}

/// Fresh actor and critic for the given dimensions.
pub fn init_networks(state_dim: usize, action_dim: usize, cfg: &PpoConfig) -> Result<(GaussianPolicy, Mlp)> {
    let mut rng = rng::stream(cfg.seed, rng::streams::NET_INIT);
    let actor = GaussianPolicy::new(state_dim, action_dim, &cfg.hidden, cfg.init_log_std, &mut rng)?;
    let mut sizes = vec![state_dim];
    sizes.extend_from_slice(&cfg.hidden);
    sizes.push(1);
    let critic = Mlp::new(&sizes, Activation::Tanh, Activation::Linear, 1.0, &mut rng)?;
    Ok((actor, critic))
}

struct Learner {
    actor: GaussianPolicy,
    critic: Mlp,
    opt_net: Adam,
    opt_log_std: Adam,
    opt_critic: Adam,
}

impl Learner {
    fn update(&mut self, buffer: &[Transition], last_value: f64, cfg: &PpoConfig, rng: &mut SimRng) -> Result<()> {
        let rewards: Vec<f64> = buffer.iter().map(|t| t.reward).collect();
        let values: Vec<f64> = buffer.iter().map(|t| t.value).collect();
        let dones: Vec<bool> = buffer.iter().map(|t| t.done).collect();
        let adv = gae(&rewards, &values, &dones, last_value, cfg.gamma, cfg.lam)?;
        let targets: Vec<f64> = adv.iter().zip(&values).map(|(a, v)| a + v).collect();
        let norm_adv = if cfg.normalize_advantages {
            normalize(&adv)
        } else {
            adv
        };
        let samples: Vec<Sample> = buffer
            .iter()
            .zip(norm_adv.iter().zip(&targets))
            .map(|(t, (a, v))| Sample {
                state: t.state.clone(),
                action: t.action.clone(),
                log_prob_old: t.log_prob_old,
                advantage: *a,
                target: *v,
            })
            .collect();

        let mut order: Vec<usize> = (0..samples.len()).collect();
        let n_net = self.actor.net.n_params();
        let mut g_actor = vec![0.0; n_net + self.actor.log_std.len()];
        let mut g_critic = vec![0.0; self.critic.n_params()];
        let mut batch = Vec::with_capacity(cfg.minibatch_size);
        for _ in 0..cfg.epochs_per_update {
            order.shuffle(rng);
            for chunk in order.chunks(cfg.minibatch_size) {
                batch.clear();
                batch.extend(chunk.iter().map(|&i| samples[i].clone()));

                g_actor.iter_mut().for_each(|g| *g = 0.0);
                let (gn, gl) = g_actor.split_at_mut(n_net);
                actor_loss_grad(&self.actor, &batch, cfg.clip_eps, gn, gl)?;
                clip_grad_norm(&mut g_actor, cfg.grad_clip_actor);
                let (gn, gl) = g_actor.split_at(n_net);
                self.opt_net.step(self.actor.net.params_mut(), gn);
                self.opt_log_std.step(&mut self.actor.log_std, gl);

                g_critic.iter_mut().for_each(|g| *g = 0.0);
                critic_loss_grad(&self.critic, &batch, &mut g_critic)?;
                clip_grad_norm(&mut g_critic, cfg.grad_clip_critic);
                self.opt_critic.step(self.critic.params_mut(), &g_critic);
            }
        }
        if self.actor.net.params().iter().chain(self.critic.params()).any(|p| !p.is_finite()) {
            return Err(Error::domain("non-finite network parameters after update"));
        }
        Ok(())
    }
}

fn normalize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt() + 1e-8;
    x.iter().map(|v| (v - mean) / sd).collect()
}

/// Collect-then-update PPO loop.
///
/// Every `buffer_capacity` transitions the buffer is turned into GAE
/// advantages, used for `epochs_per_update` passes of minibatch updates and
/// then emptied. Transitions left over when training stops are discarded.
pub fn train<E: Environment>(env: &mut E, cfg: &PpoConfig) -> Result<TrainingOutcome> {
    let (actor, critic) = init_networks(env.state_dim(), env.action_dim(), cfg)?;
    train_from(env, cfg, actor, critic)
}

/// As [`train`], starting from the given networks.
pub fn train_from<E: Environment>(env: &mut E, cfg: &PpoConfig, actor: GaussianPolicy, critic: Mlp) -> Result<TrainingOutcome> {
    cfg.validate()?;
    if actor.net.input_dim() != env.state_dim() || critic.input_dim() != env.state_dim() {
        return Err(Error::dim("network input", env.state_dim(), actor.net.input_dim()));
    }
    if actor.action_dim() != env.action_dim() || critic.output_dim() != 1 {
        return Err(Error::dim("actor output", env.action_dim(), actor.action_dim()));
    }
    let mut learner = Learner {
        opt_net: Adam::new(actor.net.n_params(), cfg.lr_actor),
        opt_log_std: Adam::new(actor.log_std.len(), cfg.lr_actor),
        opt_critic: Adam::new(critic.n_params(), cfg.lr_critic),
        actor,
        critic,
    };
    let mut policy_rng = rng::stream(cfg.seed, rng::streams::POLICY);
    let mut batch_rng = rng::stream(cfg.seed, rng::streams::MINIBATCH);
    let mut buffer: Vec<Transition> = Vec::with_capacity(cfg.buffer_capacity);
    let mut log = Vec::with_capacity(cfg.max_episodes);
    let mut update_sizes = Vec::new();

    for episode in 0..cfg.max_episodes {
        let mut state = env.reset()?;
        let mut acc = EpisodeAcc::default();
        loop {
            let (action, log_prob_old) = learner.actor.sample(&state, &mut policy_rng)?;
            let value = learner.critic.forward(&state)?[0];
            let fb = env.step(&action)?;
            acc.add(&fb);
            let done = fb.done || acc.steps >= cfg.max_steps;
            buffer.push(Transition {
                state: std::mem::replace(&mut state, fb.next_state),
                action,
                log_prob_old,
                reward: fb.reward,
                value,
                done,
            });
            if buffer.len() == cfg.buffer_capacity {
                let last_value = if done { 0.0 } else { learner.critic.forward(&state)?[0] };
                learner.update(&buffer, last_value, cfg, &mut batch_rng)?;
                update_sizes.push(buffer.len());
                buffer.clear();
            }
            if done {
                break;
            }
        }
        log.push(acc.finish(episode));
    }
    Ok(TrainingOutcome {
        log,
        actor: learner.actor,
        critic: learner.critic,
        update_sizes,
    })
}

const CHECKPOINT_MAGIC: &str = "semsplit-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

fn write_mlp(out: &mut String, name: &str, m: &Mlp) {
    let sizes: Vec<String> = m.sizes.iter().map(ToString::to_string).collect();
    let acts: Vec<&str> = m.acts.iter().map(|a| a.name()).collect();
    let _ = writeln!(out, "network {name}");
    let _ = writeln!(out, "sizes {}", sizes.join(" "));
    let _ = writeln!(out, "activations {}", acts.join(" "));
    let _ = writeln!(out, "params {}", m.params.len());
    for p in &m.params {
        let _ = writeln!(out, "{p:e}");
    }
}

/// Text checkpoint: a header line with format version, then for each network
/// its layer sizes, activations and parameter count, one value per line.
pub fn save_checkpoint(path: &Path, actor: &GaussianPolicy, critic: &Mlp) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}");
    write_mlp(&mut out, "actor", &actor.net);
    let _ = writeln!(out, "log_std {}", actor.log_std.len());
    for p in &actor.log_std {
        let _ = writeln!(out, "{p:e}");
    }
    write_mlp(&mut out, "critic", critic);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

struct Lines<R> {
    inner: std::io::Lines<R>,
}

impl<R: BufRead> Lines<R> {
    fn next(&mut self) -> Result<String> {
        match self.inner.next() {
            Some(l) => Ok(l?),
            None => Err(Error::Checkpoint("unexpected end of checkpoint".into())),
        }
    }

    fn keyed(&mut self, key: &str) -> Result<String> {
        let l = self.next()?;
        l.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_owned)
            .ok_or_else(|| Error::Checkpoint(format!("expected {key:?}, got {l:?}")))
    }

    fn count(&mut self, key: &str) -> Result<usize> {
        let v = self.keyed(key)?;
        v.trim().parse().map_err(|_| Error::Checkpoint(format!("bad count {v:?}")))
    }

    fn values(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n)
            .map(|_| {
                let l = self.next()?;
                let v: f64 = l.trim().parse().map_err(|_| Error::Checkpoint(format!("bad value {l:?}")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::Checkpoint("non-finite parameter".into()))
                }
            })
            .collect()
    }

    fn mlp(&mut self, name: &str) -> Result<Mlp> {
        let got = self.keyed("network")?;
        if got != name {
            return Err(Error::Checkpoint(format!("expected network {name}, got {got}")));
        }
        let sizes = self
            .keyed("sizes")?
            .split_whitespace()
            .map(|s| s.parse::<usize>().map_err(|_| Error::Checkpoint(format!("bad size {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let acts = self
            .keyed("activations")?
            .split_whitespace()
            .map(Activation::parse)
            .collect::<Result<Vec<_>>>()?;
        if sizes.len() < 2 || sizes.contains(&0) || acts.len() + 1 != sizes.len() {
            return Err(Error::Checkpoint("inconsistent layer header".into()));
        }
        let n = self.count("params")?;
        if n != Mlp::count(&sizes) {
            return Err(Error::Checkpoint(format!(
                "header implies {} parameters, file declares {n}",
                Mlp::count(&sizes)
            )));
        }
        Ok(Mlp {
            sizes,
            acts,
            params: self.values(n)?,
        })
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(GaussianPolicy, Mlp)> {
    let f = std::fs::File::open(path)?;
    let mut lines = Lines {
        inner: BufReader::new(f).lines(),
    };
    let head = lines.next()?;
    if head != format!("{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}") {
        return Err(Error::Checkpoint(format!("unsupported checkpoint header {head:?}")));
    }
    let net = lines.mlp("actor")?;
    let n = lines.count("log_std")?;
    if n != net.output_dim() {
        return Err(Error::Checkpoint("log_std length differs from actor output".into()));
    }
    let log_std = lines.values(n)?;
    let critic = lines.mlp("critic")?;
    if critic.input_dim() != net.input_dim() || critic.output_dim() != 1 {
        return Err(Error::Checkpoint("critic shape does not match actor".into()));
    }
    Ok((GaussianPolicy { net, log_std }, critic))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rng(seed: u64) -> SimRng {
        rng::stream(seed, 0)
    }

    #[test]
    fn identity_and_affine_layers() {
        let id = Mlp::from_layers(&[(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0], Activation::Linear)]).unwrap();
        assert_eq!(id.forward(&[0.3, -2.0]).unwrap(), vec![0.3, -2.0]);
        let aff = Mlp::from_layers(&[(vec![vec![2.0]], vec![1.0], Activation::Linear)]).unwrap();
        assert_eq!(aff.forward(&[3.0]).unwrap(), vec![7.0]);
        assert!(aff.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn forward_matches_naive_matmul() {
        let mut r = rng(1);
        let net = Mlp::new(&[5, 7, 4, 3], Activation::Tanh, Activation::Linear, 1.0, &mut r).unwrap();
        let x: Vec<f64> = (0..5).map(|i| 0.3 * i as f64 - 0.5).collect();
        // independent oracle: explicit index arithmetic over the flat layout
        let mut h = x.clone();
        let mut off = 0;
        for l in 0..3 {
            let (ni, no) = (net.sizes()[l], net.sizes()[l + 1]);
            let mut y = vec![0.0; no];
            for o in 0..no {
                let mut s = net.params()[off + ni * no + o];
                for i in 0..ni {
                    s += net.params()[off + o * ni + i] * h[i];
                }
                y[o] = if l < 2 { s.tanh() } else { s };
            }
            off += ni * no + no;
            h = y;
        }
        let got = net.forward(&x).unwrap();
        for (a, b) in got.iter().zip(&h) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn linear_backward_is_outer_product() {
        let net = Mlp::from_layers(&[(vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]], vec![0.5, -0.5], Activation::Linear)]).unwrap();
        let mut t = Trace::default();
        net.forward_trace(&[1.0, -1.0, 2.0], &mut t).unwrap();
        let mut g = vec![0.0; net.n_params()];
        let gx = net.backward(&t, &[2.0, -3.0], &mut g).unwrap();
        assert_eq!(&g[..6], &[2.0, -2.0, 4.0, -3.0, 3.0, -6.0]);
        assert_eq!(&g[6..], &[2.0, -3.0]);
        assert_eq!(gx, vec![2.0 - 12.0, 4.0 - 15.0, 6.0 - 18.0]);
        let mut g0 = vec![0.0; net.n_params()];
        net.backward(&t, &[0.0, 0.0], &mut g0).unwrap();
        assert!(g0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut r = rng(2);
        let mut net = Mlp::new(&[4, 6, 5, 3], Activation::Tanh, Activation::Linear, 1.0, &mut r).unwrap();
        let x = [0.2, -0.7, 1.1, 0.05];
        let up = [0.3, -1.2, 0.8];
        let f = |n: &Mlp| dot(&n.forward(&x).unwrap(), &up);
        let mut t = Trace::default();
        net.forward_trace(&x, &mut t).unwrap();
        let mut g = vec![0.0; net.n_params()];
        net.backward(&t, &up, &mut g).unwrap();
        let h = 1e-5;
        for i in 0..net.n_params() {
            let p = net.params()[i];
            net.params_mut()[i] = p + h;
            let fp = f(&net);
            net.params_mut()[i] = p - h;
            let fm = f(&net);
            net.params_mut()[i] = p;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6) < 1e-4, "param {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn log_prob_at_mean_with_unit_std() {
        let d = 5;
        let lp = gaussian_log_prob(&[0.0; 5], &[0.0; 5], &[0.0; 5]);
        assert_relative_eq!(lp, -(d as f64) / 2.0 * (2.0 * std::f64::consts::PI).ln(), max_relative = 1e-15);
    }

    #[test]
    fn sampling() {
        let mut r = rng(3);
        let mut p = GaussianPolicy::new(3, 2, &[4], 0.0, &mut r).unwrap();
        let s = [0.1, 0.2, 0.3];
        let (a1, l1) = p.sample(&s, &mut rng(9)).unwrap();
        let (a2, l2) = p.sample(&s, &mut rng(9)).unwrap();
        assert_eq!((a1.clone(), l1), (a2, l2));
        assert_relative_eq!(l1, p.log_prob(&s, &a1).unwrap(), max_relative = 1e-12);
        p.log_std = vec![-40.0; 2];
        let (a, _) = p.sample(&s, &mut rng(9)).unwrap();
        let mu = p.mean(&s).unwrap();
        for (x, m) in a.iter().zip(&mu) {
            assert!((x - m).abs() < 6.0 * LOG_STD_MIN.exp());
        }
    }

    #[test]
    fn surrogate_examples() {
        assert_eq!(clipped_surrogate(0.3, 0.3, 1.7, 0.2), 1.7);
        assert_relative_eq!(clipped_surrogate(1.5f64.ln(), 0.0, 2.0, 0.2), 2.4, max_relative = 1e-12);
        assert_relative_eq!(clipped_surrogate(0.5f64.ln(), 0.0, -1.0, 0.2), -0.8, max_relative = 1e-12);
    }

    #[test]
    fn surrogate_bounds() {
        let mut r = rng(4);
        for _ in 0..10_000 {
            let lp = r.gen_range(-2.0..2.0);
            let a = r.gen_range(-3.0..3.0);
            let v = clipped_surrogate(lp, 0.0, a, 0.2);
            let ratio = f64::exp(lp);
            assert!(v <= ratio * a + 1e-12);
            if a > 0.0 {
                assert!(v <= 1.2 * a + 1e-12);
            }
            assert_eq!(v, (ratio * a).min(ratio.clamp(0.8, 1.2) * a));
        }
    }

    #[test]
    fn critic_loss_examples() {
        assert_eq!(critic_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(critic_loss(&[0.0], &[2.0]).unwrap(), 4.0);
        assert!(critic_loss(&[0.0], &[]).is_err());
        let mut r = rng(5);
        let v: Vec<f64> = (0..50).map(|_| r.gen_range(-3.0..3.0)).collect();
        let t: Vec<f64> = (0..50).map(|_| r.gen_range(-3.0..3.0)).collect();
        let mut oracle = 0.0;
        for i in 0..50 {
            oracle += (v[i] - t[i]).powi(2) / 50.0;
        }
        assert!((critic_loss(&v, &t).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn gae_cases() {
        let d = td_residuals(&[1.0], &[0.5], &[false], 2.0, 0.9).unwrap();
        assert_eq!(gae(&[1.0], &[0.5], &[false], 2.0, 0.9, 0.7).unwrap(), d);
        let r = [1.0, -0.5, 2.0, 0.3];
        let v = [0.2, 0.1, -0.4, 0.9];
        let dn = [false, false, true, false];
        assert_eq!(
            gae(&r, &v, &dn, 0.6, 0.95, 0.0).unwrap(),
            td_residuals(&r, &v, &dn, 0.6, 0.95).unwrap()
        );
        assert!(gae(&[], &[], &[], 0.0, 0.9, 0.9).is_err());
        assert!(gae(&[1.0], &[], &[false], 0.0, 0.9, 0.9).is_err());
    }

    #[test]
    fn gae_lambda_one_is_return_minus_baseline() {
        let r = [1.0, 0.5, -0.25, 2.0, 0.1];
        let v = [0.3, -0.2, 0.7, 0.1, 0.4];
        let dn = [false, false, false, false, true];
        let a = gae(&r, &v, &dn, 123.0, 0.9, 1.0).unwrap();
        for t in 0..5 {
            let ret = crate::env::discounted_return(&r[t..], 0.9).unwrap();
            assert!((a[t] - (ret - v[t])).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_lr_keeps_bits() {
        let mut p = vec![0.1, -3.0, 7.5];
        let before = p.clone();
        let mut o = Adam::new(3, 0.0);
        o.step(&mut p, &[1.0, -2.0, 0.5]);
        assert_eq!(p, before);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut o = Adam::new(2, 0.05);
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 8.0 * p[1]];
            o.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-2 && p[1].abs() < 1e-2, "{p:?}");
    }

    #[test]
    fn grad_clipping() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert_relative_eq!(g[0], 0.6);
        assert_relative_eq!(g[1], 0.8);
        let mut g = vec![0.1, 0.1];
        clip_grad_norm(&mut g, 1.0);
        assert_eq!(g, vec![0.1, 0.1]);
    }

    #[test]
    fn config_validation() {
        assert!(PpoConfig::default().validate().is_ok());
        let c = PpoConfig {
            clip_eps: 0.0,
            ..PpoConfig::default()
        };
        assert!(c.validate().unwrap_err().is_config());
        let c = PpoConfig {
            lam: 1.5,
            ..PpoConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = PpoConfig {
            hidden: vec![5, 4],
            ..PpoConfig::default()
        };
        let (mut a, c) = init_networks(6, 3, &cfg).unwrap();
        a.log_std = vec![-0.3, 0.1, 1e-17];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x").join("policy.ckpt");
        save_checkpoint(&path, &a, &c).unwrap();
        let (a2, c2) = load_checkpoint(&path).unwrap();
        assert_eq!(a, a2);
        assert_eq!(c, c2);

        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replacen("sizes 6 5 4 3", "sizes 6 5 4 4", 1)).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
        std::fs::write(&path, text.replacen("v1", "v9", 1)).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
