//! Single-layer LSTM Q-network with a two-output linear head.
//!
//! The network reads a window one scalar per timestep, starting from zero
//! hidden and cell state, and maps the final hidden state to `(q0, q1)`.
//! Gradients are derived by hand (backpropagation through time) for this
//! one architecture.
//!
//! All parameters live in one flat buffer so the optimizer and gradient
//! checks can treat them uniformly. Per gate (input, forget, cell, output)
//! the buffer holds the input weights (`hidden`), the recurrent weights
//! (`hidden x hidden`, row = destination unit) and the bias (`hidden`),
//! followed by the head weights (`2 x hidden`) and head bias (`2`).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN: usize = 64;
pub const FORGET_BIAS: f64 = 1.0;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Cell = 2,
    Output = 3,
}

const GATES: [Gate; 4] = [Gate::Input, Gate::Forget, Gate::Cell, Gate::Output];

pub fn param_count(hidden: usize) -> usize {
    4 * (hidden * hidden + 2 * hidden) + 2 * hidden + 2
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNetParams {
    hidden: usize,
    weights: Vec<f64>,
}

impl QNetParams {
    /// All-zero parameters of the given shape. Also used as a gradient buffer.
    pub fn zeros(hidden: usize) -> Self {
        QNetParams {
            hidden,
            weights: vec![0.0; param_count(hidden)],
        }
    }

    /// Uniform `[-1/sqrt(hidden), 1/sqrt(hidden)]` weights, zero biases
    /// except the forget gate, whose bias starts at 1.
    pub fn init(hidden: usize, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Parameter("hidden size must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 1.0 / (hidden as f64).sqrt();
        let mut p = QNetParams::zeros(hidden);
        for gate in GATES {
            for w in p.w_in_mut(gate) {
                *w = rng.random_range(-k..=k);
            }
            for w in p.w_rec_mut(gate) {
                *w = rng.random_range(-k..=k);
            }
        }
        for w in p.head_w_mut() {
            *w = rng.random_range(-k..=k);
        }
        p.bias_mut(Gate::Forget).fill(FORGET_BIAS);
        Ok(p)
    }

    pub fn from_flat(hidden: usize, weights: Vec<f64>) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Parameter("hidden size must be at least 1".into()));
        }
        if weights.len() != param_count(hidden) {
            return Err(Error::Shape {
                expected: param_count(hidden),
                actual: weights.len(),
            });
        }
        Ok(QNetParams { hidden, weights })
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    fn gate_base(&self, gate: Gate) -> usize {
        gate as usize * (self.hidden * self.hidden + 2 * self.hidden)
    }

    fn range_w_in(&self, gate: Gate) -> std::ops::Range<usize> {
        let b = self.gate_base(gate);
        b..b + self.hidden
    }

    fn range_w_rec(&self, gate: Gate) -> std::ops::Range<usize> {
        let b = self.gate_base(gate) + self.hidden;
        b..b + self.hidden * self.hidden
    }

    fn range_bias(&self, gate: Gate) -> std::ops::Range<usize> {
        let b = self.gate_base(gate) + self.hidden + self.hidden * self.hidden;
        b..b + self.hidden
    }

    fn range_head_w(&self) -> std::ops::Range<usize> {
        let b = 4 * (self.hidden * self.hidden + 2 * self.hidden);
        b..b + 2 * self.hidden
    }

    fn range_head_b(&self) -> std::ops::Range<usize> {
        let b = self.range_head_w().end;
        b..b + 2
    }

    pub fn w_in(&self, gate: Gate) -> &[f64] {
        &self.weights[self.range_w_in(gate)]
    }

    pub fn w_in_mut(&mut self, gate: Gate) -> &mut [f64] {
        let r = self.range_w_in(gate);
        &mut self.weights[r]
    }

    /// Row-major `hidden x hidden`; row `k` feeds unit `k`.
    pub fn w_rec(&self, gate: Gate) -> &[f64] {
        &self.weights[self.range_w_rec(gate)]
    }

    pub fn w_rec_mut(&mut self, gate: Gate) -> &mut [f64] {
        let r = self.range_w_rec(gate);
        &mut self.weights[r]
    }

    pub fn bias(&self, gate: Gate) -> &[f64] {
        &self.weights[self.range_bias(gate)]
    }

    pub fn bias_mut(&mut self, gate: Gate) -> &mut [f64] {
        let r = self.range_bias(gate);
        &mut self.weights[r]
    }

    /// Row-major `2 x hidden`.
    pub fn head_w(&self) -> &[f64] {
        &self.weights[self.range_head_w()]
    }

    pub fn head_w_mut(&mut self) -> &mut [f64] {
        let r = self.range_head_w();
        &mut self.weights[r]
    }

    pub fn head_b(&self) -> &[f64] {
        &self.weights[self.range_head_b()]
    }

    pub fn head_b_mut(&mut self) -> &mut [f64] {
        let r = self.range_head_b();
        &mut self.weights[r]
    }

    pub fn global_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    /// Greedy Q-values without recording intermediate activations.
    pub fn q_values(&self, window: &[f64]) -> Result<[f64; 2]> {
        self.forward(window).map(|(q, _)| q)
    }

    pub fn forward(&self, window: &[f64]) -> Result<([f64; 2], ForwardCache)> {
        if let Some(bad) = window.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite network input {bad}")));
        }
        let h = self.hidden;
        let steps = window.len();
        let mut cache = ForwardCache {
            hidden: h,
            inputs: window.to_vec(),
            gates: vec![0.0; 4 * h * steps],
            cells: vec![0.0; h * (steps + 1)],
            outputs: vec![0.0; h * (steps + 1)],
        };
        let mut pre = [vec![0.0; h], vec![0.0; h], vec![0.0; h], vec![0.0; h]];
        for (t, &x) in window.iter().enumerate() {
            let h_prev = &cache.outputs[t * h..(t + 1) * h];
            for gate in GATES {
                let w_in = self.w_in(gate);
                let w_rec = self.w_rec(gate);
                let b = self.bias(gate);
                let out = &mut pre[gate as usize];
                for k in 0..h {
                    let row = &w_rec[k * h..(k + 1) * h];
                    let rec: f64 = row.iter().zip(h_prev).map(|(w, hp)| w * hp).sum();
                    out[k] = w_in[k] * x + rec + b[k];
                }
            }
            let base = 4 * h * t;
            for k in 0..h {
                let i = sigmoid(pre[0][k]);
                let f = sigmoid(pre[1][k]);
                let g = pre[2][k].tanh();
                let o = sigmoid(pre[3][k]);
                cache.gates[base + k] = i;
                cache.gates[base + h + k] = f;
                cache.gates[base + 2 * h + k] = g;
                cache.gates[base + 3 * h + k] = o;
                let c = f * cache.cells[t * h + k] + i * g;
                cache.cells[(t + 1) * h + k] = c;
                cache.outputs[(t + 1) * h + k] = o * c.tanh();
            }
        }
        let last = cache.final_hidden();
        let hw = self.head_w();
        let hb = self.head_b();
        let q = [
            hb[0] + hw[..h].iter().zip(last).map(|(w, v)| w * v).sum::<f64>(),
            hb[1] + hw[h..].iter().zip(last).map(|(w, v)| w * v).sum::<f64>(),
        ];
        Ok((q, cache))
    }

    /// Accumulate into `grads` the gradient of `dq . q(window)` given the
    /// cached forward pass.
    fn backward(&self, cache: &ForwardCache, dq: [f64; 2], grads: &mut QNetParams) {
        let h = self.hidden;
        let last = cache.final_hidden();
        {
            let gw = grads.head_w_mut();
            for k in 0..h {
                gw[k] += dq[0] * last[k];
                gw[h + k] += dq[1] * last[k];
            }
        }
        grads.head_b_mut()[0] += dq[0];
        grads.head_b_mut()[1] += dq[1];

        let hw = self.head_w();
        let mut dh: Vec<f64> = (0..h).map(|k| dq[0] * hw[k] + dq[1] * hw[h + k]).collect();
        let mut dc = vec![0.0; h];
        let mut da = [vec![0.0; h], vec![0.0; h], vec![0.0; h], vec![0.0; h]];

        for t in (0..cache.inputs.len()).rev() {
            let x = cache.inputs[t];
            let base = 4 * h * t;
            let c_prev = &cache.cells[t * h..(t + 1) * h];
            let c_cur = &cache.cells[(t + 1) * h..(t + 2) * h];
            for k in 0..h {
                let i = cache.gates[base + k];
                let f = cache.gates[base + h + k];
                let g = cache.gates[base + 2 * h + k];
                let o = cache.gates[base + 3 * h + k];
                let tc = c_cur[k].tanh();
                dc[k] += dh[k] * o * (1.0 - tc * tc);
                da[0][k] = dc[k] * g * i * (1.0 - i);
                da[1][k] = dc[k] * c_prev[k] * f * (1.0 - f);
                da[2][k] = dc[k] * i * (1.0 - g * g);
                da[3][k] = dh[k] * tc * o * (1.0 - o);
                dc[k] *= f;
            }
            let h_prev = &cache.outputs[t * h..(t + 1) * h];
            dh.fill(0.0);
            for gate in GATES {
                let d = &da[gate as usize];
                for (g, dk) in grads.w_in_mut(gate).iter_mut().zip(d) {
                    *g += dk * x;
                }
                for (g, dk) in grads.bias_mut(gate).iter_mut().zip(d) {
                    *g += dk;
                }
                let gr = grads.w_rec_mut(gate);
                for k in 0..h {
                    let row = &mut gr[k * h..(k + 1) * h];
                    for (g, hp) in row.iter_mut().zip(h_prev) {
                        *g += d[k] * hp;
                    }
                }
                let w_rec = self.w_rec(gate);
                for k in 0..h {
                    let row = &w_rec[k * h..(k + 1) * h];
                    for (dhj, w) in dh.iter_mut().zip(row) {
                        *dhj += w * d[k];
                    }
                }
            }
        }
    }
}

/// Activations recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    hidden: usize,
    inputs: Vec<f64>,
    /// Per step: input, forget, cell-candidate and output activations.
    gates: Vec<f64>,
    /// Cell states, including the zero initial state.
    cells: Vec<f64>,
    /// Hidden states, including the zero initial state.
    outputs: Vec<f64>,
}

impl ForwardCache {
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn final_hidden(&self) -> &[f64] {
        let t = self.inputs.len();
        &self.outputs[t * self.hidden..(t + 1) * self.hidden]
    }

    pub fn hidden_at(&self, t: usize) -> &[f64] {
        &self.outputs[(t + 1) * self.hidden..(t + 2) * self.hidden]
    }

    pub fn cell_at(&self, t: usize) -> &[f64] {
        &self.cells[(t + 1) * self.hidden..(t + 2) * self.hidden]
    }
}

/// One regression example: the chosen action's output is pulled toward
/// `target`.
#[derive(Debug, Clone, Copy)]
pub struct QSample<'a> {
    pub window: &'a [f64],
    pub action: usize,
    pub target: f64,
}

/// Mean squared error of the chosen action's Q-value against its target,
/// with the exact gradient.
pub fn loss_grad(params: &QNetParams, batch: &[QSample<'_>]) -> Result<(f64, QNetParams)> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty training batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = QNetParams::zeros(params.hidden);
    let mut loss = 0.0;
    for s in batch {
        if s.action > 1 {
            return Err(Error::Parameter(format!("action {} not in {{0, 1}}", s.action)));
        }
        let (q, cache) = params.forward(s.window)?;
        let err = q[s.action] - s.target;
        loss += err * err * scale;
        let mut dq = [0.0; 2];
        dq[s.action] = 2.0 * err * scale;
        params.backward(&cache, dq, &mut grads);
    }
    Ok((loss, grads))
}

/// Rescale `grads` in place so its global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut QNetParams, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.weights.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        OptimizerState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn for_params(params: &QNetParams) -> Self {
        Self::new(params.len())
    }
}

/// Adaptive-moment update with bias correction, in place.
pub fn adam_step(params: &mut QNetParams, grads: &QNetParams, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.first_moment.len() != params.len() {
        return Err(Error::Shape {
            expected: params.len(),
            actual: grads.len().min(state.first_moment.len()),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (((p, &g), m), v) in params
        .weights
        .iter_mut()
        .zip(&grads.weights)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// Deep copy of the evaluation network for use as the target network.
pub fn target_sync(eval: &QNetParams) -> QNetParams {
    eval.clone()
}

/// Serialized network plus optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub hidden_size: usize,
    pub window: usize,
    pub weights: Vec<f64>,
    pub optimizer: OptimizerState,
    pub train_step: u64,
}

impl Checkpoint {
    pub fn new(params: &QNetParams, window: usize, optimizer: &OptimizerState, train_step: u64) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            hidden_size: params.hidden,
            window,
            weights: params.weights.clone(),
            optimizer: optimizer.clone(),
            train_step,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Integrity(format!("unsupported checkpoint version {}", self.version)));
        }
        if self.window == 0 {
            return Err(Error::Integrity("checkpoint window size is zero".into()));
        }
        let expected = param_count(self.hidden_size);
        for len in [
            self.weights.len(),
            self.optimizer.first_moment.len(),
            self.optimizer.second_moment.len(),
        ] {
            if len != expected {
                return Err(Error::Shape { expected, actual: len });
            }
        }
        if !self.weights.iter().all(|w| w.is_finite()) {
            return Err(Error::Integrity("checkpoint contains non-finite weights".into()));
        }
        Ok(())
    }

    pub fn params(&self) -> Result<QNetParams> {
        self.validate()?;
        QNetParams::from_flat(self.hidden_size, self.weights.clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        ckpt.validate()?;
        Ok(ckpt)
    }
}
