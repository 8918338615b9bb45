//! DQN agent: rewards, replay memory, exploration schedule and the
//! per-pass training loop.

use std::collections::VecDeque;

use log::warn;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{self, OptimizerState, QNetParams, QSample};
use crate::timeseries::WindowState;

/// Reward for predicting `action` on a window whose true label is `label`:
/// `+r1` true positive, `+r2` true negative, `-r1` false negative,
/// `-r2` false positive.
pub fn reward(action: u8, label: u8, r1: f64, r2: f64) -> f64 {
    match (action, label) {
        (1, 1) => r1,
        (0, 0) => r2,
        (0, _) => -r1,
        _ => -r2,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: WindowState,
    pub action: u8,
    pub reward: f64,
    /// `None` marks a terminal transition.
    pub next_state: Option<WindowState>,
}

/// Fixed-capacity FIFO of transitions.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    buffer: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        ReplayMemory {
            buffer: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.buffer.len() == self.capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.buffer.iter()
    }

    /// Uniform draw of `batch` positions: without replacement when the
    /// memory holds at least `batch` transitions, with replacement otherwise.
    pub fn sample_indices(&self, batch: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if self.buffer.is_empty() {
            return Err(Error::State("cannot sample from an empty replay memory".into()));
        }
        let n = self.buffer.len();
        Ok(if n >= batch {
            sample(rng, n, batch).into_vec()
        } else {
            (0..batch).map(|_| rng.random_range(0..n)).collect()
        })
    }

    pub fn sample(&self, batch: usize, rng: &mut impl Rng) -> Result<Vec<&Transition>> {
        Ok(self
            .sample_indices(batch, rng)?
            .into_iter()
            .map(|i| &self.buffer[i])
            .collect())
    }
}

/// Linear decay `max(min, start - step * decay)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub decay: f64,
    pub min: f64,
    pub step: u64,
}

impl EpsilonSchedule {
    pub fn new(decay: f64, min: f64) -> Self {
        EpsilonSchedule {
            start: 1.0,
            decay,
            min,
            step: 0,
        }
    }

    pub fn value(&self) -> f64 {
        (self.start - self.step as f64 * self.decay).max(self.min)
    }

    pub fn advance(&mut self) {
        self.step += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub gamma: f64,
    pub r1: f64,
    pub r2: f64,
    pub batch_size: usize,
    /// Gradient steps between target-network syncs.
    pub sync_every: u64,
    pub lr: f64,
    pub grad_clip: Option<f64>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            gamma: 0.8,
            r1: 5.0,
            r2: 1.0,
            batch_size: 32,
            sync_every: 100,
            lr: 1e-3,
            grad_clip: None,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Parameter(format!("gamma {} not in [0, 1]", self.gamma)));
        }
        if !(self.r1 > 0.0 && self.r2 > 0.0) {
            return Err(Error::Parameter("reward constants must be positive".into()));
        }
        if self.batch_size == 0 || self.sync_every == 0 {
            return Err(Error::Parameter("batch size and sync interval must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!("learning rate {} invalid", self.lr)));
        }
        Ok(())
    }
}

/// Greedy action; ties go to 0 (normal).
pub fn greedy_action(q: [f64; 2]) -> u8 {
    u8::from(q[1] > q[0])
}

/// Epsilon-greedy action selection.
pub fn select_action(params: &QNetParams, state: &WindowState, epsilon: f64, rng: &mut impl Rng) -> Result<u8> {
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Ok(rng.random_range(0..2u8));
    }
    Ok(greedy_action(params.q_values(&state.values)?))
}

/// Bootstrapped regression target `r + gamma * max_a Q_target(s', a)`, or
/// just `r` for terminal transitions.
pub fn compute_target(cfg: &AgentConfig, target: &QNetParams, t: &Transition) -> Result<f64> {
    match &t.next_state {
        None => Ok(t.reward),
        Some(next) => {
            let q = target.q_values(&next.values)?;
            Ok(t.reward + cfg.gamma * q[0].max(q[1]))
        }
    }
}

fn binary_label(w: &WindowState) -> Result<u8> {
    match w.label {
        0 => Ok(0),
        1 => Ok(1),
        other => Err(Error::Precondition(format!(
            "training window ending at {} has no binary label ({other})",
            w.end_index
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub steps: u64,
    pub mean_loss: f64,
    pub syncs: u64,
}

/// Evaluation and target networks with their training state.
#[derive(Debug, Clone)]
pub struct DqnAgent {
    pub eval: QNetParams,
    pub target: QNetParams,
    pub optimizer: OptimizerState,
    pub memory: ReplayMemory,
    pub schedule: EpsilonSchedule,
    pub config: AgentConfig,
    rng: ChaCha8Rng,
    steps: u64,
    syncs: u64,
}

impl DqnAgent {
    pub fn new(
        eval: QNetParams,
        config: AgentConfig,
        memory_capacity: usize,
        schedule: EpsilonSchedule,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        Ok(DqnAgent {
            target: neural::target_sync(&eval),
            optimizer: OptimizerState::for_params(&eval),
            eval,
            memory: ReplayMemory::new(memory_capacity),
            schedule,
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            steps: 0,
            syncs: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn syncs(&self) -> u64 {
        self.syncs
    }

    /// Fill memory with terminal transitions whose action is the true label,
    /// so every seeded reward is positive.
    pub fn seed_memory<'a>(&mut self, windows: impl IntoIterator<Item = &'a WindowState>) -> Result<()> {
        for w in windows {
            let label = binary_label(w)?;
            self.memory.push(Transition {
                state: w.clone(),
                action: label,
                reward: reward(label, label, self.config.r1, self.config.r2),
                next_state: None,
            });
        }
        Ok(())
    }

    /// One gradient step on a replay mini-batch. Returns the batch loss.
    pub fn learn(&mut self) -> Result<f64> {
        let batch = self.memory.sample(self.config.batch_size, &mut self.rng)?;
        let targets = batch
            .iter()
            .map(|t| compute_target(&self.config, &self.target, t))
            .collect::<Result<Vec<f64>>>()?;
        let samples: Vec<QSample<'_>> = batch
            .iter()
            .zip(&targets)
            .map(|(t, &target)| QSample {
                window: &t.state.values,
                action: t.action as usize,
                target,
            })
            .collect();
        let (loss, mut grads) = neural::loss_grad(&self.eval, &samples)?;
        if let Some(max_norm) = self.config.grad_clip {
            neural::clip_grad_norm(&mut grads, max_norm);
        }
        neural::adam_step(&mut self.eval, &grads, &mut self.optimizer, self.config.lr)?;
        self.steps += 1;
        if self.steps % self.config.sync_every == 0 {
            self.target = neural::target_sync(&self.eval);
            self.syncs += 1;
        }
        Ok(loss)
    }

    /// One pass over `stream`: act on each window, store the transition
    /// (next state = following window, terminal at the end), and take one
    /// gradient step per window.
    pub fn train_epoch(&mut self, stream: &[&WindowState]) -> Result<EpochMetrics> {
        if stream.is_empty() {
            warn!("empty training stream; skipping epoch");
            return Ok(EpochMetrics::default());
        }
        let syncs_before = self.syncs;
        let mut total_loss = 0.0;
        for (j, state) in stream.iter().enumerate() {
            let label = binary_label(state)?;
            let epsilon = self.schedule.value();
            let action = select_action(&self.eval, state, epsilon, &mut self.rng)?;
            self.memory.push(Transition {
                state: (*state).clone(),
                action,
                reward: reward(action, label, self.config.r1, self.config.r2),
                next_state: stream.get(j + 1).map(|w| (*w).clone()),
            });
            total_loss += self.learn()?;
            self.schedule.advance();
        }
        if !self.eval.is_finite() {
            return Err(Error::Numeric("network parameters became non-finite".into()));
        }
        Ok(EpochMetrics {
            steps: stream.len() as u64,
            mean_loss: total_loss / stream.len() as f64,
            syncs: self.syncs - syncs_before,
        })
    }

    pub fn predict(&self, window: &[f64]) -> Result<u8> {
        Ok(greedy_action(self.eval.q_values(window)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeseries::LabelSource;

    fn window(values: Vec<f64>, end_index: usize, label: i8) -> WindowState {
        WindowState {
            values,
            end_index,
            label,
            label_source: LabelSource::Human,
        }
    }

    fn tagged(tag: usize) -> Transition {
        Transition {
            state: window(vec![0.0], tag, 0),
            action: 0,
            reward: 1.0,
            next_state: None,
        }
    }

    #[test]
    fn reward_truth_table() {
        assert_eq!(reward(1, 1, 5.0, 1.0), 5.0);
        assert_eq!(reward(0, 0, 5.0, 1.0), 1.0);
        assert_eq!(reward(0, 1, 5.0, 1.0), -5.0);
        assert_eq!(reward(1, 0, 5.0, 1.0), -1.0);
    }

    #[test]
    fn replay_fifo_eviction() {
        let mut m = ReplayMemory::new(1000);
        m.push(tagged(0));
        assert_eq!(m.len(), 1);
        for i in 1..1001 {
            m.push(tagged(i));
        }
        assert_eq!(m.len(), 1000);
        assert_eq!(m.iter().next().unwrap().state.end_index, 1);

        let mut m = ReplayMemory::new(10);
        for i in 0..7 {
            m.push(tagged(i));
        }
        let tags: Vec<usize> = m.iter().map(|t| t.state.end_index).collect();
        assert_eq!(tags, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn replay_sampling_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = ReplayMemory::new(1000);
        assert!(matches!(m.sample(4, &mut rng), Err(Error::State(_))));
        for i in 0..1000 {
            m.push(tagged(i));
        }
        let mut idx = m.sample_indices(32, &mut rng).unwrap();
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 32);

        let mut small = ReplayMemory::new(10);
        for i in 0..3 {
            small.push(tagged(i));
        }
        let drawn = small.sample(32, &mut rng).unwrap();
        assert_eq!(drawn.len(), 32);
        assert!(drawn.iter().all(|t| t.state.end_index < 3));
    }

    #[test]
    fn epsilon_schedule_decays_to_floor() {
        let mut s = EpsilonSchedule::new(0.1, 0.05);
        assert_eq!(s.value(), 1.0);
        let mut last = s.value();
        for _ in 0..30 {
            s.advance();
            assert!(s.value() <= last && s.value() >= 0.05);
            last = s.value();
        }
        assert_eq!(s.value(), 0.05);
    }

    #[test]
    fn greedy_selection_and_ties() {
        let mut p = QNetParams::zeros(2);
        let w = window(vec![0.5; 3], 2, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        p.head_b_mut().copy_from_slice(&[0.2, 0.9]);
        assert_eq!(select_action(&p, &w, 0.0, &mut rng).unwrap(), 1);
        p.head_b_mut().copy_from_slice(&[0.4, 0.4]);
        assert_eq!(select_action(&p, &w, 0.0, &mut rng).unwrap(), 0);
    }

    #[test]
    fn full_exploration_is_balanced() {
        let p = QNetParams::zeros(1);
        let w = window(vec![0.5], 0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let ones: usize = (0..10_000)
            .map(|_| select_action(&p, &w, 1.0, &mut rng).unwrap() as usize)
            .sum();
        let freq = ones as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&freq), "{freq}");
    }

    #[test]
    fn target_examples() {
        let cfg = AgentConfig::default();
        let p = QNetParams::zeros(1);
        let mut t = tagged(0);
        t.reward = 5.0;
        assert_eq!(compute_target(&cfg, &p, &t).unwrap(), 5.0);

        let mut q = QNetParams::zeros(1);
        q.head_b_mut().copy_from_slice(&[0.5, 2.0]);
        let t = Transition {
            state: window(vec![0.1], 0, 0),
            action: 0,
            reward: 1.0,
            next_state: Some(window(vec![0.2], 1, 0)),
        };
        assert!((compute_target(&cfg, &q, &t).unwrap() - 2.6).abs() < 1e-12);
        let myopic = AgentConfig { gamma: 0.0, ..cfg };
        assert_eq!(compute_target(&myopic, &q, &t).unwrap(), 1.0);
    }

    fn agent(sync_every: u64) -> DqnAgent {
        let cfg = AgentConfig {
            sync_every,
            batch_size: 4,
            ..AgentConfig::default()
        };
        DqnAgent::new(QNetParams::init(3, 1).unwrap(), cfg, 1000, EpsilonSchedule::new(1e-3, 0.01), 5).unwrap()
    }

    #[test]
    fn single_window_stream() {
        let mut a = agent(100);
        let w = window(vec![0.1, 0.2, 0.3], 2, 1);
        let m = a.train_epoch(&[&w]).unwrap();
        assert_eq!(m.steps, 1);
        assert_eq!(a.steps(), 1);
        assert_eq!(a.memory.len(), 1);
        assert!(a.memory.iter().next().unwrap().next_state.is_none());
    }

    #[test]
    fn empty_stream_is_noop() {
        let mut a = agent(100);
        assert_eq!(a.train_epoch(&[]).unwrap(), EpochMetrics::default());
        assert_eq!(a.steps(), 0);
    }

    #[test]
    fn sync_count_follows_interval() {
        let mut a = agent(100);
        let ws: Vec<WindowState> = (0..250).map(|i| window(vec![(i % 7) as f64 / 7.0; 3], i, 0)).collect();
        let refs: Vec<&WindowState> = ws.iter().collect();
        let m = a.train_epoch(&refs).unwrap();
        assert_eq!(m.syncs, 2);
        assert_eq!(a.schedule.step, 250);
        // stream neighbours become next states
        let first = a.memory.iter().next().unwrap();
        assert_eq!(first.next_state.as_ref().unwrap().end_index, 1);
    }

    #[test]
    fn unlabeled_window_in_stream_is_rejected() {
        let mut a = agent(100);
        let w = window(vec![0.1, 0.2, 0.3], 2, -1);
        assert!(matches!(a.train_epoch(&[&w]), Err(Error::Precondition(_))));
    }

    #[test]
    fn seeded_memory_has_positive_terminal_rewards() {
        let mut a = agent(100);
        let ws = [window(vec![0.1; 3], 2, 1), window(vec![0.2; 3], 3, 0)];
        a.seed_memory(ws.iter()).unwrap();
        let r: Vec<(u8, f64)> = a.memory.iter().map(|t| (t.action, t.reward)).collect();
        assert_eq!(r, vec![(1, 5.0), (0, 1.0)]);
        assert!(a.memory.iter().all(|t| t.next_state.is_none()));
    }

    #[test]
    fn target_network_is_stale_between_syncs() {
        let mut a = agent(1000);
        let t = Transition {
            state: window(vec![0.1; 3], 0, 0),
            action: 0,
            reward: 1.0,
            next_state: Some(window(vec![0.7, 0.2, 0.9], 1, 0)),
        };
        let before = compute_target(&a.config, &a.target, &t).unwrap();
        let ws: Vec<WindowState> = (0..50).map(|i| window(vec![i as f64 / 50.0; 3], i, (i % 2) as i8)).collect();
        let refs: Vec<&WindowState> = ws.iter().collect();
        a.train_epoch(&refs).unwrap();
        assert_eq!(compute_target(&a.config, &a.target, &t).unwrap(), before);
        assert_ne!(a.eval, a.target);
    }
}
