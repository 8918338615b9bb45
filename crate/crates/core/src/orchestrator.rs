//! End-to-end training runs: preprocessing, warm-up, label propagation,
//! DQN episodes and active-learning queries.

use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::active::{self, LabelBudget, LabelStore, Oracle, QueryBatch, QueryStrategy};
use crate::agent::{self, AgentConfig, DqnAgent, EpsilonSchedule};
use crate::error::{Error, Result};
use crate::eval::{self, Metrics};
use crate::iforest::{self, IsolationForest};
use crate::labelprop::{self, LabelPropConfig};
use crate::neural::{Checkpoint, QNetParams};
use crate::timeseries::{self, LabelSource, ScalerParams, TimeSeries, WindowState, UNKNOWN};

pub const CONFIG_FILE: &str = "config.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const MODEL_FILE: &str = "model.json";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RladConfig {
    pub window: usize,
    pub replay_capacity: usize,
    pub epsilon_decay: f64,
    pub epsilon_min: f64,
    pub r1: f64,
    pub r2: f64,
    pub gamma: f64,
    /// Seeds taken from each end and the middle of the isolation scores.
    pub warmup: usize,
    /// Active-learning queries per episode.
    pub queries_per_episode: usize,
    pub episodes: usize,
    pub split: f64,
    pub hidden_size: usize,
    pub batch_size: usize,
    pub sync_every: u64,
    pub lr: f64,
    pub grad_clip: Option<f64>,
    pub label_prop: LabelPropConfig,
    pub iforest_trees: usize,
    pub iforest_subsample: usize,
    pub budget_cap: Option<usize>,
    pub query_strategy: QueryStrategy,
    pub seed: u64,
}

impl Default for RladConfig {
    fn default() -> Self {
        RladConfig {
            window: 25,
            replay_capacity: 1000,
            epsilon_decay: 1.0 / 500_000.0,
            epsilon_min: 0.01,
            r1: 5.0,
            r2: 1.0,
            gamma: 0.8,
            warmup: 5,
            queries_per_episode: 5,
            episodes: 1000,
            split: 0.8,
            hidden_size: 64,
            batch_size: 32,
            sync_every: 100,
            lr: 1e-3,
            grad_clip: None,
            label_prop: LabelPropConfig::default(),
            iforest_trees: iforest::DEFAULT_TREES,
            iforest_subsample: iforest::DEFAULT_SUBSAMPLE,
            budget_cap: None,
            query_strategy: QueryStrategy::Margin,
            seed: 0,
        }
    }
}

impl RladConfig {
    /// Discount used for the KPI benchmark.
    pub const KPI_GAMMA: f64 = 0.98;

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.window == 0 {
            return bad("window must be positive".into());
        }
        if self.replay_capacity == 0 {
            return bad("replay capacity must be positive".into());
        }
        if !(self.epsilon_decay >= 0.0) || !(0.0..=1.0).contains(&self.epsilon_min) {
            return bad("epsilon schedule out of range".into());
        }
        if !(1..=10).contains(&self.queries_per_episode) {
            return bad(format!("queries per episode {} not in [1, 10]", self.queries_per_episode));
        }
        if self.warmup == 0 {
            return bad("warm-up count must be positive".into());
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return bad(format!("split {} not in (0, 1)", self.split));
        }
        if self.hidden_size == 0 {
            return bad("hidden size must be positive".into());
        }
        if self.iforest_trees == 0 || self.iforest_subsample < 2 {
            return bad("isolation forest needs >= 1 tree and subsample >= 2".into());
        }
        let lp = &self.label_prop;
        if lp.sigma.is_some_and(|s| !(s > 0.0)) || !(lp.tol > 0.0) || lp.max_iter == 0 || !(lp.entropy_threshold >= 0.0) {
            return bad("label propagation settings out of range".into());
        }
        self.agent_config().validate()
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            gamma: self.gamma,
            r1: self.r1,
            r2: self.r2,
            batch_size: self.batch_size,
            sync_every: self.sync_every,
            lr: self.lr,
            grad_clip: self.grad_clip,
        }
    }

    /// Short hex digest of the serialized configuration.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub epsilon: f64,
    pub human_labels_used: usize,
    pub pseudo_labels_assigned: usize,
    pub loss_mean: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub train_steps: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpisodeRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "episode,epsilon,human_labels_used,pseudo_labels_assigned,loss_mean,precision,recall,f1,train_steps\n",
        );
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.episode,
                r.epsilon,
                r.human_labels_used,
                r.pseudo_labels_assigned,
                r.loss_mean,
                r.precision,
                r.recall,
                r.f1,
                r.train_steps
            );
        }
        out
    }

    pub fn last(&self) -> Option<&EpisodeRecord> {
        self.records.last()
    }
}

/// Greedy policy plus everything needed to preprocess new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RladModel {
    pub params: QNetParams,
    pub scaler: ScalerParams,
    pub window: usize,
    pub fingerprint: String,
}

impl RladModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: RladModel = serde_json::from_str(&text)?;
        if model.window == 0 || !model.params.is_finite() {
            return Err(Error::Integrity(format!("{} holds an invalid model", path.display())));
        }
        let expected = crate::neural::param_count(model.params.hidden_size());
        if model.params.len() != expected {
            return Err(Error::Shape {
                expected,
                actual: model.params.len(),
            });
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunPhase {
    Warmup,
    Training,
    Done,
}

/// Progress hooks. All methods default to no-ops.
pub trait TrainObserver {
    fn on_phase(&mut self, _phase: RunPhase) {}

    /// Called after every episode with the label state it ended on.
    fn on_episode(&mut self, _record: &EpisodeRecord, _store: &LabelStore, _budget: &LabelBudget) {}

    /// Called when a run aborts after training state exists.
    fn on_abort(&mut self, _checkpoint: &Checkpoint, _history: &TrainHistory, _error: &Error) {}
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: RladModel,
    pub history: TrainHistory,
    pub checkpoint: Checkpoint,
    /// Held-out metrics of the returned model; `None` if the test split has
    /// no labeled windows.
    pub metrics: Option<Metrics>,
    pub budget: LabelBudget,
}

impl TrainRun {
    /// Write `config.json`, `history.csv`, `checkpoint.json`, `model.json`
    /// and `metrics.json` into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>, config: &RladConfig) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, body: String| {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        write(CONFIG_FILE, serde_json::to_string_pretty(config)?)?;
        write(HISTORY_FILE, self.history.to_csv())?;
        self.checkpoint.save(dir.join(CHECKPOINT_FILE))?;
        self.model.save(dir.join(MODEL_FILE))?;
        if let Some(m) = &self.metrics {
            write(METRICS_FILE, serde_json::to_string_pretty(m)?)?;
        }
        Ok(())
    }
}

/// Windows of the held-out split with their true labels.
struct TestSet {
    windows: Vec<WindowState>,
    labeled: Vec<usize>,
}

impl TestSet {
    fn evaluate(&self, params: &QNetParams) -> Result<Option<Metrics>> {
        if self.labeled.is_empty() {
            return Ok(None);
        }
        let preds: Vec<u8> = self
            .labeled
            .par_iter()
            .map(|&i| params.q_values(&self.windows[i].values).map(agent::greedy_action))
            .collect::<Result<_>>()?;
        let truth: Vec<u8> = self.labeled.iter().map(|&i| self.windows[i].label as u8).collect();
        eval::evaluate(&preds, &truth).map(Some)
    }
}

struct Pipeline<'a> {
    config: &'a RladConfig,
    train_raw: TimeSeries,
    windows: Vec<WindowState>,
    store: LabelStore,
    budget: LabelBudget,
    answered: usize,
    warmup_labels: usize,
    batches: usize,
}

impl Pipeline<'_> {
    fn apply_answers(&mut self, answers: &[(usize, u8)]) -> Result<()> {
        for &(i, label) in answers {
            self.store.set_human(i, label)?;
        }
        Ok(())
    }

    fn ask(&mut self, oracle: &mut dyn Oracle, ranked: &[(usize, f64)], limit: usize, episode: usize) -> Result<usize> {
        self.batches += 1;
        let batch = QueryBatch::from_ranked(
            format!("{}-{episode}-{}", self.config.fingerprint(), self.batches),
            ranked,
            &self.windows,
            &self.train_raw,
            limit,
            episode,
        );
        let answers = active::query_oracle(oracle, batch, &mut self.budget)?;
        self.apply_answers(&answers)?;
        Ok(answers.len())
    }

    /// Refit propagation on the human labels and merge pseudo-labels into
    /// the store. Skipped until both classes have a human label.
    fn propagate(&mut self) -> Result<()> {
        let human = self.store.indices(LabelSource::Human);
        let classes: Vec<i8> = human.iter().map(|&i| self.store.label(i)).collect();
        if !(classes.contains(&0) && classes.contains(&1)) {
            info!("label propagation deferred: human labels cover only one class");
            return Ok(());
        }
        let lp = &self.config.label_prop;
        let others: Vec<usize> = (0..self.windows.len())
            .filter(|&i| self.store.source(i) != LabelSource::Human)
            .collect();
        let labeled_pts: Vec<&[f64]> = human.iter().map(|&i| self.windows[i].values.as_slice()).collect();
        let other_pts: Vec<&[f64]> = others.iter().map(|&i| self.windows[i].values.as_slice()).collect();
        let pool: Vec<usize> = labelprop::candidate_pool(&labeled_pts, &other_pts, lp.pool_cap)
            .into_iter()
            .map(|k| others[k])
            .collect();
        let pool_pts: Vec<&[f64]> = pool.iter().map(|&i| self.windows[i].values.as_slice()).collect();
        let labeled: Vec<(&[f64], u8)> = human
            .iter()
            .zip(&labeled_pts)
            .map(|(&i, p)| (*p, self.store.label(i) as u8))
            .collect();
        let sigma = lp.sigma.unwrap_or_else(|| labelprop::median_sigma(&labeled_pts, &pool_pts));
        let y = labelprop::lp_fit(&labeled, &pool_pts, sigma, lp.tol, lp.max_iter)?;
        if !y.converged {
            warn!("label propagation stopped at {} iterations without converging", y.iterations);
        }
        let emitted = labelprop::lp_pseudo_labels(&y, lp.entropy_threshold);
        debug!(
            "label propagation: {} human ({} anomalous), pool {}, sigma {sigma:.4}, {} iterations, {} emitted ({} anomalous)",
            human.len(),
            classes.iter().filter(|&&c| c == 1).count(),
            pool.len(),
            y.iterations,
            emitted.len(),
            emitted.iter().filter(|e| e.1 == 1).count()
        );
        for (k, label) in emitted {
            self.store.set_pseudo(pool[k], label);
        }
        self.budget.pseudo_labels_assigned = self.store.count(LabelSource::Pseudo);
        Ok(())
    }

    fn check_budget(&self) -> Result<()> {
        let human = self.store.count(LabelSource::Human);
        let used = self.budget.human_labels_used;
        if used != human || used != self.warmup_labels + self.answered {
            return Err(Error::Integrity(format!(
                "label accounting mismatch: budget {used}, store {human}, warm-up {} + answered {}",
                self.warmup_labels, self.answered
            )));
        }
        Ok(())
    }

    fn training_stream(&self) -> Vec<WindowState> {
        let mut windows = self.windows.clone();
        self.store.apply(&mut windows);
        windows.retain(WindowState::is_labeled);
        windows
    }
}

pub fn rlad_train(series: &TimeSeries, config: &RladConfig, oracle: &mut dyn Oracle) -> Result<TrainRun> {
    rlad_train_observed(series, config, oracle, &mut NoopObserver)
}

/// Run the full pipeline. Labels in `series` are used only for held-out
/// evaluation of the test split; training labels come from `oracle`.
pub fn rlad_train_observed(
    series: &TimeSeries,
    config: &RladConfig,
    oracle: &mut dyn Oracle,
    observer: &mut dyn TrainObserver,
) -> Result<TrainRun> {
    config.validate()?;
    observer.on_phase(RunPhase::Warmup);

    // preprocessing
    let (train_raw, test_raw) = timeseries::split_train_test(series, config.split)?;
    let scaler = ScalerParams::fit(train_raw.values())?;
    let train_raw = train_raw.without_labels();
    let windows = timeseries::segment(&scaler.transform(&train_raw, false), config.window)?;
    let test_windows = timeseries::segment(&scaler.transform(&test_raw, true), config.window)?;
    let test = TestSet {
        labeled: (0..test_windows.len()).filter(|&i| test_windows[i].label != UNKNOWN).collect(),
        windows: test_windows,
    };

    let mut pipe = Pipeline {
        config,
        train_raw,
        store: LabelStore::new(windows.len()),
        windows,
        budget: LabelBudget::with_cap(config.budget_cap),
        answered: 0,
        warmup_labels: 0,
        batches: 0,
    };

    // warm-up
    let points: Vec<&[f64]> = pipe.windows.iter().map(|w| w.values.as_slice()).collect();
    let forest = IsolationForest::fit(&points, config.iforest_trees, config.iforest_subsample, config.seed.wrapping_add(2))?;
    let scores = forest.score_all(&points)?;
    let seeds = iforest::warmup_select(&scores, config.warmup)?;
    let seed_ranked: Vec<(usize, f64)> = seeds.all().into_iter().map(|i| (i, 0.0)).collect();
    pipe.warmup_labels = pipe.ask(oracle, &seed_ranked, seed_ranked.len(), 0)?;
    info!("warm-up labeled {} windows", pipe.warmup_labels);

    let mut agent = DqnAgent::new(
        QNetParams::init(config.hidden_size, config.seed)?,
        config.agent_config(),
        config.replay_capacity,
        EpsilonSchedule::new(config.epsilon_decay, config.epsilon_min),
        config.seed.wrapping_add(1),
    )?;
    let mut seeded = pipe.windows.clone();
    pipe.store.apply(&mut seeded);
    agent.seed_memory(seeds.all().iter().map(|&i| &seeded[i]))?;
    pipe.propagate()?;
    pipe.check_budget()?;

    observer.on_phase(RunPhase::Training);
    let mut history = TrainHistory::default();
    let mut strategy_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(3));

    for episode in 1..=config.episodes {
        let result = (|| -> Result<EpisodeRecord> {
            let stream = pipe.training_stream();
            let refs: Vec<&WindowState> = stream.iter().collect();
            let epoch = agent.train_epoch(&refs)?;

            if pipe.budget.exhausted() {
                info!("label budget exhausted; no query in episode {episode}");
            } else {
                let pool_idx = pipe.store.indices(LabelSource::None);
                if !pool_idx.is_empty() {
                    let pool: Vec<&WindowState> = pool_idx.iter().map(|&i| &pipe.windows[i]).collect();
                    let ranked: Vec<(usize, f64)> = match config.query_strategy {
                        QueryStrategy::Margin => active::margin_rank(&agent.eval, &pool)?,
                        other => {
                            let order = active::alt_strategy_rank(&agent.eval, &pool, other, &mut strategy_rng)?;
                            let q = order
                                .iter()
                                .map(|&k| agent.eval.q_values(&pool[k].values).map(|q| (k, (q[0] - q[1]).abs())))
                                .collect::<Result<Vec<_>>>()?;
                            q
                        }
                    };
                    let ranked: Vec<(usize, f64)> = ranked.into_iter().map(|(k, m)| (pool_idx[k], m)).collect();
                    pipe.answered += pipe.ask(oracle, &ranked, config.queries_per_episode, episode)?;
                    pipe.propagate()?;
                }
            }
            pipe.check_budget()?;

            let metrics = test.evaluate(&agent.eval)?;
            Ok(EpisodeRecord {
                episode,
                epsilon: agent.schedule.value(),
                human_labels_used: pipe.budget.human_labels_used,
                pseudo_labels_assigned: pipe.budget.pseudo_labels_assigned,
                loss_mean: epoch.mean_loss,
                precision: metrics.map_or(0.0, |m| m.precision),
                recall: metrics.map_or(0.0, |m| m.recall),
                f1: metrics.map_or(0.0, |m| m.f1),
                train_steps: agent.steps(),
            })
        })();
        match result {
            Ok(record) => {
                info!(
                    "episode {episode}: labels {} human / {} pseudo, loss {:.4}, f1 {:.3}",
                    record.human_labels_used, record.pseudo_labels_assigned, record.loss_mean, record.f1
                );
                observer.on_episode(&record, &pipe.store, &pipe.budget);
                history.records.push(record);
            }
            Err(e) => {
                let ckpt = Checkpoint::new(&agent.eval, config.window, &agent.optimizer, agent.steps());
                observer.on_abort(&ckpt, &history, &e);
                return Err(e);
            }
        }
    }

    let metrics = test.evaluate(&agent.eval)?;
    observer.on_phase(RunPhase::Done);
    Ok(TrainRun {
        checkpoint: Checkpoint::new(&agent.eval, config.window, &agent.optimizer, agent.steps()),
        model: RladModel {
            params: agent.eval,
            scaler,
            window: config.window,
            fingerprint: config.fingerprint(),
        },
        history,
        metrics,
        budget: pipe.budget,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub end_index: usize,
    pub prediction: u8,
}

/// Greedy per-window predictions on a new series, scaled with the model's
/// stored parameters and clamped to [0, 1].
pub fn rlad_predict(model: &RladModel, series: &TimeSeries) -> Result<Vec<Prediction>> {
    let scaled = model.scaler.transform(series, true);
    let windows = timeseries::segment(&scaled, model.window)?;
    windows
        .par_iter()
        .map(|w| {
            Ok(Prediction {
                end_index: w.end_index,
                prediction: agent::greedy_action(model.params.q_values(&w.values)?),
            })
        })
        .collect()
}
