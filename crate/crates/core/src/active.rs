//! Query selection, oracles and label bookkeeping.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::QNetParams;
use crate::timeseries::{LabelSource, TimeSeries, WindowState, UNKNOWN};

/// Raw values shown around a queried point.
pub const CONTEXT_BEFORE: usize = 150;
pub const CONTEXT_AFTER: usize = 50;

/// `(position, |q0 - q1|)` sorted by ascending margin, ties by position.
pub fn margin_rank(params: &QNetParams, unlabeled: &[&WindowState]) -> Result<Vec<(usize, f64)>> {
    let q: Vec<[f64; 2]> = unlabeled
        .par_iter()
        .map(|w| params.q_values(&w.values))
        .collect::<Result<_>>()?;
    Ok(rank_by_margin(&q))
}

/// Margin ranking over precomputed Q-value pairs.
pub fn rank_by_margin(q: &[[f64; 2]]) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = q.iter().map(|q| (q[0] - q[1]).abs()).enumerate().collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    ranked
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStrategy {
    Random,
    LeastConfidence,
    Margin,
    Entropy,
}

impl FromStr for QueryStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(QueryStrategy::Random),
            "least_confidence" => Ok(QueryStrategy::LeastConfidence),
            "margin" => Ok(QueryStrategy::Margin),
            "entropy" => Ok(QueryStrategy::Entropy),
            other => Err(Error::Parameter(format!("unknown query strategy '{other}'"))),
        }
    }
}

impl fmt::Display for QueryStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            QueryStrategy::Random => "random",
            QueryStrategy::LeastConfidence => "least_confidence",
            QueryStrategy::Margin => "margin",
            QueryStrategy::Entropy => "entropy",
        };
        f.write_str(s)
    }
}

/// Two-way softmax over Q-values.
pub fn softmax2(q: [f64; 2]) -> [f64; 2] {
    let m = q[0].max(q[1]);
    let e0 = (q[0] - m).exp();
    let e1 = (q[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// Rank positions most-informative first under `strategy`.
pub fn alt_strategy_rank(
    params: &QNetParams,
    unlabeled: &[&WindowState],
    strategy: QueryStrategy,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let by_score_desc = |score: &(dyn Fn([f64; 2]) -> f64 + Sync)| -> Result<Vec<usize>> {
        let scores: Vec<f64> = unlabeled
            .par_iter()
            .map(|w| params.q_values(&w.values).map(|q| score(softmax2(q))))
            .collect::<Result<_>>()?;
        let mut order: Vec<usize> = (0..unlabeled.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        Ok(order)
    };
    match strategy {
        QueryStrategy::Margin => Ok(margin_rank(params, unlabeled)?.into_iter().map(|(i, _)| i).collect()),
        QueryStrategy::Random => {
            let mut order: Vec<usize> = (0..unlabeled.len()).collect();
            order.shuffle(rng);
            Ok(order)
        }
        QueryStrategy::LeastConfidence => by_score_desc(&|p| 1.0 - p[0].max(p[1])),
        QueryStrategy::Entropy => by_score_desc(&|p| crate::labelprop::lp_entropy(p)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryContext {
    /// Raw index of `values[0]`.
    pub start: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryItem {
    /// Position of the window among the training windows.
    pub index: usize,
    /// Raw index of the window's last point.
    pub end_index: usize,
    pub margin: f64,
    pub window: Vec<f64>,
    pub context: QueryContext,
    pub episode: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryBatch {
    pub batch_id: String,
    pub created_at: u64,
    pub items: Vec<QueryItem>,
}

impl QueryBatch {
    /// Build a batch from ranked `(window index, margin)` pairs, taking at
    /// most `limit` of them in order. `raw` supplies display context.
    pub fn from_ranked(
        batch_id: impl Into<String>,
        ranked: &[(usize, f64)],
        windows: &[WindowState],
        raw: &TimeSeries,
        limit: usize,
        episode: usize,
    ) -> Self {
        let items = ranked
            .iter()
            .take(limit)
            .map(|&(index, margin)| {
                let w = &windows[index];
                let start = w.end_index.saturating_sub(CONTEXT_BEFORE - 1);
                let end = (w.end_index + CONTEXT_AFTER + 1).min(raw.len());
                QueryItem {
                    index,
                    end_index: w.end_index,
                    margin,
                    window: w.values.clone(),
                    context: QueryContext {
                        start,
                        values: raw.values()[start..end].to_vec(),
                    },
                    episode,
                }
            })
            .collect();
        QueryBatch {
            batch_id: batch_id.into(),
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            items,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    Scripted,
    Human,
}

/// Source of ground-truth labels for queried windows. Implementations
/// return one `(window index, label)` pair per batch item, labels in {0, 1}.
pub trait Oracle {
    fn kind(&self) -> OracleKind;

    fn answer(&mut self, batch: &QueryBatch) -> Result<Vec<(usize, u8)>>;
}

/// Answers from known labels, indexed by raw point position.
#[derive(Debug, Clone)]
pub struct ScriptedOracle {
    truth: Vec<i8>,
}

impl ScriptedOracle {
    pub fn new(truth: Vec<i8>) -> Self {
        ScriptedOracle { truth }
    }

    pub fn from_series(series: &TimeSeries) -> Self {
        Self::new(series.labels().to_vec())
    }

    pub fn label_at(&self, raw_index: usize) -> Result<u8> {
        match self.truth.get(raw_index) {
            Some(0) => Ok(0),
            Some(1) => Ok(1),
            Some(&UNKNOWN) => Err(Error::Query(format!("no ground truth at raw index {raw_index}"))),
            _ => Err(Error::Query(format!("raw index {raw_index} out of range"))),
        }
    }
}

impl Oracle for ScriptedOracle {
    fn kind(&self) -> OracleKind {
        OracleKind::Scripted
    }

    fn answer(&mut self, batch: &QueryBatch) -> Result<Vec<(usize, u8)>> {
        batch
            .items
            .iter()
            .map(|item| self.label_at(item.end_index).map(|l| (item.index, l)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelBudget {
    pub human_labels_used: usize,
    pub pseudo_labels_assigned: usize,
    pub budget_cap: Option<usize>,
}

impl LabelBudget {
    pub fn with_cap(cap: Option<usize>) -> Self {
        LabelBudget {
            budget_cap: cap,
            ..Default::default()
        }
    }

    pub fn remaining(&self) -> Option<usize> {
        self.budget_cap.map(|c| c.saturating_sub(self.human_labels_used))
    }

    pub fn exhausted(&self) -> bool {
        self.remaining() == Some(0)
    }
}

/// Ask `oracle` to label `batch`, truncated to the remaining budget (lowest
/// margins kept). Answers are validated against the batch and charged to
/// `budget`.
pub fn query_oracle(oracle: &mut dyn Oracle, mut batch: QueryBatch, budget: &mut LabelBudget) -> Result<Vec<(usize, u8)>> {
    if let Some(left) = budget.remaining() {
        if batch.len() > left {
            warn!(
                "label budget allows {left} more queries; truncating batch {} from {}",
                batch.batch_id,
                batch.len()
            );
            batch.items.truncate(left);
        }
    }
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let answers = oracle.answer(&batch)?;
    let expected: HashSet<usize> = batch.items.iter().map(|i| i.index).collect();
    let mut seen = HashSet::new();
    for &(index, label) in &answers {
        if label > 1 {
            return Err(Error::Query(format!("oracle returned non-binary label {label}")));
        }
        if !expected.contains(&index) || !seen.insert(index) {
            return Err(Error::Query(format!("oracle answered unexpected or repeated index {index}")));
        }
    }
    if seen.len() != expected.len() {
        return Err(Error::Query(format!(
            "oracle answered {} of {} queries",
            seen.len(),
            expected.len()
        )));
    }
    budget.human_labels_used += answers.len();
    Ok(answers)
}

/// Per-window label status for the training windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelStore {
    labels: Vec<i8>,
    sources: Vec<LabelSource>,
}

impl LabelStore {
    pub fn new(len: usize) -> Self {
        LabelStore {
            labels: vec![UNKNOWN; len],
            sources: vec![LabelSource::None; len],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> i8 {
        self.labels[i]
    }

    pub fn source(&self, i: usize) -> LabelSource {
        self.sources[i]
    }

    /// Record a human label. A window accepts at most one.
    pub fn set_human(&mut self, i: usize, label: u8) -> Result<()> {
        if label > 1 {
            return Err(Error::Parameter(format!("label {label} not binary")));
        }
        if i >= self.len() {
            return Err(Error::Parameter(format!("window index {i} out of range")));
        }
        if self.sources[i] == LabelSource::Human {
            return Err(Error::State(format!("window {i} already has a human label")));
        }
        self.labels[i] = label as i8;
        self.sources[i] = LabelSource::Human;
        Ok(())
    }

    /// Record a pseudo-label unless a human label exists. Returns whether
    /// the label was written.
    pub fn set_pseudo(&mut self, i: usize, label: u8) -> bool {
        if self.sources[i] == LabelSource::Human || label > 1 {
            return false;
        }
        self.labels[i] = label as i8;
        self.sources[i] = LabelSource::Pseudo;
        true
    }

    pub fn count(&self, source: LabelSource) -> usize {
        self.sources.iter().filter(|&&s| s == source).count()
    }

    pub fn indices(&self, source: LabelSource) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.sources[i] == source).collect()
    }

    /// Indices with a human or pseudo label, ascending.
    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.sources[i] != LabelSource::None).collect()
    }

    /// Copy labels and sources onto `windows`.
    pub fn apply(&self, windows: &mut [WindowState]) {
        for (w, (&l, &s)) in windows.iter_mut().zip(self.labels.iter().zip(&self.sources)) {
            w.label = l;
            w.label_source = s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeseries::segment;

    fn win(values: Vec<f64>, end_index: usize) -> WindowState {
        WindowState {
            values,
            end_index,
            label: UNKNOWN,
            label_source: LabelSource::None,
        }
    }

    fn constant_q(q: [f64; 2]) -> QNetParams {
        let mut p = QNetParams::zeros(1);
        p.head_b_mut().copy_from_slice(&q);
        p
    }

    #[test]
    fn margin_rank_orders_ascending() {
        let r = rank_by_margin(&[[0.2, 0.9], [0.5, 0.55], [-1.0, 1.0]]);
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![1, 0, 2]);
        let m: Vec<f64> = r.iter().map(|x| x.1).collect();
        for (got, want) in m.iter().zip([0.05, 0.7, 2.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        let w = win(vec![0.3, 0.4], 1);
        let single = margin_rank(&constant_q([0.2, 0.9]), &[&w]).unwrap();
        assert_eq!(single.len(), 1);
        assert!((single[0].1 - 0.7).abs() < 1e-12);
    }

    #[test]
    fn margin_ties_break_by_position() {
        let p = constant_q([0.1, 0.3]);
        let ws: Vec<WindowState> = (0..4).map(|i| win(vec![0.5], i)).collect();
        let refs: Vec<&WindowState> = ws.iter().collect();
        let r = margin_rank(&p, &refs).unwrap();
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn uniform_q_is_most_uncertain() {
        let mut rng = rand::rng();
        let p = QNetParams::init(4, 2).unwrap();
        let mut zero = QNetParams::zeros(4);
        zero.head_b_mut().copy_from_slice(&[0.0, 0.0]);
        assert_eq!(softmax2([0.0, 0.0]), [0.5, 0.5]);
        let ws = [win(vec![0.1, 0.9], 1), win(vec![0.5, 0.5], 2)];
        let refs: Vec<&WindowState> = ws.iter().collect();
        for s in [QueryStrategy::LeastConfidence, QueryStrategy::Entropy] {
            let order = alt_strategy_rank(&zero, &refs, s, &mut rng).unwrap();
            assert_eq!(order, vec![0, 1]);
        }
        let m: Vec<usize> = margin_rank(&p, &refs).unwrap().into_iter().map(|x| x.0).collect();
        assert_eq!(alt_strategy_rank(&p, &refs, QueryStrategy::Margin, &mut rng).unwrap(), m);
    }

    #[test]
    fn random_strategy_is_a_permutation() {
        use rand::SeedableRng;
        let p = QNetParams::zeros(1);
        let ws: Vec<WindowState> = (0..20).map(|i| win(vec![0.5], i)).collect();
        let refs: Vec<&WindowState> = ws.iter().collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut order = alt_strategy_rank(&p, &refs, QueryStrategy::Random, &mut rng).unwrap();
        order.sort_unstable();
        assert_eq!(order, (0..20).collect::<Vec<_>>());
    }

    fn batch_for(truth: &[i8], picks: &[usize]) -> (QueryBatch, TimeSeries) {
        let n = truth.len();
        let series = TimeSeries::new("t", (1..=n as i64).collect(), vec![0.5; n], truth.to_vec()).unwrap();
        let windows = segment(&series, 1).unwrap();
        let ranked: Vec<(usize, f64)> = picks.iter().map(|&i| (i, 0.1)).collect();
        (QueryBatch::from_ranked("b1", &ranked, &windows, &series, usize::MAX, 1), series)
    }

    #[test]
    fn scripted_oracle_answers_from_truth() {
        let (batch, series) = batch_for(&[1, 0, 0, 1], &[0, 1, 2]);
        let mut oracle = ScriptedOracle::from_series(&series);
        let mut budget = LabelBudget::default();
        let got = query_oracle(&mut oracle, batch, &mut budget).unwrap();
        assert_eq!(got, vec![(0, 1), (1, 0), (2, 0)]);
        assert_eq!(budget.human_labels_used, 3);
    }

    #[test]
    fn empty_batch_costs_nothing() {
        let (batch, series) = batch_for(&[1, 0], &[]);
        let mut oracle = ScriptedOracle::from_series(&series);
        let mut budget = LabelBudget::default();
        assert!(query_oracle(&mut oracle, batch, &mut budget).unwrap().is_empty());
        assert_eq!(budget.human_labels_used, 0);
    }

    #[test]
    fn budget_cap_truncates_lowest_margin_first() {
        let truth = vec![0i8; 20];
        let (mut batch, series) = batch_for(&truth, &(0..10).collect::<Vec<_>>());
        for (k, item) in batch.items.iter_mut().enumerate() {
            item.margin = k as f64 * 0.1;
        }
        let mut oracle = ScriptedOracle::from_series(&series);
        let mut budget = LabelBudget {
            human_labels_used: 995,
            pseudo_labels_assigned: 0,
            budget_cap: Some(1000),
        };
        let got = query_oracle(&mut oracle, batch, &mut budget).unwrap();
        assert_eq!(got.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        assert_eq!(budget.human_labels_used, 1000);
        assert!(budget.exhausted());
    }

    #[test]
    fn unknown_truth_is_query_error() {
        let (batch, series) = batch_for(&[-1, 0], &[0]);
        let mut oracle = ScriptedOracle::from_series(&series);
        let mut budget = LabelBudget::default();
        assert!(matches!(query_oracle(&mut oracle, batch, &mut budget), Err(Error::Query(_))));
        assert_eq!(budget.human_labels_used, 0);
    }

    struct Liar;
    impl Oracle for Liar {
        fn kind(&self) -> OracleKind {
            OracleKind::Human
        }
        fn answer(&mut self, batch: &QueryBatch) -> Result<Vec<(usize, u8)>> {
            Ok(batch.items.iter().map(|i| (i.index, 2)).collect())
        }
    }

    #[test]
    fn non_binary_answers_rejected() {
        let (batch, _) = batch_for(&[0, 0], &[0]);
        let mut budget = LabelBudget::default();
        assert!(query_oracle(&mut Liar, batch, &mut budget).is_err());
    }

    #[test]
    fn context_is_bounded() {
        let n = 1000;
        let series = TimeSeries::new("t", (1..=n as i64).collect(), (0..n).map(|i| i as f64).collect(), vec![0; n]).unwrap();
        let windows = segment(&series, 25).unwrap();
        let batch = QueryBatch::from_ranked("x", &[(500, 0.0), (0, 0.1), (975, 0.2)], &windows, &series, 3, 2);
        for item in &batch.items {
            assert!(item.context.values.len() <= 200);
            let off = item.end_index - item.context.start;
            assert_eq!(item.context.values[off], item.end_index as f64);
        }
        assert_eq!(batch.items[0].context.values.len(), 200);
    }

    #[test]
    fn label_store_rules() {
        let mut s = LabelStore::new(5);
        s.set_human(1, 1).unwrap();
        assert!(s.set_human(1, 0).is_err());
        assert!(!s.set_pseudo(1, 0));
        assert_eq!(s.label(1), 1);
        assert!(s.set_pseudo(2, 0));
        assert!(s.set_pseudo(2, 1));
        assert_eq!(s.count(LabelSource::Human), 1);
        assert_eq!(s.count(LabelSource::Pseudo), 1);
        assert_eq!(s.labeled_indices(), vec![1, 2]);
        s.set_human(2, 0).unwrap();
        assert_eq!(s.source(2), LabelSource::Human);
        assert!(s.set_human(7, 0).is_err());
    }
}
