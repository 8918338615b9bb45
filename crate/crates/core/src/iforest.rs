//! Isolation forest over fixed-length windows, used to pick warm-up seeds.

use log::warn;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TREES: usize = 100;
pub const DEFAULT_SUBSAMPLE: usize = 256;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
const EXACT_HARMONIC_LIMIT: usize = 1000;

fn harmonic(m: usize) -> f64 {
    if m <= EXACT_HARMONIC_LIMIT {
        (1..=m).map(|k| 1.0 / k as f64).sum()
    } else {
        (m as f64).ln() + EULER_GAMMA
    }
}

/// Average path length of an unsuccessful BST search among `m` points.
pub fn average_path_length(m: usize) -> f64 {
    match m {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => 2.0 * harmonic(m - 1) - 2.0 * (m - 1) as f64 / m as f64,
    }
}

/// `2^(-mean_path / c_psi)`.
pub fn score_from_path(mean_path: f64, c_psi: f64) -> f64 {
    (-mean_path / c_psi).exp2()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Internal {
        dim: usize,
        split: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        size: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationTree {
    nodes: Vec<Node>,
    height_limit: usize,
}

impl IsolationTree {
    fn build(points: &[&[f64]], height_limit: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut tree = IsolationTree {
            nodes: Vec::new(),
            height_limit,
        };
        let mut idx: Vec<usize> = (0..points.len()).collect();
        tree.grow(points, &mut idx, 0, rng);
        tree
    }

    fn grow(&mut self, points: &[&[f64]], idx: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let id = self.nodes.len();
        if depth >= self.height_limit || idx.len() <= 1 {
            self.nodes.push(Node::Leaf { size: idx.len() });
            return id;
        }
        let dims = points[idx[0]].len();
        // per-dimension extent of this node's subsample
        let spans: Vec<(usize, f64, f64)> = (0..dims)
            .filter_map(|d| {
                let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    (lo.min(points[i][d]), hi.max(points[i][d]))
                });
                (hi > lo).then_some((d, lo, hi))
            })
            .collect();
        if spans.is_empty() {
            self.nodes.push(Node::Leaf { size: idx.len() });
            return id;
        }
        let (dim, lo, hi) = spans[rng.random_range(0..spans.len())];
        let split = rng.random_range(lo..hi);

        // partition in place: left = value < split
        let mut mid = 0;
        for j in 0..idx.len() {
            if points[idx[j]][dim] < split {
                idx.swap(j, mid);
                mid += 1;
            }
        }
        self.nodes.push(Node::Leaf { size: 0 });
        let (left_idx, right_idx) = idx.split_at_mut(mid);
        let left = self.grow(points, left_idx, depth + 1, rng);
        let right = self.grow(points, right_idx, depth + 1, rng);
        self.nodes[id] = Node::Internal { dim, split, left, right };
        id
    }

    /// Path length including the `c(size)` adjustment at the terminal leaf.
    pub fn path_length(&self, x: &[f64]) -> f64 {
        let mut node = 0;
        let mut depth = 0usize;
        loop {
            match self.nodes[node] {
                Node::Internal { dim, split, left, right } => {
                    node = if x[dim] < split { left } else { right };
                    depth += 1;
                }
                Node::Leaf { size } => return depth as f64 + average_path_length(size),
            }
        }
    }

    pub fn height_limit(&self) -> usize {
        self.height_limit
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match nodes[at] {
                Node::Internal { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
                Node::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationForest {
    trees: Vec<IsolationTree>,
    subsample_size: usize,
    dims: usize,
    c_psi: f64,
}

impl IsolationForest {
    /// Fit `num_trees` trees on subsamples of `points`. The subsample size
    /// is clamped to the number of points.
    pub fn fit<P: AsRef<[f64]> + Sync>(points: &[P], num_trees: usize, subsample_size: usize, seed: u64) -> Result<Self> {
        if num_trees == 0 {
            return Err(Error::Parameter("isolation forest needs at least one tree".into()));
        }
        if points.len() < 2 {
            return Err(Error::Size(format!(
                "isolation forest needs at least 2 points, got {}",
                points.len()
            )));
        }
        let dims = points[0].as_ref().len();
        if let Some(bad) = points.iter().find(|p| p.as_ref().len() != dims) {
            return Err(Error::Shape {
                expected: dims,
                actual: bad.as_ref().len(),
            });
        }
        let psi = if subsample_size > points.len() {
            warn!(
                "subsample size {subsample_size} exceeds {} points; clamping",
                points.len()
            );
            points.len()
        } else {
            subsample_size
        };
        if psi < 2 {
            return Err(Error::Parameter(format!("subsample size must be >= 2, got {psi}")));
        }
        let height_limit = (psi as f64).log2().ceil() as usize;

        let trees = (0..num_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(t as u64);
                let chosen = sample(&mut rng, points.len(), psi);
                let subset: Vec<&[f64]> = chosen.iter().map(|i| points[i].as_ref()).collect();
                IsolationTree::build(&subset, height_limit, &mut rng)
            })
            .collect();

        Ok(IsolationForest {
            trees,
            subsample_size: psi,
            dims,
            c_psi: average_path_length(psi),
        })
    }

    pub fn num_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn subsample_size(&self) -> usize {
        self.subsample_size
    }

    pub fn c_psi(&self) -> f64 {
        self.c_psi
    }

    pub fn trees(&self) -> &[IsolationTree] {
        &self.trees
    }

    pub fn mean_path_length(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dims {
            return Err(Error::Shape {
                expected: self.dims,
                actual: x.len(),
            });
        }
        let total: f64 = self.trees.iter().map(|t| t.path_length(x)).sum();
        Ok(total / self.trees.len() as f64)
    }

    /// Anomaly score in (0, 1); higher is more anomalous.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        Ok(score_from_path(self.mean_path_length(x)?, self.c_psi))
    }

    pub fn score_all<P: AsRef<[f64]> + Sync>(&self, points: &[P]) -> Result<Vec<f64>> {
        points.par_iter().map(|p| self.score(p.as_ref())).collect()
    }
}

/// Seed indices chosen from isolation-forest scores.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarmupSelection {
    pub top: Vec<usize>,
    pub bottom: Vec<usize>,
    pub boundary: Vec<usize>,
}

impl WarmupSelection {
    pub fn all(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.top.iter().chain(&self.bottom).chain(&self.boundary).copied().collect();
        all.sort_unstable();
        all
    }
}

/// Pick the `n` highest scores, then the `n` lowest of the rest, then the
/// `n` closest to 0.5 of what remains. Ties go to the lower index.
pub fn warmup_select(scores: &[f64], n: usize) -> Result<WarmupSelection> {
    if scores.len() < 3 * n {
        return Err(Error::Size(format!(
            "need at least {} scores for warm-up of {n}, got {}",
            3 * n,
            scores.len()
        )));
    }
    let mut taken = vec![false; scores.len()];
    let pick = |key: &dyn Fn(usize) -> f64, taken: &mut Vec<bool>| {
        let mut order: Vec<usize> = (0..scores.len()).filter(|&i| !taken[i]).collect();
        order.sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));
        order.truncate(n);
        for &i in &order {
            taken[i] = true;
        }
        order
    };
    let top = pick(&|i| -scores[i], &mut taken);
    let bottom = pick(&|i| scores[i], &mut taken);
    let boundary = pick(&|i| (scores[i] - 0.5).abs(), &mut taken);
    Ok(WarmupSelection { top, bottom, boundary })
}
