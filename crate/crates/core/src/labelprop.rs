//! Transductive label propagation over an RBF similarity graph.
//!
//! Labels diffuse from clamped (human-labeled) nodes through a dense graph
//! whose edge weights are `exp(-d^2 / sigma^2)`. Converged rows with low
//! entropy become pseudo-labels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 1000;
pub const DEFAULT_ENTROPY_THRESHOLD: f64 = 0.2;
pub const DEFAULT_POOL_CAP: usize = 5000;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 0 {
        0.5 * (v[mid - 1] + v[mid])
    } else {
        v[mid]
    })
}

/// Median-heuristic kernel width: the median pairwise distance among the
/// labeled points, falling back to labeled-to-unlabeled distances and then
/// to 1.0 when those are degenerate.
pub fn median_sigma(labeled: &[&[f64]], unlabeled: &[&[f64]]) -> f64 {
    let pairwise: Vec<f64> = (0..labeled.len())
        .flat_map(|i| (i + 1..labeled.len()).map(move |j| (i, j)))
        .map(|(i, j)| sq_dist(labeled[i], labeled[j]).sqrt())
        .collect();
    if let Some(m) = median(pairwise).filter(|m| *m > 0.0 && m.is_finite()) {
        return m;
    }
    let cross: Vec<f64> = labeled
        .iter()
        .flat_map(|l| unlabeled.iter().map(move |u| sq_dist(l, u).sqrt()))
        .collect();
    median(cross).filter(|m| *m > 0.0 && m.is_finite()).unwrap_or(1.0)
}

/// Dense symmetric RBF affinity matrix, row-major.
#[derive(Debug, Clone)]
pub struct AffinityMatrix {
    n: usize,
    sigma: f64,
    weights: Vec<f64>,
}

impl AffinityMatrix {
    pub fn build(points: &[&[f64]], sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Parameter(format!("kernel width must be positive, got {sigma}")));
        }
        let n = points.len();
        let inv = 1.0 / (sigma * sigma);
        let mut weights = vec![0.0; n * n];
        weights.par_chunks_mut(n.max(1)).enumerate().try_for_each(|(i, row)| {
            for (j, w) in row.iter_mut().enumerate() {
                let d2 = sq_dist(points[i], points[j]);
                if !d2.is_finite() {
                    return Err(Error::Integrity(format!("non-finite distance between nodes {i} and {j}")));
                }
                *w = (-d2 * inv).exp();
            }
            Ok(())
        })?;
        Ok(AffinityMatrix { n, sigma, weights })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n + j]
    }

    fn column_sums(&self) -> Vec<f64> {
        // symmetric, so column sums equal row sums
        self.weights.par_chunks(self.n.max(1)).map(|r| r.iter().sum()).collect()
    }
}

/// Column-normalized transition matrix `T` and its row-normalized form used
/// for iteration. Only the row-normalized form is stored; `T` is recovered
/// from the affinity weights and the retained column sums.
#[derive(Debug, Clone)]
pub struct TransitionMatrix {
    n: usize,
    column_sums: Vec<f64>,
    rows: Vec<f64>,
}

impl TransitionMatrix {
    pub fn from_affinity(affinity: AffinityMatrix) -> Self {
        let n = affinity.n;
        let column_sums = affinity.column_sums();
        let mut rows = affinity.weights;
        rows.par_chunks_mut(n.max(1)).for_each(|row| {
            for (w, s) in row.iter_mut().zip(&column_sums) {
                *w /= s;
            }
            let total: f64 = row.iter().sum();
            for w in row.iter_mut() {
                *w /= total;
            }
        });
        TransitionMatrix { n, column_sums, rows }
    }

    pub fn column_sums(&self) -> &[f64] {
        &self.column_sums
    }

    /// Entry of the row-normalized matrix.
    pub fn row_normalized(&self, i: usize, j: usize) -> f64 {
        self.rows[i * self.n + j]
    }

    fn propagate(&self, y: &[[f64; 2]]) -> Vec<[f64; 2]> {
        self.rows
            .par_chunks(self.n.max(1))
            .map(|row| {
                row.iter().zip(y).fold([0.0, 0.0], |acc, (t, yj)| {
                    [acc[0] + t * yj[0], acc[1] + t * yj[1]]
                })
            })
            .collect()
    }
}

/// Per-node class distribution. The first `labeled` rows are clamped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    pub rows: Vec<[f64; 2]>,
    pub labeled: usize,
    pub iterations: usize,
    pub converged: bool,
}

impl LabelDistribution {
    pub fn unlabeled_rows(&self) -> &[[f64; 2]] {
        &self.rows[self.labeled..]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelPropConfig {
    /// Kernel width; `None` selects the median heuristic.
    pub sigma: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub entropy_threshold: f64,
    /// Upper bound on unlabeled nodes per fit.
    pub pool_cap: usize,
}

impl Default for LabelPropConfig {
    fn default() -> Self {
        LabelPropConfig {
            sigma: None,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            entropy_threshold: DEFAULT_ENTROPY_THRESHOLD,
            pool_cap: DEFAULT_POOL_CAP,
        }
    }
}

fn one_hot(label: u8) -> [f64; 2] {
    if label == 0 {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    }
}

/// Run propagation to convergence. `observe` sees the label matrix after
/// every iteration.
pub fn lp_fit_observed(
    labeled: &[(&[f64], u8)],
    unlabeled: &[&[f64]],
    sigma: f64,
    tol: f64,
    max_iter: usize,
    mut observe: impl FnMut(usize, &[[f64; 2]]),
) -> Result<LabelDistribution> {
    if labeled.is_empty() {
        return Err(Error::Precondition("label propagation needs at least one labeled point".into()));
    }
    if let Some((_, bad)) = labeled.iter().find(|(_, l)| *l > 1) {
        return Err(Error::Parameter(format!("binary labels expected, got {bad}")));
    }
    let l = labeled.len();
    let mut y: Vec<[f64; 2]> = labeled.iter().map(|(_, c)| one_hot(*c)).collect();
    y.extend(std::iter::repeat_n([0.5, 0.5], unlabeled.len()));
    if unlabeled.is_empty() {
        return Ok(LabelDistribution {
            rows: y,
            labeled: l,
            iterations: 0,
            converged: true,
        });
    }

    let points: Vec<&[f64]> = labeled.iter().map(|(p, _)| *p).chain(unlabeled.iter().copied()).collect();
    let transition = TransitionMatrix::from_affinity(AffinityMatrix::build(&points, sigma)?);

    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let mut next = transition.propagate(&y);
        for row in next.iter_mut() {
            let s = row[0] + row[1];
            row[0] /= s;
            row[1] /= s;
        }
        for (row, (_, c)) in next.iter_mut().zip(labeled) {
            *row = one_hot(*c);
        }
        let delta = next
            .iter()
            .zip(&y)
            .map(|(a, b)| (a[0] - b[0]).abs().max((a[1] - b[1]).abs()))
            .fold(0.0, f64::max);
        if !delta.is_finite() {
            return Err(Error::Numeric("label propagation diverged".into()));
        }
        y = next;
        iterations += 1;
        observe(iterations, &y);
        if delta < tol {
            converged = true;
            break;
        }
    }
    Ok(LabelDistribution {
        rows: y,
        labeled: l,
        iterations,
        converged,
    })
}

pub fn lp_fit(
    labeled: &[(&[f64], u8)],
    unlabeled: &[&[f64]],
    sigma: f64,
    tol: f64,
    max_iter: usize,
) -> Result<LabelDistribution> {
    lp_fit_observed(labeled, unlabeled, sigma, tol, max_iter, |_, _| {})
}

/// Natural-log entropy with `0 ln 0 = 0`.
pub fn lp_entropy(row: [f64; 2]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// `(unlabeled position, argmax class)` for every unlabeled row whose
/// entropy is at most `threshold`. Positions index the unlabeled rows.
pub fn lp_pseudo_labels(y: &LabelDistribution, threshold: f64) -> Vec<(usize, u8)> {
    y.unlabeled_rows()
        .iter()
        .enumerate()
        .filter(|(_, row)| lp_entropy(**row) <= threshold)
        .map(|(i, row)| (i, u8::from(row[1] > row[0])))
        .collect()
}

/// Indices of the `cap` unlabeled points closest to any labeled point,
/// returned in ascending index order.
pub fn candidate_pool(labeled: &[&[f64]], unlabeled: &[&[f64]], cap: usize) -> Vec<usize> {
    if unlabeled.len() <= cap {
        return (0..unlabeled.len()).collect();
    }
    let nearest: Vec<f64> = unlabeled
        .par_iter()
        .map(|u| labeled.iter().map(|l| sq_dist(l, u)).fold(f64::INFINITY, f64::min))
        .collect();
    let mut order: Vec<usize> = (0..unlabeled.len()).collect();
    order.sort_by(|&a, &b| nearest[a].total_cmp(&nearest[b]).then(a.cmp(&b)));
    order.truncate(cap);
    order.sort_unstable();
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affinity_is_symmetric_with_unit_diagonal() {
        let pts: Vec<Vec<f64>> = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 3.0]];
        let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        let w = AffinityMatrix::build(&refs, 1.5).unwrap();
        for i in 0..4 {
            assert_eq!(w.get(i, i), 1.0);
            for j in 0..4 {
                assert_eq!(w.get(i, j), w.get(j, i));
                assert!(w.get(i, j) > 0.0 && w.get(i, j) <= 1.0);
            }
        }
        assert!((w.get(0, 1) - (-1.0f64 / 2.25).exp()).abs() < 1e-15);
    }

    #[test]
    fn transition_normalizations() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 0.3, (i * i) as f64 * 0.1]).collect();
        let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        let w = AffinityMatrix::build(&refs, 0.8).unwrap();
        let t = TransitionMatrix::from_affinity(w.clone());
        for j in 0..6 {
            let col: f64 = (0..6).map(|i| w.get(i, j) / t.column_sums()[j]).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
        for i in 0..6 {
            let row: f64 = (0..6).map(|j| t.row_normalized(i, j)).sum();
            assert!((row - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_distance_is_integrity_error() {
        let a = [0.0, f64::INFINITY];
        let b = [0.0, 0.0];
        let err = lp_fit(&[(&b, 0)], &[&a], 1.0, 1e-6, 10).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
    }

    #[test]
    fn requires_a_labeled_point() {
        let a = [0.0];
        assert!(matches!(lp_fit(&[], &[&a], 1.0, 1e-6, 10), Err(Error::Precondition(_))));
    }

    /// Closed-form harmonic solution for a single unlabeled node:
    /// y = (T_ua y_a + T_ub y_b) / (1 - T_uu), computed from raw weights.
    fn three_node_oracle(a: [f64; 2], b: [f64; 2], u: [f64; 2], sigma: f64) -> f64 {
        let w = |p: [f64; 2], q: [f64; 2]| (-((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)) / (sigma * sigma)).exp();
        let pts = [a, b, u];
        let col: Vec<f64> = (0..3).map(|j| (0..3).map(|i| w(pts[i], pts[j])).sum()).collect();
        let t: Vec<f64> = (0..3).map(|j| w(u, pts[j]) / col[j]).collect();
        let s: f64 = t.iter().sum();
        let (ta, tb, tu) = (t[0] / s, t[1] / s, t[2] / s);
        // probability of class 0 at the fixed point
        let _ = tb;
        ta / (1.0 - tu)
    }

    #[test]
    fn point_on_labeled_node_inherits_its_class() {
        let a = [0.0, 0.0];
        let b = [10.0, 10.0];
        let y = lp_fit(&[(&a, 0), (&b, 1)], &[&a], 1.0, 1e-12, 1000).unwrap();
        let row = y.unlabeled_rows()[0];
        assert!(row[0] >= 0.99 && row[1] <= 0.01);
        let expected = three_node_oracle(a, b, a, 1.0);
        assert!((row[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn three_node_matches_closed_form() {
        let a = [0.0, 0.0];
        let b = [1.0, 0.5];
        let u = [0.3, 0.4];
        let y = lp_fit(&[(&a, 0), (&b, 1)], &[&u], 0.7, 1e-13, 10_000).unwrap();
        assert!(y.converged);
        assert!((y.unlabeled_rows()[0][0] - three_node_oracle(a, b, u, 0.7)).abs() < 1e-9);
    }

    #[test]
    fn equidistant_point_is_undecided() {
        let a = [0.0, 0.0];
        let b = [2.0, 0.0];
        let u = [1.0, 0.0];
        let y = lp_fit(&[(&a, 0), (&b, 1)], &[&u], 1.0, 1e-12, 1000).unwrap();
        let row = y.unlabeled_rows()[0];
        assert!((row[0] - 0.5).abs() < 1e-12 && (row[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn no_unlabeled_returns_clamped_rows() {
        let a = [0.0];
        let b = [1.0];
        let y = lp_fit(&[(&a, 1), (&b, 0)], &[], 1.0, 1e-6, 10).unwrap();
        assert_eq!(y.rows, vec![[0.0, 1.0], [1.0, 0.0]]);
        assert_eq!(y.iterations, 0);
    }

    #[test]
    fn entropy_values() {
        assert!((lp_entropy([0.5, 0.5]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(lp_entropy([1.0, 0.0]), 0.0);
        // -(0.9 ln 0.9 + 0.1 ln 0.1) = 0.325082973...
        assert!((lp_entropy([0.9, 0.1]) - 0.325_082_973_391_448_2).abs() < 1e-12);
    }

    #[test]
    fn pseudo_labels_gate_on_entropy() {
        let y = LabelDistribution {
            rows: vec![[1.0, 0.0], [0.99, 0.01], [0.6, 0.4], [0.02, 0.98], [1.0, 0.0]],
            labeled: 1,
            iterations: 1,
            converged: true,
        };
        // entropies: 0.0560, 0.6730, 0.0980, 0.0
        assert_eq!(lp_pseudo_labels(&y, 0.2), vec![(0, 0), (2, 1), (3, 0)]);
        assert_eq!(lp_pseudo_labels(&y, 0.0), vec![(3, 0)]);
    }

    #[test]
    fn kernel_weight_decreases_with_distance() {
        let origin = [0.0];
        let mut last = f64::INFINITY;
        for k in 0..20 {
            let p = [k as f64 * 0.25];
            let w = AffinityMatrix::build(&[&origin, &p], 1.3).unwrap().get(0, 1);
            assert!(w < last || k == 0);
            last = w;
        }
    }

    #[test]
    fn wide_kernel_converges_to_label_prior() {
        let pts: Vec<[f64; 1]> = (0..8).map(|i| [i as f64]).collect();
        let labeled: Vec<(&[f64], u8)> = vec![(&pts[0], 0), (&pts[1], 0), (&pts[2], 0), (&pts[3], 1)];
        let unlabeled: Vec<&[f64]> = pts[4..].iter().map(|p| p.as_slice()).collect();
        let y = lp_fit(&labeled, &unlabeled, 1e6, 1e-12, 10_000).unwrap();
        for row in y.unlabeled_rows() {
            assert!((row[0] - 0.75).abs() < 1e-3 && (row[1] - 0.25).abs() < 1e-3);
        }
    }

    #[test]
    fn median_sigma_examples() {
        let pts = [[0.0], [1.0], [3.0]];
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        // distances 1, 3, 2
        assert_eq!(median_sigma(&refs, &[]), 2.0);
        let one = [[0.0]];
        let one: Vec<&[f64]> = one.iter().map(|p| p.as_slice()).collect();
        let far = [[4.0]];
        let far: Vec<&[f64]> = far.iter().map(|p| p.as_slice()).collect();
        assert_eq!(median_sigma(&one, &far), 4.0);
        assert_eq!(median_sigma(&one, &[]), 1.0);
    }

    #[test]
    fn pool_keeps_nearest() {
        let lab = [[0.0]];
        let lab: Vec<&[f64]> = lab.iter().map(|p| p.as_slice()).collect();
        let un: Vec<[f64; 1]> = vec![[5.0], [1.0], [3.0], [0.5], [4.0]];
        let un: Vec<&[f64]> = un.iter().map(|p| p.as_slice()).collect();
        assert_eq!(candidate_pool(&lab, &un, 2), vec![1, 3]);
        assert_eq!(candidate_pool(&lab, &un, 10), vec![0, 1, 2, 3, 4]);
    }
}
