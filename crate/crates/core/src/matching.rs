//! One-to-one assignment of predictions to ground truth: a shortest
//! augmenting path Hungarian solver and the position-modulated matching cost.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::GroundTruth;
use crate::geom::{giou_cxcywh, BoxCxCyWH};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside costs.
pub const PROB_EPS: f64 = 1e-7;
/// Replacement for non-finite cost entries.
pub const COST_CLAMP: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    /// Row-major values, rows are predictions and columns ground truths.
    /// Non-finite entries are clamped to `±COST_CLAMP`.
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), rows * cols, "cost matrix shape");
        let values = values
            .into_iter()
            .map(|v| if v.is_nan() { COST_CLAMP } else { v.clamp(-COST_CLAMP, COST_CLAMP) })
            .collect();
        Self { rows, cols, values }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// `(prediction, ground truth)` pairs sorted by prediction index.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn cost(&self, c: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(r, k)| c.get(r, k)).sum()
    }

    pub fn gt_for(&self, pred: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == pred).map(|p| p.1)
    }
}

/// Minimum-cost one-to-one assignment. Every element of the smaller side is
/// matched exactly once.
pub fn hungarian(c: &CostMatrix) -> Assignment {
    if c.rows == 0 || c.cols == 0 {
        return Assignment::default();
    }
    // The solver assigns each of `n` workers to a distinct job among `m >= n`.
    let transposed = c.rows >= c.cols;
    let (n, m) = if transposed { (c.cols, c.rows) } else { (c.rows, c.cols) };
    let cost = |w: usize, j: usize| if transposed { c.get(j, w) } else { c.get(w, j) };

    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // owner[j]: 1-based worker holding job j (0 = free); index 0 is the sentinel.
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for w in 1..=n {
        owner[0] = w;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let w0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(w0 - 1, j - 1) - u[w0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| {
            let (w, job) = (owner[j] - 1, j - 1);
            if transposed {
                (job, w)
            } else {
                (w, job)
            }
        })
        .collect();
    pairs.sort_unstable();
    Assignment { pairs }
}

fn bce_one(q: f64) -> f64 {
    -libm::log(q)
}

/// Position-modulated classification cost
/// `|1 − q|^γ·BCE(q, 1) − q^γ·BCE(1 − q, 1)` with `q = p·(s′)^β`,
/// clamped into `[PROB_EPS, 1 − PROB_EPS]`.
pub fn stable_cls_cost(p: f64, s_prime: f64, gamma: f64, beta: f64) -> f64 {
    let f2 = libm::pow(s_prime.clamp(0.0, 1.0), beta);
    let q = (p * f2).clamp(PROB_EPS, 1.0 - PROB_EPS);
    libm::pow((1.0 - q).abs(), gamma) * bce_one(q) - libm::pow(q, gamma) * bce_one(1.0 - q)
}

/// Coefficients of the classification, L1 and GIoU matching terms.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MatchCoeffs {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    /// Exponent of the localization modulation `(s′)^β`.
    pub beta: f64,
    pub gamma: f64,
}

impl Default for MatchCoeffs {
    fn default() -> Self {
        Self {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
            beta: 0.5,
            gamma: 2.0,
        }
    }
}

/// `C(i, j) = c_cls·stable_cls_cost(p_i[class_j], s′_ij) + c_l1·‖b_i − g_j‖₁
/// + c_giou·(1 − GIoU_ij)` with `s′ = (GIoU + 1)/2`.
///
/// `probs` is row-major `boxes.len() x n_classes`.
pub fn match_cost_matrix(
    boxes: &[BoxCxCyWH],
    probs: &[f64],
    n_classes: usize,
    gts: &[GroundTruth],
    coeffs: &MatchCoeffs,
) -> CostMatrix {
    let mut values = Vec::with_capacity(boxes.len() * gts.len());
    for (i, b) in boxes.iter().enumerate() {
        for gt in gts {
            let giou = giou_cxcywh(b, &gt.bbox);
            let s_prime = 0.5 * (giou + 1.0);
            let p = probs[i * n_classes + gt.class];
            let mut cost = coeffs.l1 * b.l1_distance(&gt.bbox) + coeffs.giou * (1.0 - giou);
            if coeffs.cls != 0.0 {
                cost += coeffs.cls * stable_cls_cost(p, s_prime, coeffs.gamma, coeffs.beta);
            }
            values.push(cost);
        }
    }
    CostMatrix::new(boxes.len(), gts.len(), values)
}
