//! Stochastic row/column gates and the sparsity objective built on them.
//!
//! A gate vector carries trainable means `mu`; a realization is
//! `omega = clamp(0.5 + mu + eps, 0, 1)` with `eps ~ N(0, sigma^2)` during
//! training and `eps = 0` at evaluation. The differentiable sparsity
//! surrogate is the expected fraction of open gates,
//! `E = (1/d) sum_j Phi((mu_j + 0.5)/sigma)`, hinged at a keep-ratio floor so
//! the pressure vanishes once the target sparsity is reached.

use crate::matrix::Matrix;
use crate::numerics::{gauss_cdf, gauss_pdf, pearson_kurtosis};
use crate::precision::{re, Real};
use crate::rng::{gauss_sample, RngStream};
use thiserror::Error;

/// Default noise scale; fixed over a training run.
pub const DEFAULT_SIGMA: f64 = 0.5;

/// Kurtosis substituted for degenerate-variance channels before the softmax.
/// `exp(-30)` is negligible, so constant channels score as maximally prunable.
pub const KURT_CAP: f64 = 30.0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GatesError {
    #[error("kurtosis weights must be nonnegative and sum to 1 within 1e-9")]
    WeightsNotNormalized,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateAxis {
    Row,
    Column,
}

/// Trainable gate vector for one axis of one weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticGateVector<T> {
    pub mu: Vec<T>,
    sigma: f64,
    pub axis: GateAxis,
}

impl<T: Real> StochasticGateVector<T> {
    /// All deterministic gate values start at exactly 1 (`mu = 0.5`).
    pub fn open(len: usize, sigma: f64, axis: GateAxis) -> Self {
        assert!(sigma > 0.0, "gate noise scale must be positive");
        StochasticGateVector {
            mu: vec![re(0.5); len],
            sigma,
            axis,
        }
    }

    pub fn from_mu(mu: Vec<T>, sigma: f64, axis: GateAxis) -> Self {
        assert!(sigma > 0.0, "gate noise scale must be positive");
        StochasticGateVector { mu, sigma, axis }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

#[inline]
fn clamp01<T: Real>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

/// One noisy realization. Returns the realized gates and the exact noise so a
/// backward pass can reuse the draw. Advances `rng` past `len` draws.
pub fn sample_gates<T: Real>(
    g: &StochasticGateVector<T>,
    rng: &mut RngStream,
) -> (Vec<T>, Vec<T>) {
    let eps: Vec<T> = gauss_sample(rng, g.len(), g.sigma);
    let omega = g
        .mu
        .iter()
        .zip(&eps)
        .map(|(&mu, &e)| clamp01(re::<T>(0.5) + mu + e))
        .collect();
    (omega, eps)
}

/// The noise-free realization used at evaluation time.
pub fn deterministic_gates<T: Real>(g: &StochasticGateVector<T>) -> Vec<T> {
    g.mu.iter().map(|&mu| clamp01(re::<T>(0.5) + mu)).collect()
}

/// Expected fraction of open gates, in `[0, 1]`:
/// `(1/d) sum_j [1/2 + 1/2 erf((mu_j + 0.5)/(sqrt(2) sigma))]`.
pub fn expected_l0<T: Real>(g: &StochasticGateVector<T>) -> T {
    if g.is_empty() {
        return T::zero();
    }
    let sum: f64 = g
        .mu
        .iter()
        .map(|&mu| gauss_cdf((mu.to_f64_() + 0.5) / g.sigma))
        .sum();
    re(sum / g.len() as f64)
}

/// Score-weighted expected open fraction: `(1/d) sum_j k_j Phi_j`, with the
/// same `1/d` factor as the unweighted form on top of normalized weights.
pub fn weighted_expected_l0<T: Real>(
    g: &StochasticGateVector<T>,
    k: &[T],
) -> Result<T, GatesError> {
    if k.len() != g.len() {
        return Err(GatesError::ShapeMismatch(format!(
            "weights len {} vs gates len {}",
            k.len(),
            g.len()
        )));
    }
    let mut total = 0.0f64;
    for &w in k {
        let w = w.to_f64_();
        if w < 0.0 {
            return Err(GatesError::WeightsNotNormalized);
        }
        total += w;
    }
    if (total - 1.0).abs() > 1e-9 {
        return Err(GatesError::WeightsNotNormalized);
    }
    let sum: f64 = g
        .mu
        .iter()
        .zip(k)
        .map(|(&mu, &w)| w.to_f64_() * gauss_cdf((mu.to_f64_() + 0.5) / g.sigma))
        .sum();
    Ok(re(sum / g.len() as f64))
}

/// `max(E, floor)`: penalize only while the expected open fraction exceeds
/// the keep-ratio floor.
#[inline]
pub fn hinged_sparsity_loss<T: Real>(expected: T, floor: T) -> T {
    expected.max(floor)
}

/// Gradient of the hinged loss with respect to `mu`. On the smooth branch
/// (`E > floor`) entry `j` is `(k_j or 1)/d * pdf((mu_j+0.5)/sigma)/sigma`;
/// at and below the floor the chosen subgradient is zero.
pub fn sparsity_loss_grad<T: Real>(
    g: &StochasticGateVector<T>,
    k: Option<&[T]>,
    floor: T,
) -> Vec<T> {
    let expected = match k {
        None => expected_l0(g),
        Some(w) => weighted_expected_l0(g, w).expect("validated weights"),
    };
    if expected <= floor {
        return vec![T::zero(); g.len()];
    }
    let d = g.len() as f64;
    g.mu.iter()
        .enumerate()
        .map(|(j, &mu)| {
            let w = k.map_or(1.0, |w| w[j].to_f64_());
            let z = (mu.to_f64_() + 0.5) / g.sigma;
            re(w / d * gauss_pdf(z) / g.sigma)
        })
        .collect()
}

/// Mean input activation broadcast over the gated weights:
/// `O = [omega_r ⊙ W ⊙ omega_c] ⊙ x'` where `x'` is the mean of the batch
/// rows of `X` (batch and sequence dimensions pre-flattened into rows).
pub fn activation_matrix<T: Real>(
    w: &Matrix<T>,
    omega_r: &[T],
    omega_c: &[T],
    x: &Matrix<T>,
) -> Result<Matrix<T>, GatesError> {
    if omega_r.len() != w.rows() || omega_c.len() != w.cols() || x.cols() != w.cols() {
        return Err(GatesError::ShapeMismatch(format!(
            "W {}x{}, omega_r {}, omega_c {}, X cols {}",
            w.rows(),
            w.cols(),
            omega_r.len(),
            omega_c.len(),
            x.cols()
        )));
    }
    if x.rows() == 0 {
        return Err(GatesError::ShapeMismatch("empty activation batch".into()));
    }
    let inv_n = re::<T>(1.0 / x.rows() as f64);
    let mean: Vec<T> = x.col_sums().into_iter().map(|s| s * inv_n).collect();
    Ok(Matrix::from_fn(w.rows(), w.cols(), |i, j| {
        omega_r[i] * w[(i, j)] * omega_c[j] * mean[j]
    }))
}

/// Softmax over negated kurtosis, one score per column and per row of `O`.
/// Degenerate-variance channels get kurtosis `KURT_CAP` so they land at the
/// bottom of the score distribution. Each score vector sums to 1.
pub fn kurtosis_scores<T: Real>(o: &Matrix<T>) -> (Vec<T>, Vec<T>) {
    assert!(
        o.rows() >= 2 && o.cols() >= 2,
        "kurtosis scores need at least a 2x2 activation matrix"
    );
    let col_kurt: Vec<f64> = (0..o.cols())
        .map(|j| {
            let col: Vec<T> = (0..o.rows()).map(|i| o[(i, j)]).collect();
            pearson_kurtosis(&col).map_or(KURT_CAP, |k| k.to_f64_())
        })
        .collect();
    let row_kurt: Vec<f64> = (0..o.rows())
        .map(|i| pearson_kurtosis(o.row(i)).map_or(KURT_CAP, |k| k.to_f64_()))
        .collect();
    (softmax_neg(&col_kurt), softmax_neg(&row_kurt))
}

/// `softmax(-x)` with max-subtraction for stability.
fn softmax_neg<T: Real>(xs: &[f64]) -> Vec<T> {
    let m = xs.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let exps: Vec<f64> = xs.iter().map(|&x| (-(x - m)).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| re(e / total)).collect()
}

/// Per-gate sparsity targets. One global target applies to every gate vector;
/// axis-level and per-layer overrides narrow it. The stored values are
/// keep-ratio floors: `floor = 1 - target_sparsity`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityObjective<T> {
    pub lambda: T,
    pub target_sparsity: f64,
    /// Optional global per-axis overrides (rows, columns).
    pub target_rows: Option<f64>,
    pub target_cols: Option<f64>,
    /// Per-layer overrides keyed by gated-layer index.
    pub layer_overrides: Vec<(usize, GateAxis, f64)>,
    pub kurtosis_weighting: bool,
}

impl<T: Real> SparsityObjective<T> {
    pub fn new(lambda: T, target_sparsity: f64) -> Self {
        assert!((0.0..1.0).contains(&target_sparsity));
        SparsityObjective {
            lambda,
            target_sparsity,
            target_rows: None,
            target_cols: None,
            layer_overrides: vec![],
            kurtosis_weighting: false,
        }
    }

    /// Keep-ratio floor for one gate vector; `floor + target == 1` exactly.
    pub fn floor_for(&self, layer: usize, axis: GateAxis) -> T {
        let mut target = match axis {
            GateAxis::Row => self.target_rows.unwrap_or(self.target_sparsity),
            GateAxis::Column => self.target_cols.unwrap_or(self.target_sparsity),
        };
        for &(l, a, t) in &self.layer_overrides {
            if l == layer && a == axis {
                target = t;
            }
        }
        re(1.0 - target)
    }
}
