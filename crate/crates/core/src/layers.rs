//! Gated linear layers, the low-rank adapter baseline, and the plain head.
//!
//! Inputs are `(batch x features)` matrices; sequence inputs are flattened to
//! `(batch*tokens x features)` before reaching a linear layer. Backward
//! passes are hand-derived; for the gate vectors the gradients reduce to
//! `(G ⊙ W0) omega_c` and `(G ⊙ W0)ᵀ omega_r` with `G = dL/dW_eff`, plus the
//! gated-bias term on the row side.

use crate::gates::{deterministic_gates, sample_gates, GateAxis, StochasticGateVector};
use crate::matrix::Matrix;
use crate::numerics::erf;
use crate::precision::{re, Real};
use crate::rng::RngStream;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LayerError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cache does not belong to this layer/batch: {0}")]
    CacheMismatch(String),
}

/// How gate values are realized during a forward pass.
pub enum GateRealization<'a, T> {
    /// Fresh noise per gate vector, drawn from the stream in layer order.
    Sampled(&'a mut RngStream),
    /// The noise-free clamp `omega = clamp(0.5 + mu)`.
    Deterministic,
    /// Caller-supplied gate vectors per layer (masks; usually 0/1).
    Masked(&'a [(Vec<T>, Vec<T>)]),
}

/// Optional low-rank extension: the effective weight becomes
/// `omega_r ⊙ W0 ⊙ omega_c + A Bᵀ`. Gates do not touch the low-rank term.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRank<T> {
    pub a: Matrix<T>, // k x r
    pub b: Matrix<T>, // d x r
}

/// Frozen weight matrix with trainable row/column gates and a gated bias.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedLinear<T> {
    pub w0: Matrix<T>, // k x d, never updated by training
    pub bias: Vec<T>,  // length k, gated by omega_r in the forward pass
    pub gate_r: StochasticGateVector<T>,
    pub gate_c: StochasticGateVector<T>,
    pub lowrank: Option<LowRank<T>>,
    /// When false the layer acts as a frozen plain linear: gates pinned at 1,
    /// nothing trainable, no sparsity term.
    pub adapted: bool,
}

impl<T: Real> GatedLinear<T> {
    pub fn new(w0: Matrix<T>, bias: Vec<T>, sigma: f64) -> Self {
        assert_eq!(bias.len(), w0.rows());
        let gate_r = StochasticGateVector::open(w0.rows(), sigma, GateAxis::Row);
        let gate_c = StochasticGateVector::open(w0.cols(), sigma, GateAxis::Column);
        GatedLinear { w0, bias, gate_r, gate_c, lowrank: None, adapted: true }
    }

    pub fn out_dim(&self) -> usize {
        self.w0.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w0.cols()
    }

    /// `omega_r ⊙ W0 ⊙ omega_c (+ A Bᵀ)` assembled densely.
    pub fn effective_weight(&self, omega_r: &[T], omega_c: &[T]) -> Matrix<T> {
        let mut w = Matrix::from_fn(self.w0.rows(), self.w0.cols(), |i, j| {
            omega_r[i] * self.w0[(i, j)] * omega_c[j]
        });
        if let Some(lr) = &self.lowrank {
            w.add_assign(&lr.a.matmul_nt(&lr.b));
        }
        w
    }
}

/// Everything backward needs from the matching forward call.
#[derive(Debug, Clone)]
pub struct GatedCache<T> {
    pub x: Matrix<T>,
    pub omega_r: Vec<T>,
    pub omega_c: Vec<T>,
    /// Noise draws; `None` in deterministic mode, empty in masked mode
    /// (masked gates carry no gradient).
    pub eps_r: Option<Vec<T>>,
    pub eps_c: Option<Vec<T>>,
    pub masked: bool,
}

/// Gradients of one gated layer. `d_omega_*` are the raw gate gradients
/// before the clamp indicator; `d_mu_*` are the trainable-parameter
/// gradients after it.
#[derive(Debug, Clone)]
pub struct GatedGrads<T> {
    pub d_omega_r: Vec<T>,
    pub d_omega_c: Vec<T>,
    pub d_mu_r: Vec<T>,
    pub d_mu_c: Vec<T>,
    pub d_bias: Vec<T>,
    pub d_a: Option<Matrix<T>>,
    pub d_b: Option<Matrix<T>>,
    pub d_x: Matrix<T>,
}

fn realize_gates<T: Real>(
    layer: &GatedLinear<T>,
    mode: &mut GateRealization<'_, T>,
    layer_index: usize,
) -> Result<(Vec<T>, Vec<T>, Option<Vec<T>>, Option<Vec<T>>, bool), LayerError> {
    if !layer.adapted {
        return Ok((
            vec![T::one(); layer.out_dim()],
            vec![T::one(); layer.in_dim()],
            None,
            None,
            false,
        ));
    }
    match mode {
        GateRealization::Sampled(rng) => {
            let (omega_r, eps_r) = sample_gates(&layer.gate_r, rng);
            let (omega_c, eps_c) = sample_gates(&layer.gate_c, rng);
            Ok((omega_r, omega_c, Some(eps_r), Some(eps_c), false))
        }
        GateRealization::Deterministic => Ok((
            deterministic_gates(&layer.gate_r),
            deterministic_gates(&layer.gate_c),
            None,
            None,
            false,
        )),
        GateRealization::Masked(masks) => {
            let (rows, cols) = masks.get(layer_index).ok_or_else(|| {
                LayerError::ShapeMismatch(format!("no mask for gated layer {layer_index}"))
            })?;
            if rows.len() != layer.out_dim() || cols.len() != layer.in_dim() {
                return Err(LayerError::ShapeMismatch(format!(
                    "mask {}x{} vs layer {}x{}",
                    rows.len(),
                    cols.len(),
                    layer.out_dim(),
                    layer.in_dim()
                )));
            }
            Ok((rows.clone(), cols.clone(), None, None, true))
        }
    }
}

/// Forward pass `H = X (omega_r ⊙ W0 ⊙ omega_c)ᵀ + omega_r ⊙ b`.
pub fn gated_forward<T: Real>(
    layer: &GatedLinear<T>,
    x: &Matrix<T>,
    mode: &mut GateRealization<'_, T>,
    layer_index: usize,
) -> Result<(Matrix<T>, GatedCache<T>), LayerError> {
    if x.cols() != layer.in_dim() {
        return Err(LayerError::ShapeMismatch(format!(
            "input cols {} vs layer in_dim {}",
            x.cols(),
            layer.in_dim()
        )));
    }
    let (omega_r, omega_c, eps_r, eps_c, masked) = realize_gates(layer, mode, layer_index)?;
    let w_eff = layer.effective_weight(&omega_r, &omega_c);
    let mut h = x.matmul_nt(&w_eff);
    for i in 0..h.rows() {
        let row = h.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v += omega_r[j] * layer.bias[j];
        }
    }
    let cache = GatedCache { x: x.clone(), omega_r, omega_c, eps_r, eps_c, masked };
    Ok((h, cache))
}

/// Derivative of the clamp at the pre-clamp value `0.5 + mu + eps`:
/// 1 strictly inside (0, 1), 0 elsewhere including the boundaries.
#[inline]
fn clamp_indicator<T: Real>(pre: T) -> T {
    if pre > T::zero() && pre < T::one() {
        T::one()
    } else {
        T::zero()
    }
}

/// Backward pass. `g_out = dL/dH` with the batch dimension matching the
/// cached input.
pub fn gated_backward<T: Real>(
    layer: &GatedLinear<T>,
    cache: &GatedCache<T>,
    g_out: &Matrix<T>,
) -> Result<GatedGrads<T>, LayerError> {
    let (k, d) = (layer.out_dim(), layer.in_dim());
    if cache.omega_r.len() != k || cache.omega_c.len() != d || cache.x.cols() != d {
        return Err(LayerError::CacheMismatch(format!(
            "cache dims ({}, {}, x cols {}) vs layer {}x{}",
            cache.omega_r.len(),
            cache.omega_c.len(),
            cache.x.cols(),
            k,
            d
        )));
    }
    if g_out.rows() != cache.x.rows() || g_out.cols() != k {
        return Err(LayerError::CacheMismatch(format!(
            "g_out {}x{} vs batch {} x out {}",
            g_out.rows(),
            g_out.cols(),
            cache.x.rows(),
            k
        )));
    }

    // dL/dW_eff
    let g = g_out.matmul_tn(&cache.x); // k x d
    let g_out_colsums = g_out.col_sums(); // length k

    // gate gradients: (G ⊙ W0) omega_c + gated-bias term, and (G ⊙ W0)ᵀ omega_r
    let mut d_omega_r = vec![T::zero(); k];
    let mut d_omega_c = vec![T::zero(); d];
    for i in 0..k {
        let mut acc = T::zero();
        for j in 0..d {
            let gw = g[(i, j)] * layer.w0[(i, j)];
            acc += gw * cache.omega_c[j];
            d_omega_c[j] += gw * cache.omega_r[i];
        }
        d_omega_r[i] = acc + g_out_colsums[i] * layer.bias[i];
    }

    let (d_mu_r, d_mu_c) = if !layer.adapted || cache.masked {
        (vec![T::zero(); k], vec![T::zero(); d])
    } else {
        let half = re::<T>(0.5);
        let ind = |mu: &[T], eps: Option<&Vec<T>>, i: usize| {
            let e = eps.map_or(T::zero(), |v| v[i]);
            clamp_indicator(half + mu[i] + e)
        };
        let d_mu_r = d_omega_r
            .iter()
            .enumerate()
            .map(|(i, &v)| v * ind(&layer.gate_r.mu, cache.eps_r.as_ref(), i))
            .collect();
        let d_mu_c = d_omega_c
            .iter()
            .enumerate()
            .map(|(j, &v)| v * ind(&layer.gate_c.mu, cache.eps_c.as_ref(), j))
            .collect();
        (d_mu_r, d_mu_c)
    };

    let d_bias: Vec<T> = cache
        .omega_r
        .iter()
        .zip(&g_out_colsums)
        .map(|(&o, &s)| o * s)
        .collect();

    let (d_a, d_b) = match &layer.lowrank {
        Some(lr) => (
            Some(g.matmul_nn(&lr.b)),  // k x r
            Some(g.matmul_tn(&lr.a)),  // d x r
        ),
        None => (None, None),
    };

    let w_eff = layer.effective_weight(&cache.omega_r, &cache.omega_c);
    let d_x = g_out.matmul_nn(&w_eff);

    Ok(GatedGrads {
        d_omega_r,
        d_omega_c,
        d_mu_r,
        d_mu_c,
        d_bias,
        d_a,
        d_b,
        d_x,
    })
}

// ---------------------------------------------------------------------------
// low-rank adapter baseline
// ---------------------------------------------------------------------------

/// Frozen weight plus trainable factors: `W_eff = W0 + A Bᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLinear<T> {
    pub w0: Matrix<T>, // m x n frozen
    pub a: Matrix<T>,  // m x r
    pub b: Matrix<T>,  // n x r
}

impl<T: Real> LoraLinear<T> {
    /// Zero-initialized factors: the effective weight equals `W0` exactly.
    pub fn zero_init(w0: Matrix<T>, rank: usize) -> Self {
        assert!(rank >= 1);
        let (m, n) = (w0.rows(), w0.cols());
        LoraLinear {
            w0,
            a: Matrix::zeros(m, rank),
            b: Matrix::zeros(n, rank),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn effective_weight(&self) -> Matrix<T> {
        let mut w = self.w0.clone();
        w.add_assign(&self.a.matmul_nt(&self.b));
        w
    }
}

#[derive(Debug, Clone)]
pub struct LoraCache<T> {
    pub x: Matrix<T>,
}

#[derive(Debug, Clone)]
pub struct LoraGrads<T> {
    pub d_a: Matrix<T>,
    pub d_b: Matrix<T>,
    pub d_x: Matrix<T>,
}

pub fn lora_forward<T: Real>(
    layer: &LoraLinear<T>,
    x: &Matrix<T>,
) -> Result<(Matrix<T>, LoraCache<T>), LayerError> {
    if x.cols() != layer.w0.cols() {
        return Err(LayerError::ShapeMismatch(format!(
            "input cols {} vs layer in_dim {}",
            x.cols(),
            layer.w0.cols()
        )));
    }
    let h = x.matmul_nt(&layer.effective_weight());
    Ok((h, LoraCache { x: x.clone() }))
}

pub fn lora_backward<T: Real>(
    layer: &LoraLinear<T>,
    cache: &LoraCache<T>,
    g_out: &Matrix<T>,
) -> Result<LoraGrads<T>, LayerError> {
    if g_out.rows() != cache.x.rows() || g_out.cols() != layer.w0.rows() {
        return Err(LayerError::CacheMismatch(format!(
            "g_out {}x{} vs batch {} x out {}",
            g_out.rows(),
            g_out.cols(),
            cache.x.rows(),
            layer.w0.rows()
        )));
    }
    let g = g_out.matmul_tn(&cache.x); // m x n
    Ok(LoraGrads {
        d_a: g.matmul_nn(&layer.b),
        d_b: g.matmul_tn(&layer.a),
        d_x: g_out.matmul_nn(&layer.effective_weight()),
    })
}

// ---------------------------------------------------------------------------
// plain (ungated) linear head
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub w: Matrix<T>, // out x in, trainable
    pub bias: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct LinearGrads<T> {
    pub d_w: Matrix<T>,
    pub d_bias: Vec<T>,
    pub d_x: Matrix<T>,
}

impl<T: Real> Linear<T> {
    pub fn forward(&self, x: &Matrix<T>) -> Matrix<T> {
        assert_eq!(x.cols(), self.w.cols(), "head input width");
        let mut h = x.matmul_nt(&self.w);
        for i in 0..h.rows() {
            for (j, v) in h.row_mut(i).iter_mut().enumerate() {
                *v += self.bias[j];
            }
        }
        h
    }

    pub fn backward(&self, x: &Matrix<T>, g_out: &Matrix<T>) -> LinearGrads<T> {
        LinearGrads {
            d_w: g_out.matmul_tn(x),
            d_bias: g_out.col_sums(),
            d_x: g_out.matmul_nn(&self.w),
        }
    }
}

// ---------------------------------------------------------------------------
// GELU (exact erf form)
// ---------------------------------------------------------------------------

/// `gelu(x) = x * Phi(x)` with the exact error-function CDF.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let xf = x.to_f64_();
    re(xf * 0.5 * (1.0 + erf(xf / std::f64::consts::SQRT_2)))
}

/// `d gelu / dx = Phi(x) + x phi(x)`.
#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let xf = x.to_f64_();
    let cdf = 0.5 * (1.0 + erf(xf / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * xf * xf).exp() / (2.0 * std::f64::consts::PI).sqrt();
    re(cdf + xf * pdf)
}

pub fn gelu_forward<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    x.map(gelu)
}

pub fn gelu_backward<T: Real>(pre: &Matrix<T>, g_out: &Matrix<T>) -> Matrix<T> {
    assert_eq!((pre.rows(), pre.cols()), (g_out.rows(), g_out.cols()));
    Matrix::from_fn(pre.rows(), pre.cols(), |i, j| {
        g_out[(i, j)] * gelu_grad(pre[(i, j)])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::central_diff_grad;
    use crate::rng::RngStream;

    fn random_layer(k: usize, d: usize, rng: &mut RngStream, bias: bool) -> GatedLinear<f64> {
        let w0 = Matrix::from_fn(k, d, |_, _| rng.next_gauss());
        let b = if bias {
            (0..k).map(|_| rng.next_gauss() * 0.1).collect()
        } else {
            vec![0.0; k]
        };
        let mut layer = GatedLinear::new(w0, b, 0.5);
        // move gates off init so gradients are informative
        for m in layer.gate_r.mu.iter_mut() {
            *m = rng.next_gauss() * 0.2;
        }
        for m in layer.gate_c.mu.iter_mut() {
            *m = rng.next_gauss() * 0.2;
        }
        layer
    }

    #[test]
    fn identity_gates_match_plain_linear_bitwise() {
        let mut rng = RngStream::new(1);
        let w0 = Matrix::from_fn(4, 3, |_, _| rng.next_gauss());
        let b: Vec<f64> = (0..4).map(|_| rng.next_gauss()).collect();
        let layer = GatedLinear::new(w0.clone(), b.clone(), 0.5); // open init
        let x = Matrix::from_fn(5, 3, |_, _| rng.next_gauss());
        let (h, _) = gated_forward(&layer, &x, &mut GateRealization::Deterministic, 0).unwrap();
        let plain = Linear { w: w0, bias: b }.forward(&x);
        assert_eq!(h.data(), plain.data());
    }

    #[test]
    fn zero_row_gates_zero_output_and_bias() {
        let mut rng = RngStream::new(2);
        let mut layer = random_layer(3, 4, &mut rng, true);
        for m in layer.gate_r.mu.iter_mut() {
            *m = -5.0; // deterministic gate 0
        }
        let x = Matrix::from_fn(2, 4, |_, _| rng.next_gauss());
        let (h, _) = gated_forward(&layer, &x, &mut GateRealization::Deterministic, 0).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0), "gated bias must vanish too");
    }

    #[test]
    fn hand_checked_forward() {
        let w0 = Matrix::from_rows(&[&[1.0, 2.0][..], &[3.0, 4.0][..]]);
        let mut layer = GatedLinear::new(w0, vec![0.0, 0.0], 0.5);
        layer.gate_r.mu = vec![0.5, -0.5]; // omega_r = [1, 0]
        layer.gate_c.mu = vec![0.0, 0.5]; // omega_c = [0.5, 1]
        let x = Matrix::from_vec(1, 2, vec![1.0, 1.0]);
        let (h, _) = gated_forward(&layer, &x, &mut GateRealization::Deterministic, 0).unwrap();
        assert_eq!(h.data(), &[2.5, 0.0]);
    }

    #[test]
    fn masked_forward_equals_explicit_gate_values() {
        let mut rng = RngStream::new(3);
        let layer = random_layer(4, 5, &mut rng, true);
        let rows = vec![1.0, 0.0, 1.0, 0.0];
        let cols = vec![0.0, 1.0, 1.0, 0.0, 1.0];
        let x = Matrix::from_fn(3, 5, |_, _| rng.next_gauss());
        let masks = vec![(rows.clone(), cols.clone())];
        let (h_masked, _) =
            gated_forward(&layer, &x, &mut GateRealization::Masked(&masks), 0).unwrap();
        // same values assembled by hand
        let w_eff = layer.effective_weight(&rows, &cols);
        let mut want = x.matmul_nt(&w_eff);
        for i in 0..want.rows() {
            for (j, v) in want.row_mut(i).iter_mut().enumerate() {
                *v += rows[j] * layer.bias[j];
            }
        }
        assert_eq!(h_masked.data(), want.data());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let mut rng = RngStream::new(4);
        let layer = random_layer(3, 3, &mut rng, true);
        let x = Matrix::from_fn(2, 3, |_, _| rng.next_gauss());
        let mut stream = RngStream::new(10);
        let (_, cache) =
            gated_forward(&layer, &x, &mut GateRealization::Sampled(&mut stream), 0).unwrap();
        let g_out = Matrix::zeros(2, 3);
        let grads = gated_backward(&layer, &cache, &g_out).unwrap();
        assert!(grads.d_mu_r.iter().all(|&v| v == 0.0));
        assert!(grads.d_mu_c.iter().all(|&v| v == 0.0));
        assert!(grads.d_bias.iter().all(|&v| v == 0.0));
        assert!(grads.d_x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clamped_gates_get_zero_mu_gradient() {
        let mut rng = RngStream::new(5);
        let mut layer = random_layer(3, 3, &mut rng, false);
        layer.gate_r.mu = vec![2.0, 0.0, -2.0]; // pre-clamp 2.5 (dead), 0.5 (live), -1.5 (dead)
        let x = Matrix::from_fn(2, 3, |_, _| rng.next_gauss());
        let (_, cache) =
            gated_forward(&layer, &x, &mut GateRealization::Deterministic, 0).unwrap();
        let g_out = Matrix::from_fn(2, 3, |_, _| rng.next_gauss());
        let grads = gated_backward(&layer, &cache, &g_out).unwrap();
        assert_eq!(grads.d_mu_r[0], 0.0);
        assert_ne!(grads.d_mu_r[1], 0.0);
        assert_eq!(grads.d_mu_r[2], 0.0);
        // raw gate gradients are still reported
        assert_ne!(grads.d_omega_r[0], 0.0);
    }

    /// Direct assembly of the gate-gradient identities for random layers.
    #[test]
    fn gate_gradients_match_direct_identity_assembly() {
        let mut rng = RngStream::new(6);
        for _ in 0..100 {
            let k = 2 + rng.next_below(4);
            let d = 2 + rng.next_below(4);
            let layer = random_layer(k, d, &mut rng, false); // bias off
            let x = Matrix::from_fn(3, d, |_, _| rng.next_gauss());
            let mut stream = RngStream::new(77);
            let (_, cache) =
                gated_forward(&layer, &x, &mut GateRealization::Sampled(&mut stream), 0).unwrap();
            let g_out = Matrix::from_fn(3, k, |_, _| rng.next_gauss());
            let grads = gated_backward(&layer, &cache, &g_out).unwrap();

            let g = g_out.matmul_tn(&x);
            for i in 0..k {
                let mut want = 0.0;
                for j in 0..d {
                    want += g[(i, j)] * layer.w0[(i, j)] * cache.omega_c[j];
                }
                assert!((grads.d_omega_r[i] - want).abs() <= 1e-12);
            }
            for j in 0..d {
                let mut want = 0.0;
                for i in 0..k {
                    want += g[(i, j)] * layer.w0[(i, j)] * cache.omega_r[i];
                }
                assert!((grads.d_omega_c[j] - want).abs() <= 1e-12);
            }
        }
    }

    /// Full finite-difference agreement on a scalar quadratic loss with
    /// frozen noise, including bias and low-rank factors.
    #[test]
    fn backward_matches_central_differences() {
        let mut rng = RngStream::new(7);
        let k = 3;
        let d = 4;
        let r = 2;
        let mut layer = random_layer(k, d, &mut rng, true);
        layer.lowrank = Some(LowRank {
            a: Matrix::from_fn(k, r, |_, _| rng.next_gauss() * 0.3),
            b: Matrix::from_fn(d, r, |_, _| rng.next_gauss() * 0.3),
        });
        let x = Matrix::from_fn(2, d, |_, _| rng.next_gauss());
        let target = Matrix::from_fn(2, k, |_, _| rng.next_gauss());
        let noise = RngStream::new(55);

        // loss(layer) = 1/2 || H - target ||^2 with frozen noise
        let loss_of = |l: &GatedLinear<f64>| -> f64 {
            let mut stream = noise;
            let (h, _) =
                gated_forward(l, &x, &mut GateRealization::Sampled(&mut stream), 0).unwrap();
            0.5 * h.sub(&target).frobenius_norm_sq()
        };

        let mut stream = noise;
        let (h, cache) =
            gated_forward(&layer, &x, &mut GateRealization::Sampled(&mut stream), 0).unwrap();
        let g_out = h.sub(&target);
        let grads = gated_backward(&layer, &cache, &g_out).unwrap();

        let h_step = 1e-6;
        let check = |name: &str, analytic: f64, probe: &mut dyn FnMut(f64) -> f64| {
            let fp = probe(h_step);
            let fm = probe(-h_step);
            let fd = (fp - fm) / (2.0 * h_step);
            let denom = fd.abs().max(1e-9);
            assert!(
                ((analytic - fd) / denom).abs() < 1e-7,
                "{name}: analytic {analytic} vs fd {fd}"
            );
        };

        for i in 0..k {
            // skip coordinates clamped or near the clamp boundary
            let pre = 0.5 + layer.gate_r.mu[i] + cache.eps_r.as_ref().unwrap()[i];
            if pre <= 1e-3 || pre >= 1.0 - 1e-3 {
                continue;
            }
            let mut l = layer.clone();
            check("mu_r", grads.d_mu_r[i], &mut |dx| {
                l.gate_r.mu[i] = layer.gate_r.mu[i] + dx;
                loss_of(&l)
            });
        }
        for j in 0..d {
            let pre = 0.5 + layer.gate_c.mu[j] + cache.eps_c.as_ref().unwrap()[j];
            if pre <= 1e-3 || pre >= 1.0 - 1e-3 {
                continue;
            }
            let mut l = layer.clone();
            check("mu_c", grads.d_mu_c[j], &mut |dx| {
                l.gate_c.mu[j] = layer.gate_c.mu[j] + dx;
                loss_of(&l)
            });
        }
        for i in 0..k {
            let mut l = layer.clone();
            check("bias", grads.d_bias[i], &mut |dx| {
                l.bias[i] = layer.bias[i] + dx;
                loss_of(&l)
            });
        }
        let da = grads.d_a.as_ref().unwrap();
        let db = grads.d_b.as_ref().unwrap();
        for i in 0..k {
            for j in 0..r {
                let mut l = layer.clone();
                check("A", da[(i, j)], &mut |dx| {
                    let lr = l.lowrank.as_mut().unwrap();
                    lr.a[(i, j)] = layer.lowrank.as_ref().unwrap().a[(i, j)] + dx;
                    loss_of(&l)
                });
            }
        }
        for i in 0..d {
            for j in 0..r {
                let mut l = layer.clone();
                check("B", db[(i, j)], &mut |dx| {
                    let lr = l.lowrank.as_mut().unwrap();
                    lr.b[(i, j)] = layer.lowrank.as_ref().unwrap().b[(i, j)] + dx;
                    loss_of(&l)
                });
            }
        }
    }

    #[test]
    fn lora_zero_factors_reduce_to_base() {
        let mut rng = RngStream::new(8);
        let w0 = Matrix::from_fn(3, 4, |_, _| rng.next_gauss());
        let layer = LoraLinear::zero_init(w0.clone(), 2);
        let x = Matrix::from_fn(2, 4, |_, _| rng.next_gauss());
        let (h, _) = lora_forward(&layer, &x).unwrap();
        assert_eq!(h.data(), x.matmul_nt(&w0).data());
    }

    #[test]
    fn lora_full_rank_cancellation() {
        // ABᵀ = -W0 makes the effective weight zero
        let w0 = Matrix::from_rows(&[&[1.0, -2.0][..], &[0.5, 3.0][..]]);
        let layer = LoraLinear {
            a: w0.scale(-1.0),
            b: Matrix::<f64>::identity(2),
            w0,
        };
        let x = Matrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64);
        let (h, _) = lora_forward(&layer, &x).unwrap();
        assert!(h.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn lora_gradients_vanish_at_origin() {
        let mut rng = RngStream::new(9);
        let w0 = Matrix::from_fn(4, 3, |_, _| rng.next_gauss());
        let layer = LoraLinear::zero_init(w0, 2);
        let x = Matrix::from_fn(5, 3, |_, _| rng.next_gauss());
        let (_, cache) = lora_forward(&layer, &x).unwrap();
        let g_out = Matrix::from_fn(5, 4, |_, _| rng.next_gauss());
        let grads = lora_backward(&layer, &cache, &g_out).unwrap();
        assert!(grads.d_a.data().iter().all(|&v| v == 0.0));
        assert!(grads.d_b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lora_backward_matches_central_differences() {
        let mut rng = RngStream::new(10);
        let (m, n, r) = (3, 4, 2);
        let w0 = Matrix::from_fn(m, n, |_, _| rng.next_gauss());
        let layer = LoraLinear {
            w0,
            a: Matrix::from_fn(m, r, |_, _| rng.next_gauss() * 0.5),
            b: Matrix::from_fn(n, r, |_, _| rng.next_gauss() * 0.5),
        };
        let x = Matrix::from_fn(2, n, |_, _| rng.next_gauss());
        let target = Matrix::from_fn(2, m, |_, _| rng.next_gauss());
        let loss_of = |l: &LoraLinear<f64>| {
            let (h, _) = lora_forward(l, &x).unwrap();
            0.5 * h.sub(&target).frobenius_norm_sq()
        };
        let (h, cache) = lora_forward(&layer, &x).unwrap();
        let grads = lora_backward(&layer, &cache, &h.sub(&target)).unwrap();
        let step = 1e-6;
        for i in 0..m {
            for j in 0..r {
                let mut l = layer.clone();
                l.a[(i, j)] += step;
                let fp = loss_of(&l);
                l.a[(i, j)] -= 2.0 * step;
                let fm = loss_of(&l);
                let fd = (fp - fm) / (2.0 * step);
                assert!(((grads.d_a[(i, j)] - fd) / fd.abs().max(1e-9)).abs() < 1e-6);
            }
        }
        for i in 0..n {
            for j in 0..r {
                let mut l = layer.clone();
                l.b[(i, j)] += step;
                let fp = loss_of(&l);
                l.b[(i, j)] -= 2.0 * step;
                let fm = loss_of(&l);
                let fd = (fp - fm) / (2.0 * step);
                assert!(((grads.d_b[(i, j)] - fd) / fd.abs().max(1e-9)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gelu_reference_points_and_gradient() {
        assert_eq!(gelu(0.0f64), 0.0);
        // gelu(1) = 1 * Phi(1)
        assert!((gelu(1.0f64) - 0.8413447460685429).abs() < 1e-12);
        let mut f = |x: &[f64]| gelu(x[0]);
        let g = central_diff_grad(&mut f, &[0.7], 1e-6);
        assert!((g[0] - gelu_grad(0.7f64)).abs() < 1e-9);
    }

    #[test]
    fn cache_mismatch_detected() {
        let mut rng = RngStream::new(11);
        let layer = random_layer(3, 4, &mut rng, true);
        let other = random_layer(5, 4, &mut rng, true);
        let x = Matrix::from_fn(2, 4, |_, _| rng.next_gauss());
        let (_, cache) =
            gated_forward(&other, &x, &mut GateRealization::Deterministic, 0).unwrap();
        let g_out = Matrix::zeros(2, 3);
        assert!(matches!(
            gated_backward(&layer, &cache, &g_out),
            Err(LayerError::CacheMismatch(_))
        ));
    }
}
