//! Gated network assembly: an MLP classifier/regressor and a tiny pre-norm
//! transformer with gates on the attention and FFN projections. The
//! classifier head is never gated and never contributes a sparsity term;
//! embeddings and layer norms are frozen.

mod checkpoint;

pub use checkpoint::{Container, ModelCheckpointError, NamedTensor, CHECKPOINT_VERSION};

use crate::gates::SparsityObjective;
use crate::layers::{
    gated_backward, gated_forward, gelu_backward, gelu_forward, GateRealization, GatedCache,
    GatedGrads, GatedLinear, LayerError, Linear, LinearGrads, LowRank,
};
use crate::matrix::Matrix;
use crate::precision::{re, Real};
use crate::rng::RngStream;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Checkpoint(#[from] ModelCheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Classification,
    Regression,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Regression => "regression",
        }
    }
}

/// Architecture descriptor. For the MLP, `widths` lists the input dimension
/// followed by every gated hidden width; the ungated head maps the last
/// width to `head_out`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Arch {
    Mlp {
        widths: Vec<usize>,
        head_out: usize,
    },
    Transformer {
        vocab: usize,
        seq_len: usize,
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        n_blocks: usize,
        head_out: usize,
        /// When false, the FFN projections stay frozen and ungated.
        gate_mlp: bool,
    },
}

impl Arch {
    pub fn head_out(&self) -> usize {
        match self {
            Arch::Mlp { head_out, .. } => *head_out,
            Arch::Transformer { head_out, .. } => *head_out,
        }
    }
}

/// Frozen per-row normalization (pre-norm blocks).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Vec<T>,
    pub bias: Vec<T>,
}

pub const LN_EPS: f64 = 1e-5;

impl<T: Real> LayerNorm<T> {
    pub fn unit(width: usize) -> Self {
        LayerNorm {
            gain: vec![T::one(); width],
            bias: vec![T::zero(); width],
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> (Matrix<T>, LnCache<T>) {
        let (rows, cols) = (x.rows(), x.cols());
        let mut out = Matrix::zeros(rows, cols);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = vec![T::zero(); rows];
        let inv_n = re::<T>(1.0 / cols as f64);
        let eps = re::<T>(LN_EPS);
        for i in 0..rows {
            let row = x.row(i);
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) * inv_n;
            let var = row
                .iter()
                .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
                * inv_n;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..cols {
                let norm = (x[(i, j)] - mean) * istd;
                xhat[(i, j)] = norm;
                out[(i, j)] = norm * self.gain[j] + self.bias[j];
            }
        }
        (out, LnCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LnCache<T>, g_out: &Matrix<T>) -> Matrix<T> {
        let (rows, cols) = (cache.xhat.rows(), cache.xhat.cols());
        let inv_n = re::<T>(1.0 / cols as f64);
        let mut dx = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut mean_dy = T::zero();
            let mut mean_dy_xhat = T::zero();
            for j in 0..cols {
                let dyh = g_out[(i, j)] * self.gain[j];
                mean_dy += dyh;
                mean_dy_xhat += dyh * cache.xhat[(i, j)];
            }
            mean_dy *= inv_n;
            mean_dy_xhat *= inv_n;
            for j in 0..cols {
                let dyh = g_out[(i, j)] * self.gain[j];
                dx[(i, j)] =
                    cache.inv_std[i] * (dyh - mean_dy - cache.xhat[(i, j)] * mean_dy_xhat);
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct LnCache<T> {
    pub xhat: Matrix<T>,
    pub inv_std: Vec<T>,
}

/// A batch as seen by the model.
pub enum InputRef<'a, T> {
    /// `N x d_in` features (MLP).
    Dense(&'a Matrix<T>),
    /// `N * seq_len` token ids, row-major (transformer).
    Tokens(&'a [u32]),
}

/// The full gated network.
#[derive(Debug, Clone)]
pub struct GatedModel<T> {
    pub arch: Arch,
    pub task: TaskKind,
    /// All gated weight matrices in forward order. For the transformer the
    /// layout is `[wq, wk, wv, wo, mlp_i, mlp_o]` per block.
    pub layers: Vec<GatedLinear<T>>,
    pub head: Linear<T>,
    /// Frozen token embedding (transformer only), `vocab x d_model`.
    pub embed: Option<Matrix<T>>,
    /// Frozen layer norms, `[ln1, ln2]` per block.
    pub lns: Vec<LayerNorm<T>>,
    pub objective: SparsityObjective<T>,
    pub sigma: f64,
}

/// Trainable/frozen parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub gates: usize,
    pub biases: usize,
    pub head: usize,
    pub lowrank: usize,
    pub frozen: usize,
}

impl ParamCounts {
    pub fn trainable(&self) -> usize {
        self.gates + self.biases + self.head + self.lowrank
    }
}

impl<T: Real> GatedModel<T> {
    /// Number of gated matrices contributing sparsity terms.
    pub fn num_gated(&self) -> usize {
        self.layers.iter().filter(|l| l.adapted).count()
    }

    pub fn param_counts(&self) -> ParamCounts {
        let mut c = ParamCounts { gates: 0, biases: 0, head: 0, lowrank: 0, frozen: 0 };
        for l in &self.layers {
            c.frozen += l.w0.rows() * l.w0.cols();
            if l.adapted {
                c.gates += l.gate_r.len() + l.gate_c.len();
                c.biases += l.bias.len();
                if let Some(lr) = &l.lowrank {
                    c.lowrank += lr.a.rows() * lr.a.cols() + lr.b.rows() * lr.b.cols();
                }
            } else {
                c.frozen += l.bias.len();
            }
        }
        c.head = self.head.w.rows() * self.head.w.cols() + self.head.bias.len();
        if let Some(e) = &self.embed {
            c.frozen += e.rows() * e.cols();
        }
        for ln in &self.lns {
            c.frozen += ln.gain.len() + ln.bias.len();
        }
        c
    }

    /// FNV-1a over the little-endian bytes of every frozen tensor; the
    /// training loop asserts this never changes.
    pub fn frozen_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |data: &[T]| {
            let mut bytes = Vec::with_capacity(data.len() * 8);
            for &v in data {
                v.write_le(&mut bytes);
            }
            for b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        };
        for l in &self.layers {
            eat(l.w0.data());
        }
        if let Some(e) = &self.embed {
            eat(e.data());
        }
        for ln in &self.lns {
            eat(&ln.gain);
            eat(&ln.bias);
        }
        h
    }

    fn transformer_dims(&self) -> Option<(usize, usize, usize, usize)> {
        match self.arch {
            Arch::Transformer { seq_len, d_model, n_heads, n_blocks, .. } => {
                Some((seq_len, d_model, n_heads, n_blocks))
            }
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// construction
// ---------------------------------------------------------------------------

fn he_matrix<T: Real>(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix<T> {
    let scale = (2.0 / cols as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| re(rng.next_gauss() * scale))
}

/// Seeded He-style random model. Every gate starts open (deterministic value
/// exactly 1) and biases start at zero.
pub fn build_mlp<T: Real>(
    widths: &[usize],
    head_out: usize,
    objective: SparsityObjective<T>,
    task: TaskKind,
    sigma: f64,
    seed: u64,
) -> Result<GatedModel<T>, ModelError> {
    if widths.len() < 2 {
        return Err(ModelError::BadConfig(
            "mlp needs an input width and at least one hidden width".into(),
        ));
    }
    if widths.iter().any(|&w| w == 0) || head_out == 0 {
        return Err(ModelError::BadConfig("zero-width layer".into()));
    }
    let rng = RngStream::new(seed);
    let mut layers = Vec::new();
    for w in widths.windows(2) {
        let mut lrng = rng.substream(layers.len() as u64 + 1);
        layers.push(GatedLinear::new(
            he_matrix(w[1], w[0], &mut lrng),
            vec![T::zero(); w[1]],
            sigma,
        ));
    }
    let mut hrng = rng.substream(1000);
    let head = Linear {
        w: he_matrix(head_out, *widths.last().expect("nonempty"), &mut hrng),
        bias: vec![T::zero(); head_out],
    };
    Ok(GatedModel {
        arch: Arch::Mlp { widths: widths.to_vec(), head_out },
        task,
        layers,
        head,
        embed: None,
        lns: vec![],
        objective,
        sigma,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn build_transformer<T: Real>(
    vocab: usize,
    seq_len: usize,
    d_model: usize,
    n_heads: usize,
    d_ff: usize,
    n_blocks: usize,
    head_out: usize,
    gate_mlp: bool,
    objective: SparsityObjective<T>,
    task: TaskKind,
    sigma: f64,
    seed: u64,
) -> Result<GatedModel<T>, ModelError> {
    if d_model == 0 || n_heads == 0 || d_model % n_heads != 0 {
        return Err(ModelError::BadConfig(format!(
            "d_model {d_model} must be a positive multiple of n_heads {n_heads}"
        )));
    }
    if vocab == 0 || seq_len == 0 || d_ff == 0 || n_blocks == 0 || head_out == 0 {
        return Err(ModelError::BadConfig("zero-sized transformer dimension".into()));
    }
    let rng = RngStream::new(seed);
    let mut erng = rng.substream(7);
    let embed = Matrix::from_fn(vocab, d_model, |_, _| re(erng.next_gauss() * 0.02));
    let mut layers = Vec::new();
    let mut lns = Vec::new();
    for b in 0..n_blocks {
        let brng = rng.substream(100 + b as u64);
        for (slot, (rows, cols)) in [
            (d_model, d_model), // wq
            (d_model, d_model), // wk
            (d_model, d_model), // wv
            (d_model, d_model), // wo
            (d_ff, d_model),    // mlp_i
            (d_model, d_ff),    // mlp_o
        ]
        .into_iter()
        .enumerate()
        {
            let mut srng = brng.substream(slot as u64);
            let mut layer =
                GatedLinear::new(he_matrix(rows, cols, &mut srng), vec![T::zero(); rows], sigma);
            if slot >= 4 && !gate_mlp {
                layer.adapted = false;
            }
            layers.push(layer);
        }
        lns.push(LayerNorm::unit(d_model));
        lns.push(LayerNorm::unit(d_model));
    }
    let mut hrng = rng.substream(2000);
    let head = Linear {
        w: he_matrix(head_out, d_model, &mut hrng),
        bias: vec![T::zero(); head_out],
    };
    Ok(GatedModel {
        arch: Arch::Transformer {
            vocab,
            seq_len,
            d_model,
            n_heads,
            d_ff,
            n_blocks,
            head_out,
            gate_mlp,
        },
        task,
        layers,
        head,
        embed: Some(embed),
        lns,
        objective,
        sigma,
    })
}

/// Attaches zero/He-initialized low-rank factors to every adapted layer.
pub fn attach_lowrank<T: Real>(model: &mut GatedModel<T>, rank: usize, seed: u64) {
    let rng = RngStream::new(seed);
    for (i, layer) in model.layers.iter_mut().enumerate() {
        if !layer.adapted {
            continue;
        }
        let mut lrng = rng.substream(i as u64);
        let scale = (1.0 / rank as f64).sqrt();
        layer.lowrank = Some(LowRank {
            a: Matrix::from_fn(layer.out_dim(), rank, |_, _| re(lrng.next_gauss() * scale)),
            b: Matrix::zeros(layer.in_dim(), rank),
        });
    }
}

// ---------------------------------------------------------------------------
// forward / backward
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct BlockCache<T> {
    ln1: LnCache<T>,
    ln2: LnCache<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    /// Softmax probabilities, one `t x t` matrix per (sample, head).
    probs: Vec<Matrix<T>>,
    ffn_pre: Matrix<T>,
}

#[derive(Debug, Clone)]
pub struct ModelCache<T> {
    /// Per gated layer, aligned with `model.layers`.
    gated: Vec<GatedCache<T>>,
    /// MLP pre-activations per layer.
    mlp_pre: Vec<Matrix<T>>,
    blocks: Vec<BlockCache<T>>,
    /// Input the head saw.
    head_in: Matrix<T>,
    batch: usize,
}

impl<T: Real> ModelCache<T> {
    pub fn gated_caches(&self) -> &[GatedCache<T>] {
        &self.gated
    }

    pub fn head_input(&self) -> &Matrix<T> {
        &self.head_in
    }
}

#[derive(Debug, Clone)]
pub struct ModelGrads<T> {
    pub layers: Vec<GatedGrads<T>>,
    pub head: LinearGrads<T>,
}

/// Row-softmax with max-subtraction.
pub fn softmax_rows<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let row = x.row(i);
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut total = T::zero();
        for (j, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            out[(i, j)] = e;
            total += e;
        }
        for j in 0..x.cols() {
            out[(i, j)] = out[(i, j)] / total;
        }
    }
    out
}

/// Backward through a row-softmax: `dS = P ⊙ (dP - rowsum(dP ⊙ P))`.
fn softmax_rows_backward<T: Real>(probs: &Matrix<T>, d_probs: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let mut dot = T::zero();
        for j in 0..probs.cols() {
            dot += d_probs[(i, j)] * probs[(i, j)];
        }
        for j in 0..probs.cols() {
            out[(i, j)] = probs[(i, j)] * (d_probs[(i, j)] - dot);
        }
    }
    out
}

fn slice_head<T: Real>(m: &Matrix<T>, sample: usize, t: usize, head: usize, dh: usize) -> Matrix<T> {
    Matrix::from_fn(t, dh, |i, j| m[(sample * t + i, head * dh + j)])
}

impl<T: Real> GatedModel<T> {
    pub fn forward(
        &self,
        input: &InputRef<'_, T>,
        mode: &mut GateRealization<'_, T>,
    ) -> Result<(Matrix<T>, ModelCache<T>), ModelError> {
        match &self.arch {
            Arch::Mlp { widths, .. } => {
                let x = match input {
                    InputRef::Dense(x) => *x,
                    InputRef::Tokens(_) => {
                        return Err(ModelError::ShapeMismatch(
                            "mlp expects dense features".into(),
                        ))
                    }
                };
                if x.cols() != widths[0] {
                    return Err(ModelError::ShapeMismatch(format!(
                        "input width {} vs arch {}",
                        x.cols(),
                        widths[0]
                    )));
                }
                let mut gated = Vec::with_capacity(self.layers.len());
                let mut mlp_pre = Vec::with_capacity(self.layers.len());
                let mut cur = x.clone();
                for (i, layer) in self.layers.iter().enumerate() {
                    let (h, cache) = gated_forward(layer, &cur, mode, i)?;
                    cur = gelu_forward(&h);
                    mlp_pre.push(h);
                    gated.push(cache);
                }
                let logits = self.head.forward(&cur);
                Ok((
                    logits,
                    ModelCache {
                        gated,
                        mlp_pre,
                        blocks: vec![],
                        head_in: cur,
                        batch: x.rows(),
                    },
                ))
            }
            Arch::Transformer { vocab, .. } => {
                let (seq_len, d_model, n_heads, n_blocks) =
                    self.transformer_dims().expect("transformer arch");
                let ids = match input {
                    InputRef::Tokens(ids) => *ids,
                    InputRef::Dense(_) => {
                        return Err(ModelError::ShapeMismatch(
                            "transformer expects token ids".into(),
                        ))
                    }
                };
                if ids.is_empty() || ids.len() % seq_len != 0 {
                    return Err(ModelError::ShapeMismatch(format!(
                        "token count {} not a multiple of seq_len {seq_len}",
                        ids.len()
                    )));
                }
                if let Some(&bad) = ids.iter().find(|&&t| t as usize >= *vocab) {
                    return Err(ModelError::ShapeMismatch(format!(
                        "token id {bad} out of vocab {vocab}"
                    )));
                }
                let batch = ids.len() / seq_len;
                let embed = self.embed.as_ref().expect("transformer embedding");
                let mut x = Matrix::from_fn(ids.len(), d_model, |i, j| {
                    embed[(ids[i] as usize, j)]
                });

                let dh = d_model / n_heads;
                let scale = re::<T>(1.0 / (dh as f64).sqrt());
                let mut gated: Vec<GatedCache<T>> = Vec::with_capacity(self.layers.len());
                let mut blocks = Vec::with_capacity(n_blocks);

                for b in 0..n_blocks {
                    let l0 = 6 * b;
                    let (normed1, ln1) = self.lns[2 * b].forward(&x);
                    let (q, qc) = gated_forward(&self.layers[l0], &normed1, mode, l0)?;
                    let (k, kc) = gated_forward(&self.layers[l0 + 1], &normed1, mode, l0 + 1)?;
                    let (v, vc) = gated_forward(&self.layers[l0 + 2], &normed1, mode, l0 + 2)?;

                    let mut ctx = Matrix::zeros(ids.len(), d_model);
                    let mut probs = Vec::with_capacity(batch * n_heads);
                    for n in 0..batch {
                        for a in 0..n_heads {
                            let qh = slice_head(&q, n, seq_len, a, dh);
                            let kh = slice_head(&k, n, seq_len, a, dh);
                            let vh = slice_head(&v, n, seq_len, a, dh);
                            let scores = qh.matmul_nt(&kh).scale(scale);
                            let p = softmax_rows(&scores);
                            let c = p.matmul_nn(&vh);
                            for i in 0..seq_len {
                                for j in 0..dh {
                                    ctx[(n * seq_len + i, a * dh + j)] = c[(i, j)];
                                }
                            }
                            probs.push(p);
                        }
                    }
                    let (attn_out, oc) = gated_forward(&self.layers[l0 + 3], &ctx, mode, l0 + 3)?;
                    x.add_assign(&attn_out);

                    let (normed2, ln2) = self.lns[2 * b + 1].forward(&x);
                    let (ffn_pre, ic) =
                        gated_forward(&self.layers[l0 + 4], &normed2, mode, l0 + 4)?;
                    let ffn_act = gelu_forward(&ffn_pre);
                    let (ffn_out, ocache) =
                        gated_forward(&self.layers[l0 + 5], &ffn_act, mode, l0 + 5)?;
                    x.add_assign(&ffn_out);

                    gated.extend([qc, kc, vc, oc, ic, ocache]);
                    blocks.push(BlockCache {
                        ln1,
                        ln2,
                        q,
                        k,
                        v,
                        probs,
                        ffn_pre,
                    });
                }

                // mean-pool over tokens
                let inv_t = re::<T>(1.0 / seq_len as f64);
                let pooled = Matrix::from_fn(batch, d_model, |n, j| {
                    let mut s = T::zero();
                    for i in 0..seq_len {
                        s += x[(n * seq_len + i, j)];
                    }
                    s * inv_t
                });
                let logits = self.head.forward(&pooled);
                Ok((
                    logits,
                    ModelCache {
                        gated,
                        mlp_pre: vec![],
                        blocks,
                        head_in: pooled,
                        batch,
                    },
                ))
            }
        }
    }

    /// Backpropagates `d_logits` through the cached forward pass. Returns
    /// gradients for every gated layer (in layer order) and the head.
    pub fn backward(
        &self,
        cache: &ModelCache<T>,
        d_logits: &Matrix<T>,
    ) -> Result<ModelGrads<T>, ModelError> {
        let head_grads = self.head.backward(&cache.head_in, d_logits);
        match &self.arch {
            Arch::Mlp { .. } => {
                let mut d = head_grads.d_x.clone();
                let mut layer_grads: Vec<Option<GatedGrads<T>>> =
                    (0..self.layers.len()).map(|_| None).collect();
                for i in (0..self.layers.len()).rev() {
                    let d_pre = gelu_backward(&cache.mlp_pre[i], &d);
                    let grads = gated_backward(&self.layers[i], &cache.gated[i], &d_pre)?;
                    d = grads.d_x.clone();
                    layer_grads[i] = Some(grads);
                }
                Ok(ModelGrads {
                    layers: layer_grads.into_iter().map(|g| g.expect("filled")).collect(),
                    head: head_grads,
                })
            }
            Arch::Transformer { .. } => {
                let (seq_len, d_model, n_heads, n_blocks) =
                    self.transformer_dims().expect("transformer arch");
                let dh = d_model / n_heads;
                let scale = re::<T>(1.0 / (dh as f64).sqrt());
                let batch = cache.batch;
                let rows = batch * seq_len;

                // un-pool: every token row inherits d_pooled / seq_len
                let inv_t = re::<T>(1.0 / seq_len as f64);
                let mut d_x = Matrix::from_fn(rows, d_model, |r, j| {
                    head_grads.d_x[(r / seq_len, j)] * inv_t
                });

                let mut layer_grads: Vec<Option<GatedGrads<T>>> =
                    (0..self.layers.len()).map(|_| None).collect();

                for b in (0..n_blocks).rev() {
                    let l0 = 6 * b;
                    let bc = &cache.blocks[b];

                    // FFN branch: x = x + mlp_o(gelu(mlp_i(ln2(x))))
                    let g_o = gated_backward(&self.layers[l0 + 5], &cache.gated[l0 + 5], &d_x)?;
                    let d_act = gelu_backward(&bc.ffn_pre, &g_o.d_x);
                    let g_i = gated_backward(&self.layers[l0 + 4], &cache.gated[l0 + 4], &d_act)?;
                    let d_ln2 = self.lns[2 * b + 1].backward(&bc.ln2, &g_i.d_x);
                    d_x.add_assign(&d_ln2);
                    layer_grads[l0 + 5] = Some(g_o);
                    layer_grads[l0 + 4] = Some(g_i);

                    // attention branch: x = x + wo(attn(q, k, v))
                    let mut g_wo =
                        gated_backward(&self.layers[l0 + 3], &cache.gated[l0 + 3], &d_x)?;
                    let d_ctx = std::mem::replace(&mut g_wo.d_x, Matrix::zeros(0, 0));
                    layer_grads[l0 + 3] = Some(g_wo);

                    let mut d_q = Matrix::zeros(rows, d_model);
                    let mut d_k = Matrix::zeros(rows, d_model);
                    let mut d_v = Matrix::zeros(rows, d_model);
                    for n in 0..batch {
                        for a in 0..n_heads {
                            let p = &bc.probs[n * n_heads + a];
                            let dch = slice_head(&d_ctx, n, seq_len, a, dh);
                            let qh = slice_head(&bc.q, n, seq_len, a, dh);
                            let kh = slice_head(&bc.k, n, seq_len, a, dh);
                            let vh = slice_head(&bc.v, n, seq_len, a, dh);
                            let d_p = dch.matmul_nt(&vh);
                            let d_vh = p.matmul_tn(&dch);
                            let d_scores = softmax_rows_backward(p, &d_p).scale(scale);
                            let d_qh = d_scores.matmul_nn(&kh);
                            let d_kh = d_scores.matmul_tn(&qh);
                            for i in 0..seq_len {
                                for j in 0..dh {
                                    d_q[(n * seq_len + i, a * dh + j)] = d_qh[(i, j)];
                                    d_k[(n * seq_len + i, a * dh + j)] = d_kh[(i, j)];
                                    d_v[(n * seq_len + i, a * dh + j)] = d_vh[(i, j)];
                                }
                            }
                        }
                    }

                    let g_q = gated_backward(&self.layers[l0], &cache.gated[l0], &d_q)?;
                    let g_k = gated_backward(&self.layers[l0 + 1], &cache.gated[l0 + 1], &d_k)?;
                    let g_v = gated_backward(&self.layers[l0 + 2], &cache.gated[l0 + 2], &d_v)?;
                    let mut d_ln1 = g_q.d_x.clone();
                    d_ln1.add_assign(&g_k.d_x);
                    d_ln1.add_assign(&g_v.d_x);
                    let d_res = self.lns[2 * b].backward(&bc.ln1, &d_ln1);
                    d_x.add_assign(&d_res);
                    layer_grads[l0] = Some(g_q);
                    layer_grads[l0 + 1] = Some(g_k);
                    layer_grads[l0 + 2] = Some(g_v);
                }

                Ok(ModelGrads {
                    layers: layer_grads.into_iter().map(|g| g.expect("filled")).collect(),
                    head: head_grads,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::SparsityObjective;

    fn objective() -> SparsityObjective<f64> {
        SparsityObjective::new(0.0, 0.4)
    }

    #[test]
    fn mlp_structural_counts() {
        let m = build_mlp::<f64>(&[100, 64, 10], 3, objective(), TaskKind::Classification, 0.5, 0)
            .unwrap();
        assert_eq!(m.layers.len(), 2);
        assert_eq!(m.num_gated(), 2);
        assert_eq!(m.layers[0].w0.rows(), 64);
        assert_eq!(m.layers[0].w0.cols(), 100);
        assert_eq!(m.layers[1].w0.rows(), 10);
        assert_eq!(m.layers[1].w0.cols(), 64);
        assert_eq!(m.head.w.rows(), 3);
        assert_eq!(m.head.w.cols(), 10);
        let counts = m.param_counts();
        assert_eq!(counts.gates, (64 + 100) + (10 + 64));
        assert_eq!(counts.biases, 74);
        assert!(counts.trainable() < counts.frozen);
    }

    #[test]
    fn transformer_structural_counts() {
        let m = build_transformer::<f64>(
            50, 4, 32, 2, 64, 1, 3, true, objective(), TaskKind::Classification, 0.5, 0,
        )
        .unwrap();
        assert_eq!(m.layers.len(), 6);
        assert_eq!(m.num_gated(), 6);
        let m2 = build_transformer::<f64>(
            50, 4, 32, 2, 64, 1, 3, false, objective(), TaskKind::Classification, 0.5, 0,
        )
        .unwrap();
        assert_eq!(m2.num_gated(), 4);
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(build_mlp::<f64>(&[10], 2, objective(), TaskKind::Classification, 0.5, 0).is_err());
        assert!(build_transformer::<f64>(
            50, 4, 30, 4, 64, 1, 3, true, objective(), TaskKind::Classification, 0.5, 0
        )
        .is_err());
    }

    #[test]
    fn identical_seeds_build_identical_models() {
        let a = build_transformer::<f64>(
            50, 4, 32, 2, 64, 1, 3, true, objective(), TaskKind::Classification, 0.5, 9,
        )
        .unwrap();
        let b = build_transformer::<f64>(
            50, 4, 32, 2, 64, 1, 3, true, objective(), TaskKind::Classification, 0.5, 9,
        )
        .unwrap();
        assert_eq!(a.frozen_hash(), b.frozen_hash());
        assert_eq!(a.layers[3].w0.data(), b.layers[3].w0.data());
    }
}
