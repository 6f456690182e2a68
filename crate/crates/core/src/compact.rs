//! Hard compaction: binarize trained gates, physically remove dead rows and
//! columns (plus zero-propagated downstream columns), and verify that the
//! compact model reproduces the masked forward pass exactly.
//!
//! The accumulation kernels add strictly in index order, so dropping terms
//! that are exactly zero leaves every surviving partial sum bit-identical;
//! in 64-bit mode the verifier typically reports a deviation of exactly 0.

use crate::gates::deterministic_gates;
use crate::layers::{gelu_forward, GateRealization, Linear};
use crate::matrix::Matrix;
use crate::model::{
    softmax_rows, Arch, Container, GatedModel, InputRef, LayerNorm, ModelCheckpointError,
    ModelError, NamedTensor, TaskKind,
};
use crate::precision::{re, Real};
use crate::rng::RngStream;
use crate::train::TrainRun;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CompactError {
    #[error("layer {0} lost all rows or all columns; lower lambda or the sparsity target")]
    EmptyLayer(String),
    #[error("gate snapshots were disabled for this run")]
    SnapshotsMissing,
    #[error("structural removal is unsound with low-rank extensions attached (the low-rank term is full-width)")]
    LowRankUnsupported,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] ModelCheckpointError),
}

/// Mask-selection rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CompactionPolicy {
    /// Keep a gate iff its deterministic value exceeds `tau` (strict).
    Tau(f64),
    /// Keep a gate iff its deterministic value is nonzero; removes only
    /// coordinates that are exactly dead in evaluation mode.
    Support,
}

impl CompactionPolicy {
    pub fn name(&self) -> String {
        match self {
            CompactionPolicy::Tau(t) => format!("tau={t}"),
            CompactionPolicy::Support => "support".into(),
        }
    }
}

/// 0/1 masks per gated layer (aligned with `model.layers`; unadapted layers
/// get all-ones), plus the binary-convergence diagnostic.
#[derive(Debug, Clone)]
pub struct Binarized<T> {
    pub masks: Vec<(Vec<T>, Vec<T>)>,
    /// Count of deterministic gate values in (0.05, 0.95): gates that have
    /// not converged toward either end.
    pub ambiguity_mass: usize,
}

pub fn binarize<T: Real>(model: &GatedModel<T>, policy: CompactionPolicy) -> Binarized<T> {
    let mut ambiguity = 0usize;
    let keep = |det: f64| -> bool {
        match policy {
            CompactionPolicy::Tau(tau) => det > tau,
            CompactionPolicy::Support => det > 0.0,
        }
    };
    let masks = model
        .layers
        .iter()
        .map(|layer| {
            if !layer.adapted {
                return (
                    vec![T::one(); layer.out_dim()],
                    vec![T::one(); layer.in_dim()],
                );
            }
            let mut mask_axis = |g: &crate::gates::StochasticGateVector<T>| -> Vec<T> {
                deterministic_gates(g)
                    .into_iter()
                    .map(|v| {
                        let det = v.to_f64_();
                        if det > 0.05 && det < 0.95 {
                            ambiguity += 1;
                        }
                        if keep(det) {
                            T::one()
                        } else {
                            T::zero()
                        }
                    })
                    .collect()
            };
            (mask_axis(&layer.gate_r), mask_axis(&layer.gate_c))
        })
        .collect();
    Binarized { masks, ambiguity_mass: ambiguity }
}

// ---------------------------------------------------------------------------
// compact model structures
// ---------------------------------------------------------------------------

/// One pruned projection: weight over kept rows x kept cols, bias over kept
/// rows, a gather map into the incoming feature vector, and a scatter map
/// carrying the surviving global row ids with the original full width.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactProj<T> {
    pub w: Matrix<T>,
    pub bias: Vec<T>,
    pub in_map: Vec<u32>,
    pub out_map: Vec<u32>,
    pub out_full: usize,
}

impl<T: Real> CompactProj<T> {
    fn gather_cols(&self, x: &Matrix<T>) -> Matrix<T> {
        Matrix::from_fn(x.rows(), self.in_map.len(), |i, j| {
            x[(i, self.in_map[j] as usize)]
        })
    }

    /// `gather(x) · wᵀ + bias`.
    pub fn forward_gathered(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut h = self.gather_cols(x).matmul_nt(&self.w);
        for i in 0..h.rows() {
            for (j, v) in h.row_mut(i).iter_mut().enumerate() {
                *v += self.bias[j];
            }
        }
        h
    }

    /// Forward when the incoming features are already in this layer's
    /// compact input space (`in_map` is the identity).
    pub fn forward_direct(&self, x: &Matrix<T>) -> Matrix<T> {
        debug_assert_eq!(x.cols(), self.w.cols());
        let mut h = x.matmul_nt(&self.w);
        for i in 0..h.rows() {
            for (j, v) in h.row_mut(i).iter_mut().enumerate() {
                *v += self.bias[j];
            }
        }
        h
    }

    fn scatter_add_into(&self, h: &Matrix<T>, target: &mut Matrix<T>) {
        for i in 0..h.rows() {
            for (j, &id) in self.out_map.iter().enumerate() {
                target[(i, id as usize)] += h[(i, j)];
            }
        }
    }

    pub fn params(&self) -> usize {
        self.w.rows() * self.w.cols() + self.bias.len()
    }
}

#[derive(Debug, Clone)]
pub struct CompactBlock<T> {
    pub wq: CompactProj<T>,
    pub wk: CompactProj<T>,
    pub wv: CompactProj<T>,
    pub wo: CompactProj<T>,
    pub mlp_i: CompactProj<T>,
    pub mlp_o: CompactProj<T>,
    /// Kept query/key dims per head, as offsets into the compact feature
    /// space: head `a` owns `qk_offsets[a]..qk_offsets[a+1]`.
    pub qk_offsets: Vec<usize>,
    pub vo_offsets: Vec<usize>,
}

#[derive(Debug, Clone)]
pub enum CompactBody<T> {
    Mlp {
        layers: Vec<CompactProj<T>>,
        head: Linear<T>,
    },
    Transformer {
        embed: Matrix<T>,
        lns: Vec<LayerNorm<T>>,
        blocks: Vec<CompactBlock<T>>,
        head: Linear<T>,
    },
}

#[derive(Debug, Clone)]
pub struct CompactModel<T> {
    /// The original (pre-compaction) architecture.
    pub arch: Arch,
    pub task: TaskKind,
    pub body: CompactBody<T>,
}

#[derive(Debug, Clone)]
pub struct LayerCompaction {
    pub name: String,
    pub rows_kept: usize,
    pub rows_total: usize,
    pub cols_kept: usize,
    pub cols_total: usize,
    pub params_removed: usize,
    pub params_total: usize,
}

#[derive(Debug, Clone)]
pub struct CompactionReport {
    pub layers: Vec<LayerCompaction>,
    pub removed_params: usize,
    pub total_params: usize,
    pub removed_fraction: f64,
    pub ambiguity_mass: usize,
    pub policy: String,
    pub dtype: &'static str,
    /// Reference shape for timing comparisons (no measured times here; the
    /// report must be byte-stable across runs).
    pub timing_reference: String,
    pub equivalence_max_abs: Option<f64>,
}

impl CompactionReport {
    /// Aligned human-readable table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<14} {:>10} {:>10} {:>12} {:>12}",
            "layer", "rows", "cols", "removed", "total"
        );
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<14} {:>4}/{:<5} {:>4}/{:<5} {:>12} {:>12}",
                l.name,
                l.rows_kept,
                l.rows_total,
                l.cols_kept,
                l.cols_total,
                l.params_removed,
                l.params_total
            );
        }
        let _ = writeln!(
            s,
            "removed {} of {} parameters ({:.2}%), policy {}, ambiguity mass {}",
            self.removed_params,
            self.total_params,
            100.0 * self.removed_fraction,
            self.policy,
            self.ambiguity_mass
        );
        if let Some(eq) = self.equivalence_max_abs {
            let _ = writeln!(s, "equivalence max |masked - compact| = {eq:.3e}");
        }
        s
    }

    /// Machine-readable block (key=value lines).
    pub fn to_machine(&self) -> String {
        let mut s = String::new();
        for l in &self.layers {
            let _ = writeln!(
                s,
                "layer={} rows_kept={} rows_total={} cols_kept={} cols_total={} removed={} total={}",
                l.name, l.rows_kept, l.rows_total, l.cols_kept, l.cols_total,
                l.params_removed, l.params_total
            );
        }
        let _ = writeln!(s, "removed_params={}", self.removed_params);
        let _ = writeln!(s, "total_params={}", self.total_params);
        let _ = writeln!(s, "removed_fraction={:.6}", self.removed_fraction);
        let _ = writeln!(s, "ambiguity_mass={}", self.ambiguity_mass);
        let _ = writeln!(s, "policy={}", self.policy);
        let _ = writeln!(s, "dtype={}", self.dtype);
        let _ = writeln!(s, "timing_reference={}", self.timing_reference);
        if let Some(eq) = self.equivalence_max_abs {
            let _ = writeln!(s, "equivalence_max_abs={eq:.16e}");
        }
        s
    }
}

// ---------------------------------------------------------------------------
// compaction
// ---------------------------------------------------------------------------

fn kept_ids<T: Real>(mask: &[T]) -> Vec<u32> {
    mask.iter()
        .enumerate()
        .filter(|(_, &m)| m != T::zero())
        .map(|(i, _)| i as u32)
        .collect()
}

fn and_ids<T: Real>(a: &[T], b: &[T]) -> Vec<u32> {
    a.iter()
        .zip(b)
        .enumerate()
        .filter(|(_, (&x, &y))| x != T::zero() && y != T::zero())
        .map(|(i, _)| i as u32)
        .collect()
}

/// Builds a pruned projection from a gated layer: rows from `row_ids`, cols
/// from `col_ids` (ids in the layer's own coordinate space), with `in_map`
/// translating the kept columns into the incoming compact feature space.
fn build_proj<T: Real>(
    layer: &crate::layers::GatedLinear<T>,
    row_ids: &[u32],
    col_ids: &[u32],
    in_map: Vec<u32>,
    apply_masks: Option<(&[T], &[T])>,
) -> CompactProj<T> {
    debug_assert_eq!(in_map.len(), col_ids.len());
    let w = Matrix::from_fn(row_ids.len(), col_ids.len(), |i, j| {
        let (r, c) = (row_ids[i] as usize, col_ids[j] as usize);
        match apply_masks {
            Some((mr, mc)) => mr[r] * layer.w0[(r, c)] * mc[c],
            None => layer.w0[(r, c)],
        }
    });
    let bias = row_ids
        .iter()
        .map(|&r| match apply_masks {
            Some((mr, _)) => mr[r as usize] * layer.bias[r as usize],
            None => layer.bias[r as usize],
        })
        .collect();
    CompactProj {
        w,
        bias,
        in_map,
        out_map: row_ids.to_vec(),
        out_full: layer.out_dim(),
    }
}

fn identity_ids(n: usize) -> Vec<u32> {
    (0..n as u32).collect()
}

/// Removes dead rows/columns per the masks, propagating exact zeros:
/// a masked-off output row produces an identically-zero feature, so every
/// downstream column consuming it is dropped regardless of its own mask.
pub fn compact_model<T: Real>(
    model: &GatedModel<T>,
    bin: &Binarized<T>,
) -> Result<(CompactModel<T>, CompactionReport), CompactError> {
    build_compact(model, bin, true)
}

/// Same structures with nothing dropped: masks are baked into full-size
/// weights and every index map is the identity. This is the masked-dense
/// reference the benchmark times, so both variants share one forward code
/// path and differ only in dimensions.
pub fn masked_dense_model<T: Real>(
    model: &GatedModel<T>,
    bin: &Binarized<T>,
) -> Result<CompactModel<T>, CompactError> {
    Ok(build_compact(model, bin, false)?.0)
}

fn build_compact<T: Real>(
    model: &GatedModel<T>,
    bin: &Binarized<T>,
    drop: bool,
) -> Result<(CompactModel<T>, CompactionReport), CompactError> {
    if model.layers.iter().any(|l| l.lowrank.is_some()) {
        return Err(CompactError::LowRankUnsupported);
    }
    assert_eq!(bin.masks.len(), model.layers.len(), "mask set mismatch");
    let mut report_layers: Vec<LayerCompaction> = Vec::new();
    let mut push_report = |name: String, p: &CompactProj<T>, rows_total: usize, cols_total: usize| {
        let total = rows_total * cols_total + rows_total;
        let kept = p.w.rows() * p.w.cols() + p.bias.len();
        report_layers.push(LayerCompaction {
            name,
            rows_kept: p.w.rows(),
            rows_total,
            cols_kept: p.w.cols(),
            cols_total,
            params_removed: total - kept,
            params_total: total,
        });
    };

    let body = match &model.arch {
        Arch::Mlp { widths, .. } => {
            let mut layers = Vec::new();
            // feature ids alive in the incoming representation, in compact order
            let mut alive_in: Vec<u32> = identity_ids(widths[0]);
            for (i, layer) in model.layers.iter().enumerate() {
                let (mr, mc) = &bin.masks[i];
                let (row_ids, col_global, in_map) = if drop {
                    let row_ids = kept_ids(mr);
                    // keep a column only if its own mask is on AND the
                    // upstream feature is alive
                    let mut col_global = Vec::new();
                    let mut in_map = Vec::new();
                    for (pos, &gid) in alive_in.iter().enumerate() {
                        if mc[gid as usize] != T::zero() {
                            col_global.push(gid);
                            in_map.push(pos as u32);
                        }
                    }
                    (row_ids, col_global, in_map)
                } else {
                    (
                        identity_ids(layer.out_dim()),
                        identity_ids(layer.in_dim()),
                        identity_ids(layer.in_dim()),
                    )
                };
                if row_ids.is_empty() || col_global.is_empty() {
                    return Err(CompactError::EmptyLayer(format!("layer{i}")));
                }
                let proj = build_proj(
                    layer,
                    &row_ids,
                    &col_global,
                    in_map,
                    if drop { None } else { Some((mr.as_slice(), mc.as_slice())) },
                );
                push_report(format!("layer{i}"), &proj, layer.out_dim(), layer.in_dim());
                alive_in = row_ids;
                layers.push(proj);
            }
            // ungated head: gather the columns of surviving features
            let head_w = if drop {
                Matrix::from_fn(model.head.w.rows(), alive_in.len(), |i, j| {
                    model.head.w[(i, alive_in[j] as usize)]
                })
            } else {
                model.head.w.clone()
            };
            report_layers.push(LayerCompaction {
                name: "head".into(),
                rows_kept: head_w.rows(),
                rows_total: model.head.w.rows(),
                cols_kept: head_w.cols(),
                cols_total: model.head.w.cols(),
                params_removed: model.head.w.rows() * (model.head.w.cols() - head_w.cols()),
                params_total: model.head.w.rows() * model.head.w.cols()
                    + model.head.bias.len(),
            });
            CompactBody::Mlp {
                layers,
                head: Linear { w: head_w, bias: model.head.bias.clone() },
            }
        }
        Arch::Transformer { d_model, n_heads, n_blocks, .. } => {
            let dh = d_model / n_heads;
            let mut blocks = Vec::new();
            for b in 0..*n_blocks {
                let l0 = 6 * b;
                let (mr_q, mc_q) = &bin.masks[l0];
                let (mr_k, mc_k) = &bin.masks[l0 + 1];
                let (mr_v, mc_v) = &bin.masks[l0 + 2];
                let (mr_o, mc_o) = &bin.masks[l0 + 3];
                let (mr_i, mc_i) = &bin.masks[l0 + 4];
                let (mr_oo, mc_oo) = &bin.masks[l0 + 5];

                // query/key dims pair inside the score dot product; a dim
                // contributes zero if either side is dead
                let qk_ids = if drop { and_ids(mr_q, mr_k) } else { identity_ids(*d_model) };
                // value dims pair with the output projection's columns
                let vo_ids = if drop { and_ids(mr_v, mc_o) } else { identity_ids(*d_model) };
                let stream_ids = |mask: &[T]| -> Vec<u32> {
                    if drop { kept_ids(mask) } else { identity_ids(mask.len()) }
                };

                fn masks_or<'a, S>(drop: bool, r: &'a [S], c: &'a [S]) -> Option<(&'a [S], &'a [S])> {
                    if drop { None } else { Some((r, c)) }
                }

                let q_cols = stream_ids(mc_q);
                let wq = build_proj(
                    &model.layers[l0],
                    &qk_ids,
                    &q_cols,
                    q_cols.clone(),
                    masks_or(drop, mr_q, mc_q),
                );
                let k_cols = stream_ids(mc_k);
                let wk = build_proj(
                    &model.layers[l0 + 1],
                    &qk_ids,
                    &k_cols,
                    k_cols.clone(),
                    masks_or(drop, mr_k, mc_k),
                );
                let v_cols = stream_ids(mc_v);
                let wv = build_proj(
                    &model.layers[l0 + 2],
                    &vo_ids,
                    &v_cols,
                    v_cols.clone(),
                    masks_or(drop, mr_v, mc_v),
                );
                let o_rows = stream_ids(mr_o);
                // wo reads the compact ctx directly: its kept columns are
                // exactly the vo dims, already in compact order
                let wo = build_proj(
                    &model.layers[l0 + 3],
                    &o_rows,
                    &vo_ids,
                    identity_ids(vo_ids.len()),
                    masks_or(drop, mr_o, mc_o),
                );
                // FFN hidden dims pair mlp_i rows with mlp_o columns
                let ff_ids = if drop { and_ids(mr_i, mc_oo) } else { identity_ids(mr_i.len()) };
                let i_cols = stream_ids(mc_i);
                let mlp_i = build_proj(
                    &model.layers[l0 + 4],
                    &ff_ids,
                    &i_cols,
                    i_cols.clone(),
                    masks_or(drop, mr_i, mc_i),
                );
                let oo_rows = stream_ids(mr_oo);
                let mlp_o = build_proj(
                    &model.layers[l0 + 5],
                    &oo_rows,
                    &ff_ids,
                    identity_ids(ff_ids.len()),
                    masks_or(drop, mr_oo, mc_oo),
                );

                for (name, p) in [
                    (format!("block{b}.wq"), &wq),
                    (format!("block{b}.wk"), &wk),
                    (format!("block{b}.wv"), &wv),
                    (format!("block{b}.wo"), &wo),
                    (format!("block{b}.mlp_i"), &mlp_i),
                    (format!("block{b}.mlp_o"), &mlp_o),
                ] {
                    if p.w.rows() == 0 || p.w.cols() == 0 {
                        return Err(CompactError::EmptyLayer(name));
                    }
                }

                let offsets = |ids: &[u32]| -> Vec<usize> {
                    let mut off = vec![0usize; n_heads + 1];
                    for &id in ids {
                        off[(id as usize) / dh + 1] += 1;
                    }
                    for a in 0..*n_heads {
                        off[a + 1] += off[a];
                    }
                    off
                };
                let qk_offsets = offsets(&qk_ids);
                let vo_offsets = offsets(&vo_ids);

                for (name, p, l) in [
                    ("wq", &wq, l0),
                    ("wk", &wk, l0 + 1),
                    ("wv", &wv, l0 + 2),
                    ("wo", &wo, l0 + 3),
                    ("mlp_i", &mlp_i, l0 + 4),
                    ("mlp_o", &mlp_o, l0 + 5),
                ] {
                    push_report(
                        format!("block{b}.{name}"),
                        p,
                        model.layers[l].out_dim(),
                        model.layers[l].in_dim(),
                    );
                }

                blocks.push(CompactBlock {
                    wq,
                    wk,
                    wv,
                    wo,
                    mlp_i,
                    mlp_o,
                    qk_offsets,
                    vo_offsets,
                });
            }
            CompactBody::Transformer {
                embed: model.embed.clone().expect("transformer embedding"),
                lns: model.lns.clone(),
                blocks,
                head: model.head.clone(),
            }
        }
    };

    let removed: usize = report_layers.iter().map(|l| l.params_removed).sum();
    let total: usize = report_layers.iter().map(|l| l.params_total).sum();
    let report = CompactionReport {
        layers: report_layers,
        removed_params: removed,
        total_params: total,
        removed_fraction: removed as f64 / total as f64,
        ambiguity_mass: bin.ambiguity_mass,
        policy: String::new(),
        dtype: T::DTYPE.name(),
        timing_reference: match &model.arch {
            Arch::Mlp { widths, .. } => format!(
                "mlp widths={:?} dtype={}",
                widths,
                T::DTYPE.name()
            ),
            Arch::Transformer { seq_len, d_model, .. } => format!(
                "transformer seq_len={seq_len} d_model={d_model} dtype={}",
                T::DTYPE.name()
            ),
        },
        equivalence_max_abs: None,
    };
    Ok((
        CompactModel { arch: model.arch.clone(), task: model.task, body },
        report,
    ))
}

// ---------------------------------------------------------------------------
// compact forward
// ---------------------------------------------------------------------------

impl<T: Real> CompactModel<T> {
    pub fn forward(&self, input: &InputRef<'_, T>) -> Result<Matrix<T>, ModelError> {
        match (&self.body, input) {
            (CompactBody::Mlp { layers, head }, InputRef::Dense(x)) => {
                let mut cur: Matrix<T> = (*x).clone();
                for proj in layers {
                    cur = gelu_forward(&proj.forward_gathered(&cur));
                }
                Ok(head.forward(&cur))
            }
            (CompactBody::Transformer { embed, lns, blocks, head }, InputRef::Tokens(ids)) => {
                let (seq_len, d_model, n_heads) = match &self.arch {
                    Arch::Transformer { seq_len, d_model, n_heads, .. } => {
                        (*seq_len, *d_model, *n_heads)
                    }
                    _ => unreachable!("transformer body carries transformer arch"),
                };
                if ids.is_empty() || ids.len() % seq_len != 0 {
                    return Err(ModelError::ShapeMismatch(format!(
                        "token count {} not a multiple of seq_len {seq_len}",
                        ids.len()
                    )));
                }
                let batch = ids.len() / seq_len;
                let dh = d_model / n_heads;
                let scale = re::<T>(1.0 / (dh as f64).sqrt());
                let mut x =
                    Matrix::from_fn(ids.len(), d_model, |i, j| embed[(ids[i] as usize, j)]);
                for (b, blk) in blocks.iter().enumerate() {
                    let (normed1, _) = lns[2 * b].forward(&x);
                    let q = blk.wq.forward_gathered(&normed1);
                    let k = blk.wk.forward_gathered(&normed1);
                    let v = blk.wv.forward_gathered(&normed1);
                    let mut ctx = Matrix::zeros(ids.len(), blk.vo_offsets[n_heads]);
                    for n in 0..batch {
                        for a in 0..n_heads {
                            let (q0, q1) = (blk.qk_offsets[a], blk.qk_offsets[a + 1]);
                            let (v0, v1) = (blk.vo_offsets[a], blk.vo_offsets[a + 1]);
                            let qh =
                                Matrix::from_fn(seq_len, q1 - q0, |i, j| q[(n * seq_len + i, q0 + j)]);
                            let kh =
                                Matrix::from_fn(seq_len, q1 - q0, |i, j| k[(n * seq_len + i, q0 + j)]);
                            let vh =
                                Matrix::from_fn(seq_len, v1 - v0, |i, j| v[(n * seq_len + i, v0 + j)]);
                            let scores = qh.matmul_nt(&kh).scale(scale);
                            let p = softmax_rows(&scores);
                            let c = p.matmul_nn(&vh);
                            for i in 0..seq_len {
                                for j in 0..(v1 - v0) {
                                    ctx[(n * seq_len + i, v0 + j)] = c[(i, j)];
                                }
                            }
                        }
                    }
                    let attn = blk.wo.forward_direct(&ctx);
                    blk.wo.scatter_add_into(&attn, &mut x);

                    let (normed2, _) = lns[2 * b + 1].forward(&x);
                    let f1 = gelu_forward(&blk.mlp_i.forward_gathered(&normed2));
                    let f2 = blk.mlp_o.forward_direct(&f1);
                    blk.mlp_o.scatter_add_into(&f2, &mut x);
                }
                let inv_t = re::<T>(1.0 / seq_len as f64);
                let pooled = Matrix::from_fn(batch, d_model, |n, j| {
                    let mut s = T::zero();
                    for i in 0..seq_len {
                        s += x[(n * seq_len + i, j)];
                    }
                    s * inv_t
                });
                Ok(head.forward(&pooled))
            }
            _ => Err(ModelError::ShapeMismatch(
                "input kind does not match compact architecture".into(),
            )),
        }
    }

    /// Dense model over the pruned dimensions (MLP only): the compact
    /// weights become frozen base weights with fresh open gates.
    pub fn redensify(&self, sigma: f64) -> Option<GatedModel<T>> {
        match &self.body {
            CompactBody::Mlp { layers, head } => {
                let mut widths = vec![layers[0].in_map.len()];
                for p in layers {
                    widths.push(p.w.rows());
                }
                let glayers = layers
                    .iter()
                    .map(|p| {
                        crate::layers::GatedLinear::new(p.w.clone(), p.bias.clone(), sigma)
                    })
                    .collect();
                Some(GatedModel {
                    arch: Arch::Mlp { widths, head_out: head.w.rows() },
                    task: self.task,
                    layers: glayers,
                    head: head.clone(),
                    embed: None,
                    lns: vec![],
                    objective: crate::gates::SparsityObjective::new(T::zero(), 0.0),
                    sigma,
                })
            }
            CompactBody::Transformer { .. } => None,
        }
    }
}

// ---------------------------------------------------------------------------
// equivalence verification
// ---------------------------------------------------------------------------

/// Random input batch matching the model's architecture.
pub fn sample_inputs<T: Real>(arch: &Arch, n: usize, rng: &mut RngStream) -> crate::data::BatchInput<T> {
    match arch {
        Arch::Mlp { widths, .. } => crate::data::BatchInput::Dense(Matrix::from_fn(
            n,
            widths[0],
            |_, _| re(rng.next_gauss()),
        )),
        Arch::Transformer { vocab, seq_len, .. } => {
            let ids = (0..n * seq_len)
                .map(|_| rng.next_below(*vocab) as u32)
                .collect();
            crate::data::BatchInput::Tokens { ids, seq_len: *seq_len }
        }
    }
}

/// Max absolute deviation between the masked (binary-mode) forward of the
/// original model and the compact forward, over `n_samples` random inputs.
pub fn verify_equivalence<T: Real>(
    model: &GatedModel<T>,
    bin: &Binarized<T>,
    compact: &CompactModel<T>,
    n_samples: usize,
    seed: u64,
) -> Result<f64, CompactError> {
    let mut rng = RngStream::new(seed).substream(0xe9);
    let batch = 8usize;
    let mut worst = 0.0f64;
    let mut done = 0usize;
    while done < n_samples {
        let n = batch.min(n_samples - done);
        let input = sample_inputs::<T>(&model.arch, n, &mut rng);
        let iref = input.as_input_ref();
        let (masked, _) =
            model.forward(&iref, &mut GateRealization::Masked(&bin.masks))?;
        let compacted = compact.forward(&iref)?;
        worst = worst.max(masked.max_abs_diff(&compacted));
        done += n;
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// gate statistics
// ---------------------------------------------------------------------------

/// Mean deterministic gate value per adapted layer per epoch (rows, cols).
/// Row 0 is the initialization snapshot.
#[derive(Debug, Clone)]
pub struct GateStats {
    pub epochs: Vec<usize>,
    /// `per_layer[l][e]` pairs up with `epochs[e]`.
    pub per_layer: Vec<Vec<(f64, f64)>>,
}

impl GateStats {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<8}", "epoch");
        for l in 0..self.per_layer.len() {
            let _ = write!(s, " {:>17}", format!("layer{l} (r/c)"));
        }
        let _ = writeln!(s);
        for (e, &epoch) in self.epochs.iter().enumerate() {
            let _ = write!(s, "{epoch:<8}");
            for layer in &self.per_layer {
                let (r, c) = layer[e];
                let _ = write!(s, " {:>17}", format!("{r:.4}/{c:.4}"));
            }
            let _ = writeln!(s);
        }
        s
    }
}

pub fn gate_statistics<T: Real>(run: &TrainRun<T>) -> Result<GateStats, CompactError> {
    if !run.snapshots_enabled {
        return Err(CompactError::SnapshotsMissing);
    }
    let l = run.init_gate_means.len();
    let mut per_layer = vec![Vec::with_capacity(run.records.len() + 1); l];
    for (i, &means) in run.init_gate_means.iter().enumerate() {
        per_layer[i].push(means);
    }
    let mut epochs = vec![0usize];
    for r in &run.records {
        epochs.push(r.epoch);
        for (i, &means) in r.gate_means.iter().enumerate() {
            per_layer[i].push(means);
        }
    }
    Ok(GateStats { epochs, per_layer })
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

impl<T: Real> CompactModel<T> {
    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.push_meta("kind", "compact");
        c.push_meta("dtype", T::DTYPE.name());
        c.push_meta("task", self.task.name());
        match &self.arch {
            Arch::Mlp { widths, head_out } => {
                c.push_meta("arch", "mlp");
                c.push_meta(
                    "widths",
                    widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
                );
                c.push_meta("head_out", head_out);
            }
            Arch::Transformer {
                vocab, seq_len, d_model, n_heads, d_ff, n_blocks, head_out, gate_mlp,
            } => {
                c.push_meta("arch", "transformer");
                c.push_meta("vocab", vocab);
                c.push_meta("seq_len", seq_len);
                c.push_meta("d_model", d_model);
                c.push_meta("n_heads", n_heads);
                c.push_meta("d_ff", d_ff);
                c.push_meta("n_blocks", n_blocks);
                c.push_meta("head_out", head_out);
                c.push_meta("gate_mlp", u8::from(*gate_mlp));
            }
        }
        let push_proj = |c: &mut Container, name: &str, p: &CompactProj<T>| {
            c.tensors.push(NamedTensor::from_scalars(
                &format!("{name}.w"),
                vec![p.w.rows(), p.w.cols()],
                p.w.data(),
            ));
            c.tensors.push(NamedTensor::from_scalars(
                &format!("{name}.bias"),
                vec![p.bias.len()],
                &p.bias,
            ));
            c.tensors
                .push(NamedTensor::from_indices(&format!("{name}.in_map"), &p.in_map));
            c.tensors
                .push(NamedTensor::from_indices(&format!("{name}.out_map"), &p.out_map));
            c.push_meta(&format!("{name}.out_full"), p.out_full);
        };
        match &self.body {
            CompactBody::Mlp { layers, head } => {
                c.push_meta("n_compact_layers", layers.len());
                let mut cc = std::mem::take(&mut c);
                for (i, p) in layers.iter().enumerate() {
                    push_proj(&mut cc, &format!("clayer{i}"), p);
                }
                cc.tensors.push(NamedTensor::from_scalars(
                    "head.w",
                    vec![head.w.rows(), head.w.cols()],
                    head.w.data(),
                ));
                cc.tensors.push(NamedTensor::from_scalars(
                    "head.bias",
                    vec![head.bias.len()],
                    &head.bias,
                ));
                cc
            }
            CompactBody::Transformer { embed, lns, blocks, head } => {
                let mut cc = std::mem::take(&mut c);
                cc.tensors.push(NamedTensor::from_scalars(
                    "embed",
                    vec![embed.rows(), embed.cols()],
                    embed.data(),
                ));
                for (i, ln) in lns.iter().enumerate() {
                    cc.tensors.push(NamedTensor::from_scalars(
                        &format!("ln{i}.gain"),
                        vec![ln.gain.len()],
                        &ln.gain,
                    ));
                    cc.tensors.push(NamedTensor::from_scalars(
                        &format!("ln{i}.bias"),
                        vec![ln.bias.len()],
                        &ln.bias,
                    ));
                }
                for (b, blk) in blocks.iter().enumerate() {
                    for (name, p) in [
                        ("wq", &blk.wq),
                        ("wk", &blk.wk),
                        ("wv", &blk.wv),
                        ("wo", &blk.wo),
                        ("mlp_i", &blk.mlp_i),
                        ("mlp_o", &blk.mlp_o),
                    ] {
                        push_proj(&mut cc, &format!("block{b}.{name}"), p);
                    }
                }
                cc.tensors.push(NamedTensor::from_scalars(
                    "head.w",
                    vec![head.w.rows(), head.w.cols()],
                    head.w.data(),
                ));
                cc.tensors.push(NamedTensor::from_scalars(
                    "head.bias",
                    vec![head.bias.len()],
                    &head.bias,
                ));
                cc
            }
        }
    }

    pub fn from_container(c: &Container) -> Result<CompactModel<T>, ModelCheckpointError> {
        if c.require_meta("kind")? != "compact" {
            return Err(ModelCheckpointError::Malformed(
                "not a compact-model checkpoint".into(),
            ));
        }
        let task = match c.require_meta("task")? {
            "classification" => TaskKind::Classification,
            "regression" => TaskKind::Regression,
            other => {
                return Err(ModelCheckpointError::Malformed(format!("unknown task {other}")))
            }
        };
        let parse_usize = |s: &str| -> Result<usize, ModelCheckpointError> {
            s.parse::<usize>()
                .map_err(|_| ModelCheckpointError::Malformed(format!("bad integer {s}")))
        };
        let load_proj = |name: &str| -> Result<CompactProj<T>, ModelCheckpointError> {
            Ok(CompactProj {
                w: c.tensor(&format!("{name}.w"))?.to_matrix()?,
                bias: c.tensor(&format!("{name}.bias"))?.to_scalars()?,
                in_map: c.tensor(&format!("{name}.in_map"))?.to_indices()?,
                out_map: c.tensor(&format!("{name}.out_map"))?.to_indices()?,
                out_full: parse_usize(c.require_meta(&format!("{name}.out_full"))?)?,
            })
        };
        let head = Linear {
            w: c.tensor("head.w")?.to_matrix()?,
            bias: c.tensor("head.bias")?.to_scalars()?,
        };
        match c.require_meta("arch")? {
            "mlp" => {
                let widths: Vec<usize> = c
                    .require_meta("widths")?
                    .split(',')
                    .map(parse_usize)
                    .collect::<Result<_, _>>()?;
                let n = parse_usize(c.require_meta("n_compact_layers")?)?;
                let mut layers = Vec::with_capacity(n);
                for i in 0..n {
                    layers.push(load_proj(&format!("clayer{i}"))?);
                }
                Ok(CompactModel {
                    arch: Arch::Mlp {
                        widths,
                        head_out: parse_usize(c.require_meta("head_out")?)?,
                    },
                    task,
                    body: CompactBody::Mlp { layers, head },
                })
            }
            "transformer" => {
                let vocab = parse_usize(c.require_meta("vocab")?)?;
                let seq_len = parse_usize(c.require_meta("seq_len")?)?;
                let d_model = parse_usize(c.require_meta("d_model")?)?;
                let n_heads = parse_usize(c.require_meta("n_heads")?)?;
                let d_ff = parse_usize(c.require_meta("d_ff")?)?;
                let n_blocks = parse_usize(c.require_meta("n_blocks")?)?;
                let head_out = parse_usize(c.require_meta("head_out")?)?;
                let gate_mlp = c.require_meta("gate_mlp")? == "1";
                let embed: Matrix<T> = c.tensor("embed")?.to_matrix()?;
                let mut lns = Vec::new();
                for i in 0..(2 * n_blocks) {
                    lns.push(LayerNorm {
                        gain: c.tensor(&format!("ln{i}.gain"))?.to_scalars()?,
                        bias: c.tensor(&format!("ln{i}.bias"))?.to_scalars()?,
                    });
                }
                let dh = d_model / n_heads;
                let mut blocks = Vec::with_capacity(n_blocks);
                for b in 0..n_blocks {
                    let wq = load_proj(&format!("block{b}.wq"))?;
                    let wk = load_proj(&format!("block{b}.wk"))?;
                    let wv = load_proj(&format!("block{b}.wv"))?;
                    let wo = load_proj(&format!("block{b}.wo"))?;
                    let mlp_i = load_proj(&format!("block{b}.mlp_i"))?;
                    let mlp_o = load_proj(&format!("block{b}.mlp_o"))?;
                    let offsets = |ids: &[u32]| -> Vec<usize> {
                        let mut off = vec![0usize; n_heads + 1];
                        for &id in ids {
                            off[(id as usize) / dh + 1] += 1;
                        }
                        for a in 0..n_heads {
                            off[a + 1] += off[a];
                        }
                        off
                    };
                    let qk_offsets = offsets(&wq.out_map);
                    let vo_offsets = offsets(&wv.out_map);
                    blocks.push(CompactBlock {
                        wq,
                        wk,
                        wv,
                        wo,
                        mlp_i,
                        mlp_o,
                        qk_offsets,
                        vo_offsets,
                    });
                }
                Ok(CompactModel {
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
                    body: CompactBody::Transformer { embed, lns, blocks, head },
                })
            }
            other => Err(ModelCheckpointError::Malformed(format!("unknown arch {other}"))),
        }
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<(), ModelCheckpointError> {
        self.to_container().write_to(path)
    }

    pub fn load_checkpoint(
        path: &std::path::Path,
    ) -> Result<CompactModel<T>, ModelCheckpointError> {
        CompactModel::from_container(&Container::read_from(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::SparsityObjective;
    use crate::model::{build_mlp, build_transformer};

    fn objective() -> SparsityObjective<f64> {
        SparsityObjective::new(0.0, 0.0)
    }

    fn mlp_100_64_10() -> GatedModel<f64> {
        build_mlp(&[100, 64, 10], 3, objective(), TaskKind::Classification, 0.5, 1).unwrap()
    }

    #[test]
    fn binarize_thresholds() {
        let mut m = mlp_100_64_10();
        m.layers[0].gate_r.mu[0] = 0.5; // det 1.0 -> keep
        m.layers[0].gate_r.mu[1] = -1.0; // det 0.0 -> drop
        m.layers[0].gate_r.mu[2] = 0.0; // det exactly 0.5 -> drop under tau=0.5 (strict)
        m.layers[0].gate_r.mu[3] = -0.2; // det 0.3 -> drop under tau, keep under support
        let bin = binarize(&m, CompactionPolicy::Tau(0.5));
        assert_eq!(bin.masks[0].0[0], 1.0);
        assert_eq!(bin.masks[0].0[1], 0.0);
        assert_eq!(bin.masks[0].0[2], 0.0);
        assert_eq!(bin.masks[0].0[3], 0.0);
        let sup = binarize(&m, CompactionPolicy::Support);
        assert_eq!(sup.masks[0].0[1], 0.0);
        assert_eq!(sup.masks[0].0[3], 1.0);
        // two gates sit strictly inside (0.05, 0.95)
        assert_eq!(bin.ambiguity_mass, 2);
    }

    #[test]
    fn all_ones_masks_remove_nothing_and_match_exactly() {
        let m = mlp_100_64_10();
        let bin = binarize(&m, CompactionPolicy::Tau(0.5)); // fresh init: all open
        let (cm, report) = compact_model(&m, &bin).unwrap();
        assert_eq!(report.removed_params, 0);
        assert_eq!(report.removed_fraction, 0.0);
        let dev = verify_equivalence(&m, &bin, &cm, 16, 7).unwrap();
        assert_eq!(dev, 0.0);
    }

    #[test]
    fn structural_counts_for_dead_hidden_rows() {
        // kill 32 of the 64 rows of the first gated layer
        let mut m = mlp_100_64_10();
        for i in 0..32 {
            m.layers[0].gate_r.mu[i] = -1.0;
        }
        let bin = binarize(&m, CompactionPolicy::Tau(0.5));
        let (cm, report) = compact_model(&m, &bin).unwrap();
        match &cm.body {
            CompactBody::Mlp { layers, .. } => {
                assert_eq!((layers[0].w.rows(), layers[0].w.cols()), (32, 100));
                assert_eq!((layers[1].w.rows(), layers[1].w.cols()), (10, 32));
            }
            _ => panic!("mlp body"),
        }
        // removed: 32x100 weights + 32 biases from layer0, 10x32 columns
        // from layer1 by zero propagation
        let l0 = &report.layers[0];
        assert_eq!(l0.params_removed, 32 * 100 + 32);
        let l1 = &report.layers[1];
        assert_eq!(l1.params_removed, 10 * 32);
        // bookkeeping: removed + kept == original per layer
        for l in &report.layers {
            assert!(l.params_removed <= l.params_total);
        }
        let dev = verify_equivalence(&m, &bin, &cm, 16, 3).unwrap();
        assert!(dev <= 1e-12, "deviation {dev}");
    }

    #[test]
    fn zero_propagation_through_gelu_is_sound() {
        // brute-force check on narrow networks: every column dropped by
        // propagation consumed a feature that is exactly zero on all inputs
        let mut rng = RngStream::new(41);
        for trial in 0..10 {
            let mut m = build_mlp::<f64>(
                &[6, 8, 7],
                2,
                objective(),
                TaskKind::Classification,
                0.5,
                trial,
            )
            .unwrap();
            for l in m.layers.iter_mut() {
                for v in l.gate_r.mu.iter_mut() {
                    *v = if rng.next_uniform() < 0.3 { -1.0 } else { 0.5 };
                }
                for v in l.gate_c.mu.iter_mut() {
                    *v = if rng.next_uniform() < 0.3 { -1.0 } else { 0.5 };
                }
            }
            let bin = binarize(&m, CompactionPolicy::Tau(0.5));
            let cm = match compact_model(&m, &bin) {
                Ok((cm, _)) => cm,
                Err(CompactError::EmptyLayer(_)) => continue,
                Err(e) => panic!("{e}"),
            };
            // feature activations of the masked model after layer 0
            let x = Matrix::from_fn(32, 6, |_, _| rng.next_gauss());
            let (h0, _) = crate::layers::gated_forward(
                &m.layers[0],
                &x,
                &mut GateRealization::Masked(&bin.masks),
                0,
            )
            .unwrap();
            let feats = gelu_forward(&h0);
            // columns of layer 1 kept by mask but dropped by propagation
            let (_, mc1) = &bin.masks[1];
            let kept: Vec<u32> = match &cm.body {
                CompactBody::Mlp { layers, .. } => layers[1]
                    .in_map
                    .iter()
                    .map(|&p| layers[0].out_map[p as usize])
                    .collect(),
                _ => unreachable!(),
            };
            for j in 0..m.layers[1].in_dim() {
                let masked_on = mc1[j] != 0.0;
                let surviving = kept.contains(&(j as u32));
                if masked_on && !surviving {
                    for i in 0..feats.rows() {
                        assert_eq!(feats[(i, j)], 0.0, "dropped column consumed a live feature");
                    }
                }
            }
            let dev = verify_equivalence(&m, &bin, &cm, 16, trial).unwrap();
            assert!(dev <= 1e-12);
        }
    }

    #[test]
    fn empty_layer_is_an_error() {
        let mut m = mlp_100_64_10();
        for v in m.layers[0].gate_r.mu.iter_mut() {
            *v = -1.0;
        }
        let bin = binarize(&m, CompactionPolicy::Tau(0.5));
        match compact_model(&m, &bin) {
            Err(CompactError::EmptyLayer(name)) => assert_eq!(name, "layer0"),
            other => panic!("expected EmptyLayer, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn lowrank_models_rejected() {
        let mut m = mlp_100_64_10();
        crate::model::attach_lowrank(&mut m, 2, 0);
        let bin = binarize(&m, CompactionPolicy::Tau(0.5));
        assert!(matches!(
            compact_model(&m, &bin),
            Err(CompactError::LowRankUnsupported)
        ));
    }

    #[test]
    fn transformer_compaction_with_pairing_and_zero_prop() {
        let mut m = build_transformer::<f64>(
            30, 4, 16, 2, 24, 1, 3, true, objective(), TaskKind::Classification, 0.5, 5,
        )
        .unwrap();
        let mut rng = RngStream::new(9);
        for l in m.layers.iter_mut() {
            for v in l.gate_r.mu.iter_mut() {
                *v = if rng.next_uniform() < 0.35 { -1.0 } else { 0.5 };
            }
            for v in l.gate_c.mu.iter_mut() {
                *v = if rng.next_uniform() < 0.35 { -1.0 } else { 0.5 };
            }
        }
        // force the zero-prop pairing cases explicitly:
        // a dead mlp_i row against a live mlp_o column
        m.layers[4].gate_r.mu[3] = -1.0;
        m.layers[5].gate_c.mu[3] = 0.5;
        // a live mlp_i row against a dead mlp_o column
        m.layers[4].gate_r.mu[4] = 0.5;
        m.layers[5].gate_c.mu[4] = -1.0;
        let bin = binarize(&m, CompactionPolicy::Tau(0.5));
        let (cm, report) = compact_model(&m, &bin).unwrap();
        assert!(report.removed_params > 0);
        match &cm.body {
            CompactBody::Transformer { blocks, .. } => {
                // hidden dim 3 and 4 both dropped by pairing
                assert!(!blocks[0].mlp_i.out_map.contains(&3));
                assert!(!blocks[0].mlp_o.in_map.is_empty());
            }
            _ => panic!("transformer body"),
        }
        let dev = verify_equivalence(&m, &bin, &cm, 24, 13).unwrap();
        assert!(dev <= 1e-12, "deviation {dev}");
    }

    #[test]
    fn corrupted_index_map_detected_by_verifier() {
        let mut m = mlp_100_64_10();
        for i in 0..20 {
            m.layers[0].gate_r.mu[i] = -1.0;
        }
        let bin = binarize(&m, CompactionPolicy::Tau(0.5));
        let (mut cm, _) = compact_model(&m, &bin).unwrap();
        match &mut cm.body {
            CompactBody::Mlp { layers, .. } => {
                // point one surviving input of layer1 at the wrong feature
                layers[1].in_map[0] = (layers[1].in_map[0] + 1) % layers[0].w.rows() as u32;
            }
            _ => unreachable!(),
        }
        let dev = verify_equivalence(&m, &bin, &cm, 16, 21).unwrap();
        assert!(dev > 1e-6, "corruption must be visible, got {dev}");
    }

    #[test]
    fn redensify_then_recompact_is_identity() {
        let mut m = mlp_100_64_10();
        for i in 0..16 {
            m.layers[0].gate_r.mu[i] = -1.0;
        }
        let bin = binarize(&m, CompactionPolicy::Tau(0.5));
        let (cm, _) = compact_model(&m, &bin).unwrap();
        let dense = cm.redensify(0.5).unwrap();
        let bin2 = binarize(&dense, CompactionPolicy::Tau(0.5)); // fresh gates: all ones
        let (cm2, report2) = compact_model(&dense, &bin2).unwrap();
        assert_eq!(report2.removed_params, 0);
        match (&cm.body, &cm2.body) {
            (CompactBody::Mlp { layers: a, .. }, CompactBody::Mlp { layers: b, .. }) => {
                for (pa, pb) in a.iter().zip(b) {
                    assert_eq!(pa.w.data(), pb.w.data());
                    assert_eq!(pa.bias, pb.bias);
                }
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn compact_checkpoint_round_trip() {
        let mut m = build_transformer::<f64>(
            30, 4, 16, 2, 24, 1, 3, true, objective(), TaskKind::Classification, 0.5, 5,
        )
        .unwrap();
        for i in 0..5 {
            m.layers[0].gate_r.mu[i] = -1.0;
            m.layers[4].gate_r.mu[i] = -1.0;
        }
        let bin = binarize(&m, CompactionPolicy::Tau(0.5));
        let (cm, _) = compact_model(&m, &bin).unwrap();
        let bytes = cm.to_container().to_bytes();
        let loaded =
            CompactModel::<f64>::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        let mut rng = RngStream::new(33);
        let input = sample_inputs::<f64>(&m.arch, 6, &mut rng);
        let a = cm.forward(&input.as_input_ref()).unwrap();
        let b = loaded.forward(&input.as_input_ref()).unwrap();
        assert_eq!(a.data(), b.data());
        // byte-stable re-serialization
        assert_eq!(bytes, loaded.to_container().to_bytes());
    }

    #[test]
    fn masked_dense_variant_matches_masked_forward() {
        let mut m = mlp_100_64_10();
        for i in 0..10 {
            m.layers[0].gate_r.mu[i] = -1.0;
            m.layers[1].gate_c.mu[i] = -1.0;
        }
        let bin = binarize(&m, CompactionPolicy::Tau(0.5));
        let baked = masked_dense_model(&m, &bin).unwrap();
        let mut rng = RngStream::new(50);
        let input = sample_inputs::<f64>(&m.arch, 8, &mut rng);
        let iref = input.as_input_ref();
        let (masked, _) = m
            .forward(&iref, &mut GateRealization::Masked(&bin.masks))
            .unwrap();
        let out = baked.forward(&iref).unwrap();
        assert_eq!(masked.data(), out.data());
    }

    #[test]
    fn gate_statistics_table() {
        use crate::data::{generate_planted, PlantedSpec};
        use crate::train::{train, TrainConfig};
        let ds = generate_planted::<f64>(
            4,
            &PlantedSpec { d_in: 8, hidden: 6, classes: 3, n_samples: 64, ..Default::default() },
        )
        .unwrap();
        let m = build_mlp::<f64>(
            &[8, 6],
            3,
            SparsityObjective::new(5.0, 0.5),
            TaskKind::Classification,
            0.5,
            6,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            lambda: 5.0,
            target_sparsity: 0.5,
            ..Default::default()
        };
        let run = train(m, &ds, &cfg).unwrap();
        let stats = gate_statistics(&run).unwrap();
        assert_eq!(stats.per_layer.len(), 1);
        assert_eq!(stats.epochs.len(), 4);
        // epoch 0: initialization means are exactly 1
        assert_eq!(stats.per_layer[0][0], (1.0, 1.0));

        let mut run2 = run.clone();
        run2.snapshots_enabled = false;
        assert!(matches!(
            gate_statistics(&run2),
            Err(CompactError::SnapshotsMissing)
        ));
    }
}
