//! Training: the composite objective (task loss plus hinged expected-open
//! regularizers averaged over gated matrices), AdamW with decoupled decay,
//! deterministic seeding, and the finite-difference gradient-check harness.
//!
//! Two parameter groups: gate means train at `lr_gates`, biases/head/low-rank
//! factors at `lr_bias_head`. Gate means receive no weight decay — shrinking
//! them toward zero would act as a second, implicit sparsity prior on top of
//! the explicit one.

use crate::data::{BatchLabels, Dataset};
use crate::gates::{
    deterministic_gates, expected_l0, hinged_sparsity_loss, kurtosis_scores, sparsity_loss_grad,
    weighted_expected_l0, GateAxis,
};
use crate::matrix::Matrix;
use crate::model::{GatedModel, InputRef, ModelCache, ModelError, ModelGrads, TaskKind};
use crate::layers::GateRealization;
use crate::precision::{re, Real};
use crate::rng::RngStream;
use std::io::Write;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError<T: Real> {
    #[error("training diverged (non-finite loss) at epoch {epoch}, step {step}; last-good model retained")]
    Diverged {
        epoch: usize,
        step: usize,
        last_good: Box<GatedModel<T>>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("bad training config: {0}")]
    BadConfig(String),
}

// ---------------------------------------------------------------------------
// task losses
// ---------------------------------------------------------------------------

pub enum TargetsRef<'a, T> {
    Classes(&'a [usize]),
    Values(&'a Matrix<T>),
}

impl<T: Real> BatchLabels<T> {
    pub fn as_targets_ref(&self) -> TargetsRef<'_, T> {
        match self {
            BatchLabels::Classes(c) => TargetsRef::Classes(c),
            BatchLabels::Targets(t) => TargetsRef::Values(t),
        }
    }
}

/// Mean cross-entropy (classification) or mean squared error (regression),
/// with the gradient w.r.t. the logits.
pub fn task_loss<T: Real>(
    task: TaskKind,
    logits: &Matrix<T>,
    targets: &TargetsRef<'_, T>,
) -> (T, Matrix<T>) {
    let b = logits.rows();
    assert!(b > 0, "empty batch");
    let inv_b = re::<T>(1.0 / b as f64);
    match (task, targets) {
        (TaskKind::Classification, TargetsRef::Classes(ys)) => {
            assert_eq!(ys.len(), b);
            let mut loss = T::zero();
            let mut d = Matrix::zeros(b, logits.cols());
            for n in 0..b {
                let row = logits.row(n);
                let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
                let mut total = T::zero();
                for &v in row {
                    total += (v - m).exp();
                }
                let lse = m + total.ln();
                loss += lse - row[ys[n]];
                for j in 0..row.len() {
                    let p = (row[j] - lse).exp();
                    let y = if j == ys[n] { T::one() } else { T::zero() };
                    d[(n, j)] = (p - y) * inv_b;
                }
            }
            (loss * inv_b, d)
        }
        (TaskKind::Regression, TargetsRef::Values(t)) => {
            assert_eq!((t.rows(), t.cols()), (b, logits.cols()));
            let diff = logits.sub(t);
            let loss = diff.frobenius_norm_sq() * re::<T>(0.5) * inv_b;
            (loss, diff.scale(inv_b))
        }
        _ => panic!("task kind does not match target kind"),
    }
}

/// Fraction of correct argmax predictions (classification) or mean squared
/// error (regression; lower is better).
pub fn eval_metric<T: Real>(
    task: TaskKind,
    logits: &Matrix<T>,
    targets: &TargetsRef<'_, T>,
) -> f64 {
    match (task, targets) {
        (TaskKind::Classification, TargetsRef::Classes(ys)) => {
            let mut correct = 0usize;
            for n in 0..logits.rows() {
                let row = logits.row(n);
                let mut best = 0;
                for j in 1..row.len() {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                if best == ys[n] {
                    correct += 1;
                }
            }
            correct as f64 / logits.rows() as f64
        }
        (TaskKind::Regression, TargetsRef::Values(t)) => {
            let diff = logits.sub(t);
            diff.frobenius_norm_sq().to_f64_() / logits.rows() as f64
        }
        _ => panic!("task kind does not match target kind"),
    }
}

// ---------------------------------------------------------------------------
// composite objective
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct LossTerms<T> {
    pub total: T,
    pub task: T,
    pub sparsity: T,
}

/// Per-adapted-layer kurtosis score vectors `(rows, cols)`, detached from
/// the graph: they rescale sparsity gradients but receive none.
pub type KurtWeights<T> = Vec<Option<(Vec<T>, Vec<T>)>>;

/// Scores computed from the cached layer inputs and the realized gates of
/// this forward pass.
pub fn kurtosis_weights_from_cache<T: Real>(
    model: &GatedModel<T>,
    cache: &ModelCache<T>,
) -> KurtWeights<T> {
    model
        .layers
        .iter()
        .zip(cache.gated_caches())
        .map(|(layer, lc)| {
            if !layer.adapted {
                return None;
            }
            let o = crate::gates::activation_matrix(&layer.w0, &lc.omega_r, &lc.omega_c, &lc.x)
                .expect("cache shapes are consistent");
            let (k_cols, k_rows) = kurtosis_scores(&o);
            Some((k_rows, k_cols))
        })
        .collect()
}

/// Sparsity loss `lambda * (1/L) * sum_i [hinge_r + hinge_c]` and its
/// per-layer mu gradients (pre-scaled by `lambda / L`).
fn sparsity_terms<T: Real>(
    model: &GatedModel<T>,
    weights: Option<&KurtWeights<T>>,
) -> (T, Vec<Option<(Vec<T>, Vec<T>)>>) {
    let lambda = model.objective.lambda;
    let l = model.num_gated();
    if lambda == T::zero() || l == 0 {
        return (T::zero(), vec![None; model.layers.len()]);
    }
    let scale = lambda / re::<T>(l as f64);
    let mut loss = T::zero();
    let mut grads = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        if !layer.adapted {
            grads.push(None);
            continue;
        }
        let kw = weights.and_then(|w| w[i].as_ref());
        let floor_r = model.objective.floor_for(i, GateAxis::Row);
        let floor_c = model.objective.floor_for(i, GateAxis::Column);
        let (er, kr): (T, Option<&[T]>) = match kw {
            Some((k_rows, _)) => (
                weighted_expected_l0(&layer.gate_r, k_rows).expect("normalized scores"),
                Some(k_rows.as_slice()),
            ),
            None => (expected_l0(&layer.gate_r), None),
        };
        let (ec, kc): (T, Option<&[T]>) = match kw {
            Some((_, k_cols)) => (
                weighted_expected_l0(&layer.gate_c, k_cols).expect("normalized scores"),
                Some(k_cols.as_slice()),
            ),
            None => (expected_l0(&layer.gate_c), None),
        };
        loss += hinged_sparsity_loss(er, floor_r) + hinged_sparsity_loss(ec, floor_c);
        let gr: Vec<T> = sparsity_loss_grad(&layer.gate_r, kr, floor_r)
            .into_iter()
            .map(|v| v * scale)
            .collect();
        let gc: Vec<T> = sparsity_loss_grad(&layer.gate_c, kc, floor_c)
            .into_iter()
            .map(|v| v * scale)
            .collect();
        grads.push(Some((gr, gc)));
    }
    (loss * scale, grads)
}

pub struct StepOutput<T> {
    pub terms: LossTerms<T>,
    pub grads: ModelGrads<T>,
    pub logits: Matrix<T>,
}

/// Total loss and all trainable gradients for one batch. When kurtosis
/// weighting is enabled the scores come from this pass's cache unless a
/// frozen set is supplied (the gradient checker freezes them so finite
/// differences see the same constants the analytic path used).
pub fn loss_and_grads<T: Real>(
    model: &GatedModel<T>,
    input: &InputRef<'_, T>,
    targets: &TargetsRef<'_, T>,
    mode: &mut GateRealization<'_, T>,
    frozen_weights: Option<&KurtWeights<T>>,
) -> Result<StepOutput<T>, TrainError<T>> {
    let (logits, cache) = model.forward(input, mode)?;
    let (task, d_logits) = task_loss(model.task, &logits, targets);
    let mut grads = model.backward(&cache, &d_logits)?;

    let computed;
    let weights: Option<&KurtWeights<T>> = if model.objective.kurtosis_weighting {
        match frozen_weights {
            Some(w) => Some(w),
            None => {
                computed = kurtosis_weights_from_cache(model, &cache);
                Some(&computed)
            }
        }
    } else {
        None
    };
    let (sparsity, sgrads) = sparsity_terms(model, weights);
    for (lg, sg) in grads.layers.iter_mut().zip(sgrads) {
        if let Some((gr, gc)) = sg {
            for (d, s) in lg.d_mu_r.iter_mut().zip(gr) {
                *d += s;
            }
            for (d, s) in lg.d_mu_c.iter_mut().zip(gc) {
                *d += s;
            }
        }
    }
    Ok(StepOutput {
        terms: LossTerms { total: task + sparsity, task, sparsity },
        grads,
        logits,
    })
}

/// Loss only (no backward); the finite-difference probe.
pub fn loss_value<T: Real>(
    model: &GatedModel<T>,
    input: &InputRef<'_, T>,
    targets: &TargetsRef<'_, T>,
    mode: &mut GateRealization<'_, T>,
    frozen_weights: Option<&KurtWeights<T>>,
) -> Result<LossTerms<T>, TrainError<T>> {
    let (logits, cache) = model.forward(input, mode)?;
    let (task, _) = task_loss(model.task, &logits, targets);
    let computed;
    let weights: Option<&KurtWeights<T>> = if model.objective.kurtosis_weighting {
        match frozen_weights {
            Some(w) => Some(w),
            None => {
                computed = kurtosis_weights_from_cache(model, &cache);
                Some(&computed)
            }
        }
    } else {
        None
    };
    let (sparsity, _) = sparsity_terms(model, weights);
    Ok(LossTerms { total: task + sparsity, task, sparsity })
}

// ---------------------------------------------------------------------------
// trainable-parameter enumeration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamId {
    MuR(usize),
    MuC(usize),
    Bias(usize),
    LoraA(usize),
    LoraB(usize),
    HeadW,
    HeadBias,
}

impl ParamId {
    pub fn label(&self) -> String {
        match self {
            ParamId::MuR(i) => format!("layer{i}.mu_r"),
            ParamId::MuC(i) => format!("layer{i}.mu_c"),
            ParamId::Bias(i) => format!("layer{i}.bias"),
            ParamId::LoraA(i) => format!("layer{i}.lora_a"),
            ParamId::LoraB(i) => format!("layer{i}.lora_b"),
            ParamId::HeadW => "head.w".into(),
            ParamId::HeadBias => "head.bias".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Gate means: `lr_gates`, never weight-decayed.
    Gates,
    /// Biases, head, low-rank factors: `lr_bias_head`, decayed.
    BiasHead,
}

/// Fixed-order list of trainable tensors.
pub fn trainable_params<T: Real>(
    model: &GatedModel<T>,
    train_bias: bool,
) -> Vec<(ParamId, ParamGroup)> {
    let mut out = Vec::new();
    for (i, l) in model.layers.iter().enumerate() {
        if !l.adapted {
            continue;
        }
        out.push((ParamId::MuR(i), ParamGroup::Gates));
        out.push((ParamId::MuC(i), ParamGroup::Gates));
        if train_bias {
            out.push((ParamId::Bias(i), ParamGroup::BiasHead));
        }
        if l.lowrank.is_some() {
            out.push((ParamId::LoraA(i), ParamGroup::BiasHead));
            out.push((ParamId::LoraB(i), ParamGroup::BiasHead));
        }
    }
    out.push((ParamId::HeadW, ParamGroup::BiasHead));
    out.push((ParamId::HeadBias, ParamGroup::BiasHead));
    out
}

pub fn param_slice<'a, T: Real>(model: &'a GatedModel<T>, id: ParamId) -> &'a [T] {
    match id {
        ParamId::MuR(i) => &model.layers[i].gate_r.mu,
        ParamId::MuC(i) => &model.layers[i].gate_c.mu,
        ParamId::Bias(i) => &model.layers[i].bias,
        ParamId::LoraA(i) => model.layers[i].lowrank.as_ref().expect("lowrank").a.data(),
        ParamId::LoraB(i) => model.layers[i].lowrank.as_ref().expect("lowrank").b.data(),
        ParamId::HeadW => model.head.w.data(),
        ParamId::HeadBias => &model.head.bias,
    }
}

pub fn param_slice_mut<'a, T: Real>(model: &'a mut GatedModel<T>, id: ParamId) -> &'a mut [T] {
    match id {
        ParamId::MuR(i) => &mut model.layers[i].gate_r.mu,
        ParamId::MuC(i) => &mut model.layers[i].gate_c.mu,
        ParamId::Bias(i) => &mut model.layers[i].bias,
        ParamId::LoraA(i) => model.layers[i].lowrank.as_mut().expect("lowrank").a.data_mut(),
        ParamId::LoraB(i) => model.layers[i].lowrank.as_mut().expect("lowrank").b.data_mut(),
        ParamId::HeadW => model.head.w.data_mut(),
        ParamId::HeadBias => &mut model.head.bias,
    }
}

pub fn grad_slice<'a, T: Real>(grads: &'a ModelGrads<T>, id: ParamId) -> &'a [T] {
    match id {
        ParamId::MuR(i) => &grads.layers[i].d_mu_r,
        ParamId::MuC(i) => &grads.layers[i].d_mu_c,
        ParamId::Bias(i) => &grads.layers[i].d_bias,
        ParamId::LoraA(i) => grads.layers[i].d_a.as_ref().expect("lowrank grads").data(),
        ParamId::LoraB(i) => grads.layers[i].d_b.as_ref().expect("lowrank grads").data(),
        ParamId::HeadW => grads.head.d_w.data(),
        ParamId::HeadBias => &grads.head.d_bias,
    }
}

pub fn global_grad_norm<T: Real>(
    grads: &ModelGrads<T>,
    params: &[(ParamId, ParamGroup)],
) -> f64 {
    let mut acc = 0.0f64;
    for (id, _) in params {
        for &g in grad_slice(grads, *id) {
            let g = g.to_f64_();
            acc += g * g;
        }
    }
    acc.sqrt()
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One AdamW update: decoupled decay `p <- p - lr*wd*p` first, then the
/// bias-corrected Adam delta. `t` is 1-based.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step<T: Real>(
    p: &mut [T],
    g: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: T,
    params: &AdamParams,
    weight_decay: T,
) {
    assert!(t >= 1);
    assert_eq!(p.len(), g.len());
    assert_eq!(p.len(), m.len());
    assert_eq!(p.len(), v.len());
    let b1 = re::<T>(params.beta1);
    let b2 = re::<T>(params.beta2);
    let eps = re::<T>(params.eps);
    let c1 = T::one() - re::<T>(params.beta1.powi(t as i32));
    let c2 = T::one() - re::<T>(params.beta2.powi(t as i32));
    let one = T::one();
    for i in 0..p.len() {
        if weight_decay != T::zero() {
            p[i] = p[i] * (one - lr * weight_decay);
        }
        m[i] = b1 * m[i] + (one - b1) * g[i];
        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

// ---------------------------------------------------------------------------
// schedules and config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant,
    /// Linear warmup then cosine decay to `floor_frac` of peak.
    WarmupCosine { warmup_steps: usize, floor_frac: f64 },
}

impl Schedule {
    pub fn factor(&self, step: usize, total_steps: usize) -> f64 {
        match *self {
            Schedule::Constant => 1.0,
            Schedule::WarmupCosine { warmup_steps, floor_frac } => {
                if step < warmup_steps {
                    (step + 1) as f64 / warmup_steps as f64
                } else {
                    let span = total_steps.saturating_sub(warmup_steps).max(1);
                    let progress = (step - warmup_steps) as f64 / span as f64;
                    let progress = progress.min(1.0);
                    floor_frac
                        + (1.0 - floor_frac) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr_gates: f64,
    pub lr_bias_head: f64,
    pub lambda: f64,
    pub target_sparsity: f64,
    pub target_rows: Option<f64>,
    pub target_cols: Option<f64>,
    pub layer_overrides: Vec<(usize, GateAxis, f64)>,
    pub kurtosis_weighting: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub train_bias: bool,
    /// Off = the ungated finetune baseline: gate means frozen at their
    /// current values, only biases/head (and low-rank factors) train.
    pub train_gates: bool,
    pub lowrank_rank: Option<usize>,
    pub snapshot_gates: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_gates: 1e-3,
            lr_bias_head: 1e-4,
            lambda: 0.0,
            target_sparsity: 0.0,
            target_rows: None,
            target_cols: None,
            layer_overrides: vec![],
            kurtosis_weighting: false,
            epochs: 10,
            batch_size: 64,
            seed: 0,
            schedule: Schedule::Constant,
            weight_decay: 0.0,
            train_bias: true,
            train_gates: true,
            lowrank_rank: None,
            snapshot_gates: true,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), String> {
        if self.lr_gates <= 0.0 || self.lr_bias_head <= 0.0 {
            return Err("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.target_sparsity) {
            return Err(format!("target_sparsity {} outside [0,1)", self.target_sparsity));
        }
        if self.batch_size == 0 {
            return Err("batch_size must be >= 1".into());
        }
        if self.lambda < 0.0 {
            return Err("lambda must be nonnegative".into());
        }
        Ok(())
    }

    pub fn apply_objective<T: Real>(&self, model: &mut GatedModel<T>) {
        model.objective.lambda = re(self.lambda);
        model.objective.target_sparsity = self.target_sparsity;
        model.objective.target_rows = self.target_rows;
        model.objective.target_cols = self.target_cols;
        model.objective.layer_overrides = self.layer_overrides.clone();
        model.objective.kurtosis_weighting = self.kurtosis_weighting;
    }
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub task_loss: f64,
    pub sparsity_loss: f64,
    pub val_metric: f64,
    /// Analytic expected open fraction per adapted layer, (rows, cols).
    pub open_fractions: Vec<(f64, f64)>,
    /// Mean deterministic gate value per adapted layer, (rows, cols).
    pub gate_means: Vec<(f64, f64)>,
    pub grad_norm: f64,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainRun<T> {
    pub records: Vec<EpochRecord>,
    /// Gate means at initialization (the epoch-0 row of gate statistics).
    pub init_gate_means: Vec<(f64, f64)>,
    pub model: GatedModel<T>,
    pub wall_clock_ms: u64,
    pub seed: u64,
    pub snapshots_enabled: bool,
}

fn gate_snapshot<T: Real>(model: &GatedModel<T>) -> Vec<(f64, f64)> {
    model
        .layers
        .iter()
        .filter(|l| l.adapted)
        .map(|l| {
            let r = deterministic_gates(&l.gate_r);
            let c = deterministic_gates(&l.gate_c);
            let mr = r.iter().map(|v| v.to_f64_()).sum::<f64>() / r.len() as f64;
            let mc = c.iter().map(|v| v.to_f64_()).sum::<f64>() / c.len() as f64;
            (mr, mc)
        })
        .collect()
}

fn open_fraction_snapshot<T: Real>(model: &GatedModel<T>) -> Vec<(f64, f64)> {
    model
        .layers
        .iter()
        .filter(|l| l.adapted)
        .map(|l| {
            (
                expected_l0(&l.gate_r).to_f64_(),
                expected_l0(&l.gate_c).to_f64_(),
            )
        })
        .collect()
}

/// Deterministic-mode metric over the given indices, in bounded chunks.
pub fn evaluate_split<T: Real>(
    model: &GatedModel<T>,
    data: &Dataset<T>,
    idx: &[usize],
) -> Result<f64, TrainError<T>> {
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let chunk = 256;
    let mut weighted = 0.0;
    for part in idx.chunks(chunk) {
        let input = data.gather_input(part);
        let labels = data.gather_labels(part);
        let (logits, _) = model.forward(&input.as_input_ref(), &mut GateRealization::Deterministic)?;
        let m = eval_metric(model.task, &logits, &labels.as_targets_ref());
        weighted += m * part.len() as f64;
    }
    Ok(weighted / idx.len() as f64)
}

/// Runs the training loop. Deterministic given `cfg.seed`: noise draws,
/// shuffles, and update order are all derived from it.
pub fn train<T: Real>(
    mut model: GatedModel<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<TrainRun<T>, TrainError<T>> {
    cfg.validate().map_err(TrainError::BadConfig)?;
    cfg.apply_objective(&mut model);
    if let Some(rank) = cfg.lowrank_rank {
        if model.layers.iter().all(|l| l.lowrank.is_none()) {
            crate::model::attach_lowrank(&mut model, rank, cfg.seed ^ 0x10a4);
        }
    }
    let frozen_before = model.frozen_hash();
    let start = Instant::now();

    let mut params = trainable_params(&model, cfg.train_bias);
    if !cfg.train_gates {
        params.retain(|(id, _)| !matches!(id, ParamId::MuR(_) | ParamId::MuC(_)));
    }
    let mut opt_state: Vec<(Vec<T>, Vec<T>)> = params
        .iter()
        .map(|(id, _)| {
            let n = param_slice(&model, *id).len();
            (vec![T::zero(); n], vec![T::zero(); n])
        })
        .collect();
    let adam = AdamParams::default();

    let root = RngStream::new(cfg.seed);
    let mut noise_rng = root.substream(0x6e);
    let steps_per_epoch = data.train_idx.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs.max(1);

    let init_gate_means = gate_snapshot(&model);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut last_good = model.clone();
    let mut t: u64 = 0;

    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let mut order = data.train_idx.clone();
        let mut shuffle_rng = root.substream(0x5d).substream(epoch as u64);
        shuffle_rng.shuffle(&mut order);

        let mut sum_total = 0.0;
        let mut sum_task = 0.0;
        let mut sum_sparsity = 0.0;
        let mut sum_grad_norm = 0.0;
        let mut batches = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            let input = data.gather_input(batch);
            let labels = data.gather_labels(batch);
            let step = loss_and_grads(
                &model,
                &input.as_input_ref(),
                &labels.as_targets_ref(),
                &mut GateRealization::Sampled(&mut noise_rng),
                None,
            )?;
            let grad_norm = global_grad_norm(&step.grads, &params);
            if !step.terms.total.is_finite() || !grad_norm.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step: t as usize,
                    last_good: Box::new(last_good),
                });
            }
            t += 1;
            let factor = cfg.schedule.factor((t - 1) as usize, total_steps);
            for ((id, group), (m_state, v_state)) in params.iter().zip(opt_state.iter_mut()) {
                let (lr, wd) = match group {
                    ParamGroup::Gates => (cfg.lr_gates * factor, 0.0),
                    ParamGroup::BiasHead => (cfg.lr_bias_head * factor, cfg.weight_decay),
                };
                let grads = grad_slice(&step.grads, *id).to_vec();
                adamw_step(
                    param_slice_mut(&mut model, *id),
                    &grads,
                    m_state,
                    v_state,
                    t,
                    re(lr),
                    &adam,
                    re(wd),
                );
            }
            sum_total += step.terms.total.to_f64_();
            sum_task += step.terms.task.to_f64_();
            sum_sparsity += step.terms.sparsity.to_f64_();
            sum_grad_norm += grad_norm;
            batches += 1;
        }

        let val_metric = evaluate_split(&model, data, &data.val_idx)?;
        let b = batches.max(1) as f64;
        records.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: sum_total / b,
            task_loss: sum_task / b,
            sparsity_loss: sum_sparsity / b,
            val_metric,
            open_fractions: open_fraction_snapshot(&model),
            gate_means: if cfg.snapshot_gates { gate_snapshot(&model) } else { vec![] },
            grad_norm: sum_grad_norm / b,
            elapsed_ms: epoch_start.elapsed().as_millis() as u64,
        });
        last_good = model.clone();
    }

    debug_assert_eq!(model.frozen_hash(), frozen_before, "frozen weights must not move");
    Ok(TrainRun {
        records,
        init_gate_means,
        model,
        wall_clock_ms: start.elapsed().as_millis() as u64,
        seed: cfg.seed,
        snapshots_enabled: cfg.snapshot_gates,
    })
}

impl<T: Real> TrainRun<T> {
    /// One structured-text record per epoch, append-only.
    pub fn write_metrics_log(&self, w: &mut dyn Write) -> std::io::Result<()> {
        for r in &self.records {
            let fmt_pairs = |pairs: &[(f64, f64)]| {
                pairs
                    .iter()
                    .map(|(a, b)| format!("{a:.6}/{b:.6}"))
                    .collect::<Vec<_>>()
                    .join(",")
            };
            writeln!(
                w,
                "epoch={} train_loss={:.6} task_loss={:.6} sparsity_loss={:.6} val_metric={:.6} open={} grad_norm={:.6} elapsed_ms={}",
                r.epoch,
                r.train_loss,
                r.task_loss,
                r.sparsity_loss,
                r.val_metric,
                fmt_pairs(&r.open_fractions),
                r.grad_norm,
                r.elapsed_ms,
            )?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// gradient check
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Central-difference check of every trainable tensor against the analytic
/// gradients, with the noise frozen to one draw. Coordinates within `1e-3`
/// of a clamp boundary are skipped, and gate vectors whose expected open
/// fraction sits within `1e-3` of the hinge floor are skipped entirely.
pub fn grad_check<T: Real>(
    model: &GatedModel<T>,
    input: &InputRef<'_, T>,
    targets: &TargetsRef<'_, T>,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport, TrainError<T>> {
    let noise = RngStream::new(0xfd);
    let frozen_k = if model.objective.kurtosis_weighting {
        let mut stream = noise;
        let (_, cache) = model.forward(input, &mut GateRealization::Sampled(&mut stream))?;
        Some(kurtosis_weights_from_cache(model, &cache))
    } else {
        None
    };

    let mut stream = noise;
    let step = loss_and_grads(
        model,
        input,
        targets,
        &mut GateRealization::Sampled(&mut stream),
        frozen_k.as_ref(),
    )?;

    // replay the per-layer noise for clamp-boundary detection
    let mut stream = noise;
    let (_, cache) = model.forward(input, &mut GateRealization::Sampled(&mut stream))?;

    let params = trainable_params(model, true);
    let mut per_param = Vec::new();
    let mut max_rel = 0.0f64;

    // the exclusion margin must cover the widest probe offset (2h)
    let margin = (3.0 * h).max(1e-3);

    for (id, _) in &params {
        let analytic = grad_slice(&step.grads, *id).to_vec();
        let n = analytic.len();
        let mut worst = 0.0f64;
        let mut worst_idx = 0usize;
        let mut skipped = 0usize;
        for i in 0..n {
            if skip_coordinate(model, &cache, *id, i, margin).is_some() {
                skipped += 1;
                continue;
            }
            let mut probe = model.clone();
            let base = param_slice(model, *id)[i];
            let mut eval_at = |delta: f64| -> Result<f64, TrainError<T>> {
                param_slice_mut(&mut probe, *id)[i] = base + re::<T>(delta);
                Ok(loss_value(
                    &probe,
                    input,
                    targets,
                    &mut GateRealization::Sampled(&mut noise.clone()),
                    frozen_k.as_ref(),
                )?
                .total
                .to_f64_())
            };
            // central differences at h and 2h, Richardson-combined so the
            // O(h^2) truncation cancels and h can stay large enough that
            // loss-evaluation rounding does not drown small gradients
            let d1 = (eval_at(h)? - eval_at(-h)?) / (2.0 * h);
            let d2 = (eval_at(2.0 * h)? - eval_at(-2.0 * h)?) / (4.0 * h);
            let fd = (4.0 * d1 - d2) / 3.0;
            let a = analytic[i].to_f64_();
            // relative error is undefined for vanishing gradients, and some
            // directions vanish identically (a uniform shift of every key
            // vector adds a constant to each softmax row, which softmax
            // cancels), so magnitudes below the floor compare at the floor
            let denom = fd.abs().max(a.abs()).max(1e-6);
            let rel = (a - fd).abs() / denom;
            if rel > worst {
                worst = rel;
                worst_idx = i;
            }
        }
        max_rel = max_rel.max(worst);
        per_param.push(ParamCheck {
            name: id.label(),
            max_rel_err: worst,
            worst_index: worst_idx,
            checked: n - skipped,
            skipped,
        });
    }
    Ok(GradCheckReport { per_param, max_rel_err: max_rel, tolerance })
}

/// Clamp-boundary and hinge-kink exclusions for one coordinate.
fn skip_coordinate<T: Real>(
    model: &GatedModel<T>,
    cache: &ModelCache<T>,
    id: ParamId,
    i: usize,
    margin: f64,
) -> Option<&'static str> {
    let near = |pre: f64| pre.abs() < margin || (pre - 1.0).abs() < margin;
    match id {
        ParamId::MuR(l) => {
            let layer = &model.layers[l];
            let eps = cache.gated_caches()[l].eps_r.as_ref();
            let pre = 0.5 + layer.gate_r.mu[i].to_f64_() + eps.map_or(0.0, |e| e[i].to_f64_());
            if near(pre) {
                return Some("clamp boundary");
            }
            if model.objective.lambda != T::zero() {
                let e = expected_l0(&layer.gate_r).to_f64_();
                let floor = model.objective.floor_for(l, GateAxis::Row).to_f64_();
                if (e - floor).abs() < margin {
                    return Some("hinge kink");
                }
            }
            None
        }
        ParamId::MuC(l) => {
            let layer = &model.layers[l];
            let eps = cache.gated_caches()[l].eps_c.as_ref();
            let pre = 0.5 + layer.gate_c.mu[i].to_f64_() + eps.map_or(0.0, |e| e[i].to_f64_());
            if near(pre) {
                return Some("clamp boundary");
            }
            if model.objective.lambda != T::zero() {
                let e = expected_l0(&layer.gate_c).to_f64_();
                let floor = model.objective.floor_for(l, GateAxis::Column).to_f64_();
                if (e - floor).abs() < margin {
                    return Some("hinge kink");
                }
            }
            None
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_planted, PlantedSpec};
    use crate::gates::DEFAULT_SIGMA;
    use crate::model::build_mlp;
    use crate::model::TaskKind;

    const PHI2: f64 = 0.9772498680518208;

    fn objective(lambda: f64, target: f64) -> crate::gates::SparsityObjective<f64> {
        let mut o = crate::gates::SparsityObjective::new(lambda, target);
        o.kurtosis_weighting = false;
        o
    }

    fn small_model(lambda: f64) -> GatedModel<f64> {
        build_mlp(
            &[6, 5, 4],
            3,
            objective(lambda, 0.5),
            TaskKind::Classification,
            DEFAULT_SIGMA,
            11,
        )
        .unwrap()
    }

    fn small_batch() -> (Matrix<f64>, Vec<usize>) {
        let mut rng = RngStream::new(5);
        let x = Matrix::from_fn(8, 6, |_, _| rng.next_gauss());
        let y: Vec<usize> = (0..8).map(|_| rng.next_below(3)).collect();
        (x, y)
    }

    #[test]
    fn adamw_hand_example() {
        let mut p = [0.0f64];
        let g = [1.0f64];
        let mut m = [0.0f64];
        let mut v = [0.0f64];
        adamw_step(&mut p, &g, &mut m, &mut v, 1, 0.1, &AdamParams::default(), 0.0);
        assert!((p[0] + 0.1).abs() < 1e-7, "p = {}", p[0]);
    }

    #[test]
    fn adamw_zero_grads_no_decay_is_identity() {
        let mut p = [0.7f64, -0.3];
        let g = [0.0f64, 0.0];
        let mut m = [0.0f64; 2];
        let mut v = [0.0f64; 2];
        adamw_step(&mut p, &g, &mut m, &mut v, 1, 0.1, &AdamParams::default(), 0.0);
        assert_eq!(p, [0.7, -0.3]);
    }

    #[test]
    fn adamw_decay_with_zero_grads_is_pure_shrink() {
        let mut p = [2.0f64];
        let g = [0.0f64];
        let mut m = [0.0f64];
        let mut v = [0.0f64];
        adamw_step(&mut p, &g, &mut m, &mut v, 1, 0.1, &AdamParams::default(), 0.5);
        assert!((p[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn lambda_zero_total_equals_task() {
        let model = small_model(0.0);
        let (x, y) = small_batch();
        let mut rng = RngStream::new(1);
        let out = loss_and_grads(
            &model,
            &InputRef::Dense(&x),
            &TargetsRef::Classes(&y),
            &mut GateRealization::Sampled(&mut rng),
            None,
        )
        .unwrap();
        assert_eq!(out.terms.total, out.terms.task);
        assert_eq!(out.terms.sparsity, 0.0);
        // sparsity gradient block contributes nothing: mu grads equal the
        // task-only mu grads
        let mut rng2 = RngStream::new(1);
        let mut task_only = model.clone();
        task_only.objective.lambda = 0.0;
        let out2 = loss_and_grads(
            &task_only,
            &InputRef::Dense(&x),
            &TargetsRef::Classes(&y),
            &mut GateRealization::Sampled(&mut rng2),
            None,
        )
        .unwrap();
        assert_eq!(out.grads.layers[0].d_mu_r, out2.grads.layers[0].d_mu_r);
    }

    #[test]
    fn fresh_init_sparsity_value() {
        // all gate means at 0.5: every hinge term equals Phi(2) above a 0.5
        // floor; with row+col terms per matrix the sum is 2*lambda*Phi(2)
        let lambda = 3.0;
        let model = small_model(lambda);
        let (x, y) = small_batch();
        let mut rng = RngStream::new(2);
        let out = loss_and_grads(
            &model,
            &InputRef::Dense(&x),
            &TargetsRef::Classes(&y),
            &mut GateRealization::Sampled(&mut rng),
            None,
        )
        .unwrap();
        assert!((out.terms.sparsity - lambda * 2.0 * PHI2).abs() < 1e-9);
    }

    #[test]
    fn dead_gates_saturate_at_floor() {
        let lambda = 2.0;
        let mut model = small_model(lambda);
        for l in model.layers.iter_mut() {
            for v in l.gate_r.mu.iter_mut() {
                *v = -5.0;
            }
            for v in l.gate_c.mu.iter_mut() {
                *v = -5.0;
            }
        }
        let (x, y) = small_batch();
        let mut rng = RngStream::new(3);
        let out = loss_and_grads(
            &model,
            &InputRef::Dense(&x),
            &TargetsRef::Classes(&y),
            &mut GateRealization::Sampled(&mut rng),
            None,
        )
        .unwrap();
        // hinge floors at 0.5 for both row and col terms
        assert!((out.terms.sparsity - lambda * 2.0 * 0.5).abs() < 1e-9);
        // subgradient at/below the floor is zero
        assert!(out.grads.layers[0].d_mu_r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kurtosis_toggle_keeps_step0_task_loss() {
        let (x, y) = small_batch();
        let mut a = small_model(1.0);
        let mut b = small_model(1.0);
        a.objective.kurtosis_weighting = false;
        b.objective.kurtosis_weighting = true;
        let mut ra = RngStream::new(9);
        let mut rb = RngStream::new(9);
        let oa = loss_and_grads(
            &a,
            &InputRef::Dense(&x),
            &TargetsRef::Classes(&y),
            &mut GateRealization::Sampled(&mut ra),
            None,
        )
        .unwrap();
        let ob = loss_and_grads(
            &b,
            &InputRef::Dense(&x),
            &TargetsRef::Classes(&y),
            &mut GateRealization::Sampled(&mut rb),
            None,
        )
        .unwrap();
        assert_eq!(oa.terms.task, ob.terms.task);
        assert_ne!(oa.terms.sparsity, ob.terms.sparsity);
    }

    #[test]
    fn pure_sparsity_descent_is_monotone_until_floor() {
        // full-batch descent on the sparsity objective alone: the expected
        // open fraction strictly decreases until it reaches the floor
        let mut model = small_model(1.0);
        model.objective.target_sparsity = 0.5;
        let eta = 0.5;
        let mut prev = expected_l0(&model.layers[0].gate_r).to_f64_();
        let floor = 0.5;
        let mut reached = false;
        for _ in 0..2000 {
            let (_, grads) = sparsity_terms(&model, None);
            let layer = &mut model.layers[0];
            if let Some((gr, _)) = &grads[0] {
                for (mu, g) in layer.gate_r.mu.iter_mut().zip(gr) {
                    *mu -= eta * g;
                }
            }
            let e = expected_l0(&model.layers[0].gate_r).to_f64_();
            if e <= floor + 1e-12 {
                reached = true;
                break;
            }
            assert!(e < prev, "expected open fraction must strictly decrease");
            prev = e;
        }
        assert!(reached, "floor not reached: {prev}");
    }

    #[test]
    fn epochs_zero_returns_model_unchanged() {
        let model = small_model(1.0);
        let before = model.layers[0].gate_r.mu.clone();
        let ds = generate_planted::<f64>(
            0,
            &PlantedSpec { d_in: 6, hidden: 5, classes: 3, n_samples: 32, ..Default::default() },
        )
        .unwrap();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let run = train(model, &ds, &cfg).unwrap();
        assert!(run.records.is_empty());
        assert_eq!(run.model.layers[0].gate_r.mu, before);
    }

    #[test]
    fn identical_configs_reproduce_records_exactly() {
        let ds = generate_planted::<f64>(
            1,
            &PlantedSpec { d_in: 8, hidden: 6, classes: 3, n_samples: 64, ..Default::default() },
        )
        .unwrap();
        let build = || {
            build_mlp::<f64>(
                &[8, 6],
                3,
                objective(1.0, 0.4),
                TaskKind::Classification,
                DEFAULT_SIGMA,
                2,
            )
            .unwrap()
        };
        let cfg = TrainConfig { epochs: 3, batch_size: 16, lambda: 1.0, target_sparsity: 0.4, seed: 5, ..Default::default() };
        let a = train(build(), &ds, &cfg).unwrap();
        let b = train(build(), &ds, &cfg).unwrap();
        assert_eq!(a.records.len(), b.records.len());
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.train_loss, rb.train_loss);
            assert_eq!(ra.val_metric, rb.val_metric);
            assert_eq!(ra.grad_norm, rb.grad_norm);
        }
        assert_eq!(
            a.model.layers[0].gate_r.mu,
            b.model.layers[0].gate_r.mu
        );
    }

    #[test]
    fn frozen_weights_never_move() {
        let ds = generate_planted::<f64>(
            2,
            &PlantedSpec { d_in: 8, hidden: 6, classes: 3, n_samples: 64, ..Default::default() },
        )
        .unwrap();
        let model = build_mlp::<f64>(
            &[8, 6],
            3,
            objective(2.0, 0.3),
            TaskKind::Classification,
            DEFAULT_SIGMA,
            3,
        )
        .unwrap();
        let hash_before = model.frozen_hash();
        let cfg = TrainConfig { epochs: 2, batch_size: 16, lambda: 2.0, target_sparsity: 0.3, ..Default::default() };
        let run = train(model, &ds, &cfg).unwrap();
        assert_eq!(run.model.frozen_hash(), hash_before);
    }

    #[test]
    fn divergence_reports_and_keeps_last_good() {
        let ds = generate_planted::<f64>(
            3,
            &PlantedSpec { d_in: 8, hidden: 6, classes: 3, n_samples: 64, ..Default::default() },
        )
        .unwrap();
        let model = build_mlp::<f64>(
            &[8, 6],
            3,
            objective(0.0, 0.0),
            TaskKind::Classification,
            DEFAULT_SIGMA,
            4,
        )
        .unwrap();
        // decoupled decay with lr*wd >> 1 flips and amplifies the head each
        // step, overflowing to inf within a few steps
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 16,
            lr_gates: 1e12,
            lr_bias_head: 1e30,
            weight_decay: 1e40,
            ..Default::default()
        };
        match train(model, &ds, &cfg) {
            Err(TrainError::Diverged { last_good, .. }) => {
                assert!(last_good.head.w.all_finite());
            }
            other => panic!("expected divergence, got {:?}", other.map(|r| r.records.len())),
        }
    }

    #[test]
    fn schedule_factors() {
        let s = Schedule::WarmupCosine { warmup_steps: 10, floor_frac: 0.1 };
        assert!((s.factor(0, 110) - 0.1).abs() < 1e-12);
        assert!((s.factor(9, 110) - 1.0).abs() < 1e-12);
        // end of cosine lands on the floor
        assert!((s.factor(109, 110) - 0.1).abs() < 2e-3);
        assert_eq!(Schedule::Constant.factor(50, 100), 1.0);
    }

    #[test]
    fn grad_check_small_mlp_tight() {
        let mut model = small_model(1.5);
        // move gates into the interior so the check has live coordinates
        let mut rng = RngStream::new(21);
        for l in model.layers.iter_mut() {
            for v in l.gate_r.mu.iter_mut() {
                *v = rng.next_gauss() * 0.1;
            }
            for v in l.gate_c.mu.iter_mut() {
                *v = rng.next_gauss() * 0.1;
            }
        }
        let (x, y) = small_batch();
        let report = grad_check(
            &model,
            &InputRef::Dense(&x),
            &TargetsRef::Classes(&y),
            1e-3,
            1e-7,
        )
        .unwrap();
        assert!(
            report.passed(),
            "max rel err {} (per-param: {:?})",
            report.max_rel_err,
            report
                .per_param
                .iter()
                .map(|p| (p.name.clone(), p.max_rel_err))
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn grad_check_with_kurtosis_weighting() {
        let mut model = small_model(1.5);
        model.objective.kurtosis_weighting = true;
        // small floors so the weighted hinge stays active
        model.objective.target_sparsity = 0.995;
        let mut rng = RngStream::new(22);
        for l in model.layers.iter_mut() {
            for v in l.gate_r.mu.iter_mut() {
                *v = rng.next_gauss() * 0.1;
            }
            for v in l.gate_c.mu.iter_mut() {
                *v = rng.next_gauss() * 0.1;
            }
        }
        let (x, y) = small_batch();
        let report = grad_check(
            &model,
            &InputRef::Dense(&x),
            &TargetsRef::Classes(&y),
            1e-3,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn regression_loss_and_metric() {
        let logits = Matrix::<f64>::from_vec(2, 1, vec![1.0, 3.0]);
        let targets = Matrix::from_vec(2, 1, vec![0.0, 3.0]);
        let (loss, d) = task_loss(
            TaskKind::Regression,
            &logits,
            &TargetsRef::Values(&targets),
        );
        assert!((loss - 0.25).abs() < 1e-12); // 0.5*(1)/2
        assert!((d[(0, 0)] - 0.5).abs() < 1e-12);
        let m = eval_metric(TaskKind::Regression, &logits, &TargetsRef::Values(&targets));
        assert!((m - 0.5).abs() < 1e-12);
    }
}
