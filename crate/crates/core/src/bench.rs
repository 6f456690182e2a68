//! Wall-clock forward-pass timing: masked-dense versus compacted models.
//!
//! Runs are strictly single-threaded: the harness enters a sequential scope
//! for the duration of a measurement and refuses to run from inside a
//! worker-pool thread. Both variants execute the same forward code path
//! (`CompactModel::forward`); only the dimensions differ.

use crate::compact::CompactModel;
use crate::data::BatchInput;
use crate::matrix::Matrix;
use crate::model::ModelError;
use crate::parallel::{on_worker_thread, sequential_scope};
use crate::precision::Real;
use std::fmt::Write as _;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("timing must run on the main thread, not inside a worker pool")]
    WorkerThread,
    #[error("reported timings need >= {MIN_REPEATS} repeats, got {0}")]
    InsufficientRepeats(usize),
    #[error("timed run produced different bytes than the untimed run")]
    OutputMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("need at least two sparsity levels, got {0}")]
    TooFewLevels(usize),
}

/// Minimum repeats for any reported number.
pub const MIN_REPEATS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    MaskedDense,
    Compacted,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::MaskedDense => "masked-dense",
            Variant::Compacted => "compacted",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TimingStats {
    pub variant: Variant,
    pub median_ns: f64,
    pub median_abs_deviation_ns: f64,
    pub repeats: usize,
    pub warmup_repeats: usize,
    pub batch: usize,
    pub dtype: &'static str,
    /// Timed outputs compared bitwise against an untimed reference run.
    pub outputs_bitwise_equal: bool,
}

fn median_of(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn bits_equal<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> bool {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return false;
    }
    let mut ba = Vec::new();
    let mut bb = Vec::new();
    for &v in a.data() {
        v.write_le(&mut ba);
    }
    for &v in b.data() {
        v.write_le(&mut bb);
    }
    ba == bb
}

/// Times `repeats` forward passes of one model variant on a fixed input,
/// single-threaded, after warmup. The same input bytes must be fed to both
/// variants by the caller.
pub fn time_forward<T: Real>(
    variant: Variant,
    model: &CompactModel<T>,
    input: &BatchInput<T>,
    repeats: usize,
) -> Result<TimingStats, BenchError> {
    if on_worker_thread() {
        return Err(BenchError::WorkerThread);
    }
    sequential_scope(|| {
        let iref = input.as_input_ref();
        let reference = model.forward(&iref)?;
        let warmup = (repeats / 10).clamp(3, 20);
        for _ in 0..warmup {
            let out = model.forward(&iref)?;
            std::hint::black_box(&out);
        }
        let mut samples = Vec::with_capacity(repeats);
        let mut last = None;
        for _ in 0..repeats {
            let start = Instant::now();
            let out = model.forward(&iref)?;
            samples.push(start.elapsed().as_nanos() as f64);
            std::hint::black_box(&out);
            last = Some(out);
        }
        let equal = last.map_or(true, |out| bits_equal(&out, &reference));
        if !equal {
            return Err(BenchError::OutputMismatch);
        }
        samples.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
        let median = median_of(&samples);
        let mut devs: Vec<f64> = samples.iter().map(|s| (s - median).abs()).collect();
        devs.sort_by(|a, b| a.partial_cmp(b).expect("finite deviations"));
        Ok(TimingStats {
            variant,
            median_ns: median,
            median_abs_deviation_ns: median_of(&devs),
            repeats,
            warmup_repeats: warmup,
            batch: input.len(),
            dtype: T::DTYPE.name(),
            outputs_bitwise_equal: equal,
        })
    })
}

/// One measured sparsity level.
#[derive(Debug, Clone)]
pub struct LevelRun {
    pub label: f64,
    pub removed_fraction: f64,
    pub masked: TimingStats,
    pub compacted: TimingStats,
}

#[derive(Debug, Clone)]
pub struct SpeedupRow {
    pub removed_fraction: f64,
    pub masked_ns: f64,
    pub compacted_ns: f64,
    /// `(t0 - t_i) / t0` where `t0` is the masked-dense median at the
    /// lowest removal level.
    pub reduction: f64,
}

#[derive(Debug, Clone)]
pub struct SpeedupReport {
    pub rows: Vec<SpeedupRow>,
}

/// Tabulates time reduction against removed-parameter fraction, sorted by
/// removal. Refuses under-sampled runs.
pub fn speedup_report(runs: &[LevelRun]) -> Result<SpeedupReport, BenchError> {
    if runs.is_empty() {
        return Err(BenchError::TooFewLevels(0));
    }
    for r in runs {
        for stats in [&r.masked, &r.compacted] {
            if stats.repeats < MIN_REPEATS {
                return Err(BenchError::InsufficientRepeats(stats.repeats));
            }
        }
    }
    let mut sorted: Vec<&LevelRun> = runs.iter().collect();
    sorted.sort_by(|a, b| {
        a.removed_fraction
            .partial_cmp(&b.removed_fraction)
            .expect("finite fractions")
    });
    let t0 = sorted[0].masked.median_ns;
    let rows = sorted
        .into_iter()
        .map(|r| SpeedupRow {
            removed_fraction: r.removed_fraction,
            masked_ns: r.masked.median_ns,
            compacted_ns: r.compacted.median_ns,
            reduction: (t0 - r.compacted.median_ns) / t0,
        })
        .collect();
    Ok(SpeedupReport { rows })
}

impl SpeedupReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>10} {:>14} {:>14} {:>12}",
            "removed", "masked_ns", "compacted_ns", "reduction"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>9.2}% {:>14.0} {:>14.0} {:>11.2}%",
                100.0 * r.removed_fraction,
                r.masked_ns,
                r.compacted_ns,
                100.0 * r.reduction
            );
        }
        s
    }

    /// Two tab-separated columns: removed fraction, time reduction.
    pub fn to_plot_columns(&self) -> String {
        let mut s = String::from("removed_fraction\treduction\n");
        for r in &self.rows {
            let _ = writeln!(s, "{:.6}\t{:.6}", r.removed_fraction, r.reduction);
        }
        s
    }
}

/// Seeded row/column kill masks hitting roughly the requested removal
/// fraction per matrix: killing a fraction `r` of rows and of columns
/// removes `1 - (1-r)^2` of the entries, so `r = 1 - sqrt(1 - level)`.
pub fn masks_for_level<T: Real>(
    model: &crate::model::GatedModel<T>,
    level: f64,
    seed: u64,
) -> crate::compact::Binarized<T> {
    assert!((0.0..1.0).contains(&level));
    let kill = 1.0 - (1.0 - level).sqrt();
    let mut rng = crate::rng::RngStream::new(seed).substream(0xb1);
    let mut ambiguity = 0usize;
    let _ = &mut ambiguity;
    let masks = model
        .layers
        .iter()
        .map(|layer| {
            let mut axis = |n: usize| -> Vec<T> {
                let target = ((n as f64) * kill).round() as usize;
                let mut ids: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut ids);
                let mut mask = vec![T::one(); n];
                for &i in ids.iter().take(target.min(n.saturating_sub(1))) {
                    mask[i] = T::zero();
                }
                mask
            };
            (axis(layer.out_dim()), axis(layer.in_dim()))
        })
        .collect();
    crate::compact::Binarized { masks, ambiguity_mass: 0 }
}
