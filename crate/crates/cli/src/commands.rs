//! Subcommand implementations. Every run writes a self-describing artifact
//! directory; exit status is zero only when the subcommand's internal
//! assertions hold.

use crate::config::{ArchKind, DataSource, InitMode, RunConfig};
use anyhow::{anyhow, bail, Context, Result};
use finegates::bench::{masks_for_level, speedup_report, time_forward, LevelRun, Variant};
use finegates::compact::{
    binarize, compact_model, gate_statistics, masked_dense_model, verify_equivalence,
    CompactModel, CompactionPolicy,
};
use finegates::data::{generate_planted, load_csv, CsvSchema, Dataset, PlantedSpec};
use finegates::landscape::{
    compare_gates_vs_lora, convergence_experiment, gates_jacobian, pl_trace, CompareConfig,
    ConvergenceConfig, PlInit, PlProblem,
};
use finegates::matrix::Matrix;
use finegates::model::{build_mlp, build_transformer, Arch, Container, GatedModel, TaskKind};
use finegates::precision::Real;
use finegates::rng::RngStream;
use finegates::train::{evaluate_split, grad_check, train, TrainError};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// `FG_PRECISION` overrides the per-command default dtype.
pub fn precision_from_env(default: Precision) -> Result<Precision> {
    match std::env::var("FG_PRECISION") {
        Ok(v) => match v.as_str() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => bail!("FG_PRECISION must be f32 or f64, got {other:?}"),
        },
        Err(_) => Ok(default),
    }
}

fn write_artifact(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output dir {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, contents)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn load_dataset<T: Real>(cfg: &RunConfig) -> Result<Dataset<T>> {
    match cfg.data_source {
        DataSource::Planted => {
            let spec = PlantedSpec {
                d_in: cfg.d_in,
                hidden: cfg.hidden,
                keep_frac: cfg.keep_frac,
                n_samples: cfg.n_samples,
                noise: cfg.noise,
                task: cfg.task,
                classes: cfg.classes,
                head_signs: false,
            };
            Ok(generate_planted(cfg.data_seed, &spec)?)
        }
        DataSource::Csv => {
            let path = cfg.data_path.as_ref().expect("validated");
            let schema = CsvSchema {
                label_col: cfg.label_col.clone(),
                tokens_col: cfg.tokens_col.clone(),
                task: cfg.task,
                split_seed: cfg.data_seed,
                train_frac: 0.8,
            };
            Ok(load_csv(path, &schema)?)
        }
    }
}

fn build_model<T: Real>(cfg: &RunConfig, data: &Dataset<T>) -> Result<GatedModel<T>> {
    let head_out = cfg.head_out.unwrap_or_else(|| data.head_out());
    let objective = finegates::gates::SparsityObjective::new(
        T::from_f64(cfg.lambda),
        cfg.target_sparsity,
    );
    match cfg.init_mode {
        InitMode::Checkpoint => {
            let path = cfg.init_checkpoint.as_ref().expect("validated");
            Ok(GatedModel::load_checkpoint(path)?)
        }
        InitMode::Teacher => {
            let teacher = data
                .teacher
                .as_ref()
                .ok_or_else(|| anyhow!("teacher init needs a planted dataset"))?;
            let d_in = teacher.w1.cols();
            let hidden = teacher.w1.rows();
            let mut hrng = RngStream::new(cfg.init_seed).substream(0x4e);
            let scale = (2.0 / hidden as f64).sqrt();
            let head = finegates::layers::Linear {
                w: Matrix::from_fn(head_out, hidden, |_, _| {
                    T::from_f64(hrng.next_gauss() * scale)
                }),
                bias: vec![T::zero(); head_out],
            };
            Ok(GatedModel {
                arch: Arch::Mlp { widths: vec![d_in, hidden], head_out },
                task: cfg.task,
                layers: vec![finegates::layers::GatedLinear::new(
                    teacher.w1.clone(),
                    teacher.b1.clone(),
                    finegates::gates::DEFAULT_SIGMA,
                )],
                head,
                embed: None,
                lns: vec![],
                objective,
                sigma: finegates::gates::DEFAULT_SIGMA,
            })
        }
        InitMode::Random => match cfg.arch_kind {
            ArchKind::Mlp => {
                if let Some(d) = data.input_width() {
                    if cfg.widths[0] != d {
                        bail!(
                            "arch.widths[0] = {} but the dataset has {} features",
                            cfg.widths[0],
                            d
                        );
                    }
                }
                Ok(build_mlp(
                    &cfg.widths,
                    head_out,
                    objective,
                    cfg.task,
                    finegates::gates::DEFAULT_SIGMA,
                    cfg.init_seed,
                )?)
            }
            ArchKind::Transformer => Ok(build_transformer(
                cfg.vocab,
                cfg.seq_len,
                cfg.d_model,
                cfg.n_heads,
                cfg.d_ff,
                cfg.n_blocks,
                head_out,
                cfg.gate_mlp,
                objective,
                cfg.task,
                finegates::gates::DEFAULT_SIGMA,
                cfg.init_seed,
            )?),
        },
    }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn cmd_train<T: Real>(config_path: &Path) -> Result<()> {
    let cfg = RunConfig::parse_file(config_path)?;
    let data: Dataset<T> = load_dataset(&cfg)?;
    let model = build_model(&cfg, &data)?;
    write_artifact(&cfg.out_dir, "config.resolved", &cfg.resolved_snapshot())?;

    match train(model, &data, &cfg.train_config()) {
        Ok(run) => {
            let ckpt = cfg.out_dir.join("model.fgck");
            run.model.save_checkpoint(&ckpt)?;
            let mut log = Vec::new();
            run.write_metrics_log(&mut log)?;
            write_artifact(&cfg.out_dir, "metrics.log", &String::from_utf8_lossy(&log))?;
            if cfg.snapshot_gates {
                if let Ok(stats) = gate_statistics(&run) {
                    write_artifact(&cfg.out_dir, "gate_stats.txt", &stats.to_table())?;
                }
            }
            let counts = run.model.param_counts();
            let mut summary = String::new();
            let _ = writeln!(summary, "epochs={}", run.records.len());
            if let Some(last) = run.records.last() {
                let _ = writeln!(summary, "final_val_metric={:.6}", last.val_metric);
                let _ = writeln!(summary, "final_train_loss={:.6}", last.train_loss);
            }
            let _ = writeln!(summary, "trainable_params={}", counts.trainable());
            let _ = writeln!(summary, "frozen_params={}", counts.frozen);
            let _ = writeln!(summary, "checkpoint={}", ckpt.display());
            write_artifact(&cfg.out_dir, "train_report.txt", &summary)?;
            println!("{summary}");
            Ok(())
        }
        Err(TrainError::Diverged { epoch, step, last_good }) => {
            let path = cfg.out_dir.join("model.lastgood.fgck");
            last_good.save_checkpoint(&path)?;
            bail!(
                "training diverged at epoch {epoch}, step {step}; last-good checkpoint saved to {}",
                path.display()
            );
        }
        Err(e) => Err(e.into()),
    }
}

// ---------------------------------------------------------------------------
// compact
// ---------------------------------------------------------------------------

pub fn cmd_compact<T: Real>(
    ckpt: &Path,
    out: &Path,
    policy_name: &str,
    tau: f64,
) -> Result<()> {
    let policy = match policy_name {
        "tau" => CompactionPolicy::Tau(tau),
        "support" => CompactionPolicy::Support,
        other => bail!("--policy must be tau or support, got {other:?}"),
    };
    let model: GatedModel<T> = GatedModel::load_checkpoint(ckpt)?;
    let bin = binarize(&model, policy);
    let (compact, mut report) = compact_model(&model, &bin)?;
    report.policy = policy.name();
    let deviation = verify_equivalence(&model, &bin, &compact, 32, 0)?;
    report.equivalence_max_abs = Some(deviation);

    let ckpt_out = out.join("compacted.fgck");
    std::fs::create_dir_all(out)?;
    compact.save_checkpoint(&ckpt_out)?;
    write_artifact(out, "compact_report.txt", &report.to_table())?;
    write_artifact(out, "compact_report.kv", &report.to_machine())?;
    println!("{}", report.to_table());

    if deviation > T::EQUIV_TOL {
        bail!(
            "compacted forward deviates from the masked forward by {deviation:.3e} (> {:.0e})",
            T::EQUIV_TOL
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn dataset_from_eval_arg<T: Real>(data_arg: &Path) -> Result<Dataset<T>> {
    if data_arg.extension().is_some_and(|e| e == "csv") {
        Ok(load_csv(data_arg, &CsvSchema::default())?)
    } else {
        let cfg = RunConfig::parse_file(data_arg)?;
        load_dataset(&cfg)
    }
}

fn eval_compact_split<T: Real>(
    model: &CompactModel<T>,
    data: &Dataset<T>,
    idx: &[usize],
) -> Result<f64> {
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let mut weighted = 0.0;
    for part in idx.chunks(256) {
        let input = data.gather_input(part);
        let labels = data.gather_labels(part);
        let logits = model.forward(&input.as_input_ref())?;
        let m = finegates::train::eval_metric(model.task, &logits, &labels.as_targets_ref());
        weighted += m * part.len() as f64;
    }
    Ok(weighted / idx.len() as f64)
}

pub fn cmd_eval<T: Real>(ckpt: &Path, data_arg: &Path) -> Result<()> {
    let data: Dataset<T> = dataset_from_eval_arg(data_arg)?;
    let container = Container::read_from(ckpt)?;
    let kind = container.require_meta("kind")?.to_string();
    let (train_m, val_m, task) = match kind.as_str() {
        "gated" => {
            let model = GatedModel::<T>::from_container(&container)?;
            (
                evaluate_split(&model, &data, &data.train_idx)
                    .map_err(|e: TrainError<T>| anyhow!(e.to_string()))?,
                evaluate_split(&model, &data, &data.val_idx)
                    .map_err(|e: TrainError<T>| anyhow!(e.to_string()))?,
                model.task,
            )
        }
        "compact" => {
            let model = CompactModel::<T>::from_container(&container)?;
            (
                eval_compact_split(&model, &data, &data.train_idx)?,
                eval_compact_split(&model, &data, &data.val_idx)?,
                model.task,
            )
        }
        other => bail!("unknown checkpoint kind {other:?}"),
    };
    let metric_name = match task {
        TaskKind::Classification => "accuracy",
        TaskKind::Regression => "mse",
    };
    let mut report = String::new();
    let _ = writeln!(report, "checkpoint_kind={kind}");
    let _ = writeln!(report, "metric={metric_name}");
    let _ = writeln!(report, "train_metric={train_m:.6}");
    let _ = writeln!(report, "val_metric={val_m:.6}");
    let _ = writeln!(report, "n_train={}", data.train_idx.len());
    let _ = writeln!(report, "n_val={}", data.val_idx.len());
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    write_artifact(dir, "eval_report.txt", &report)?;
    println!("{report}");
    Ok(())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

pub fn cmd_bench<T: Real>(
    ckpt: &Path,
    levels_arg: &str,
    repeats: usize,
    batch: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    if repeats < finegates::bench::MIN_REPEATS {
        bail!(
            "--repeats must be >= {} for reportable numbers",
            finegates::bench::MIN_REPEATS
        );
    }
    let levels: Vec<f64> = levels_arg
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| anyhow!("bad level {s:?}"))
        })
        .collect::<Result<_>>()?;
    let model: GatedModel<T> = GatedModel::load_checkpoint(ckpt)?;
    let mut rng = RngStream::new(seed).substream(0xbe);
    let input = finegates::compact::sample_inputs::<T>(&model.arch, batch, &mut rng);

    let mut runs = Vec::new();
    for &level in &levels {
        let bin = masks_for_level(&model, level, seed);
        let masked = masked_dense_model(&model, &bin)?;
        let (compacted, report) = compact_model(&model, &bin)?;
        let masked_stats = time_forward(Variant::MaskedDense, &masked, &input, repeats)?;
        let compact_stats = time_forward(Variant::Compacted, &compacted, &input, repeats)?;
        println!(
            "level {level:.2}: removed {:.2}% masked {:.0}ns compact {:.0}ns",
            100.0 * report.removed_fraction,
            masked_stats.median_ns,
            compact_stats.median_ns
        );
        runs.push(LevelRun {
            label: level,
            removed_fraction: report.removed_fraction,
            masked: masked_stats,
            compacted: compact_stats,
        });
    }
    let report = speedup_report(&runs)?;
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).to_path_buf());
    write_artifact(&dir, "bench_report.txt", &report.to_table())?;
    write_artifact(&dir, "bench_plot.tsv", &report.to_plot_columns())?;
    println!("{}", report.to_table());
    Ok(())
}

// ---------------------------------------------------------------------------
// landscape
// ---------------------------------------------------------------------------

pub fn cmd_landscape(experiment: &str, out: Option<&Path>, seed: u64) -> Result<()> {
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("runs/landscape"));
    match experiment {
        "jlower" => {
            let mut rng = RngStream::new(seed).substream(0x71);
            let mut report = String::from(
                "instance\tm\tn\tgram_min_eig\tgram_second_eig\tblock_vs_direct\tnull_residual\n",
            );
            let mut max_block_err = 0.0f64;
            let mut min_eig_positive_everywhere = true;
            let mut second_eig_positive_everywhere = true;
            for inst in 0..100 {
                let m = 2 + rng.next_below(7);
                let n = 2 + rng.next_below(7);
                let w0 = Matrix::<f64>::from_fn(m, n, |_, _| {
                    let v = rng.next_gauss();
                    v.signum() * (0.1 + v.abs())
                });
                let omega_r: Vec<f64> =
                    (0..m).map(|_| 0.1 + 0.9 * rng.next_uniform()).collect();
                let omega_c: Vec<f64> =
                    (0..n).map(|_| 0.1 + 0.9 * rng.next_uniform()).collect();
                let rep = gates_jacobian(&w0, &omega_r, &omega_c)
                    .map_err(|e| anyhow!(e.to_string()))?;
                max_block_err = max_block_err.max(rep.block_vs_direct_max_abs);
                min_eig_positive_everywhere &= rep.gram_min_eig > 0.0;
                second_eig_positive_everywhere &= rep.gram_second_eig > 0.0;
                let _ = writeln!(
                    report,
                    "{inst}\t{m}\t{n}\t{:.3e}\t{:.3e}\t{:.3e}\t{:.3e}",
                    rep.gram_min_eig,
                    rep.gram_second_eig,
                    rep.block_vs_direct_max_abs,
                    rep.scaling_null_residual
                );
            }
            let _ = writeln!(report, "max_block_vs_direct={max_block_err:.3e}");
            let _ = writeln!(report, "gram_min_eig_positive_on_every_instance={min_eig_positive_everywhere}");
            let _ = writeln!(
                report,
                "gram_second_eig_positive_on_every_instance={second_eig_positive_everywhere}"
            );
            write_artifact(&dir, "landscape_jlower.txt", &report)?;
            println!("{report}");
            if max_block_err > 1e-12 {
                bail!("block-assembled Gram deviates from direct JᵀJ by {max_block_err:.3e}");
            }
            if !min_eig_positive_everywhere {
                bail!(
                    "gram_min_eig is not positive on every instance: the gate map's rescaling \
                     symmetry (c*rows, cols/c) is an exact Jacobian null direction, so the \
                     smallest Gram eigenvalue is identically zero (see the null_residual column; \
                     the second eigenvalue is positive on every instance)"
                );
            }
            Ok(())
        }
        "counterexample" => {
            let mut rng = RngStream::new(seed).substream(0x72);
            let mut report =
                String::from("instance\tgrad_norm_at_origin\tgap\tratio\n");
            let mut ok = true;
            for inst in 0..50 {
                let m = 2 + rng.next_below(5);
                let n = 2 + rng.next_below(5);
                let w0 = Matrix::<f64>::from_fn(m, n, |_, _| rng.next_gauss());
                let w_star = Matrix::<f64>::from_fn(m, n, |_, _| rng.next_gauss());
                let rank = 1 + rng.next_below(m.min(n));
                let problem = PlProblem::LoraQuadratic { w0, w_star, rank };
                let trace = pl_trace(&problem, &PlInit::LoraOrigin, 1, 0.05)
                    .map_err(|e| anyhow!(e.to_string()))?;
                let step = trace.steps.first().copied().ok_or_else(|| {
                    anyhow!("instance {inst} started at the optimum (W0 == W*)")
                })?;
                let grad_norm = step.grad_sq.sqrt();
                ok &= grad_norm <= 1e-12 && step.gap > 0.0 && step.ratio == 0.0;
                let _ = writeln!(
                    report,
                    "{inst}\t{grad_norm:.3e}\t{:.6e}\t{:.3e}",
                    step.gap, step.ratio
                );
            }
            let _ = writeln!(report, "all_saddles_detected={ok}");
            write_artifact(&dir, "landscape_counterexample.txt", &report)?;
            println!("{report}");
            if !ok {
                bail!("a low-rank origin failed the zero-gradient/positive-gap check");
            }
            Ok(())
        }
        "convergence" => {
            let cfg = ConvergenceConfig { seed, ..Default::default() };
            let trace = convergence_experiment(&cfg).map_err(|e| anyhow!(e.to_string()))?;
            let mut report = String::new();
            let _ = writeln!(report, "l_hat={:.6e}", trace.l_hat);
            let _ = writeln!(report, "eta={:.6e}", trace.eta);
            let _ = writeln!(report, "steps_run={}", trace.steps_run);
            let _ = writeln!(report, "final_grad_norm={:.6e}", trace.final_grad_norm);
            let worst_residual = trace
                .descent_residual
                .iter()
                .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let _ = writeln!(report, "worst_descent_residual={worst_residual:.6e}");
            write_artifact(&dir, "landscape_convergence.txt", &report)?;
            write_artifact(&dir, "convergence_trace.tsv", &trace.to_plot_columns())?;
            println!("{report}");
            if worst_residual > 1e-10 {
                bail!("descent residual {worst_residual:.3e} exceeds 1e-10");
            }
            if trace.final_grad_norm >= 1e-5 {
                bail!(
                    "gradient norm {:.3e} did not fall below 1e-5 within {} steps",
                    trace.final_grad_norm,
                    cfg.steps
                );
            }
            Ok(())
        }
        other => bail!("--experiment must be jlower, counterexample, or convergence, got {other:?}"),
    }
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

pub fn cmd_gradcheck(config_path: &Path) -> Result<()> {
    // gradient oracles need 64-bit headroom
    if precision_from_env(Precision::F64)? == Precision::F32 {
        bail!("gradcheck runs in f64; unset FG_PRECISION or set it to f64");
    }
    let cfg = RunConfig::parse_file(config_path)?;
    let data: Dataset<f64> = load_dataset(&cfg)?;
    let mut model = build_model(&cfg, &data)?;
    cfg.train_config().apply_objective(&mut model);
    // nudge gates into the interior so clamp-live coordinates dominate
    let mut grng = RngStream::new(cfg.init_seed).substream(0x6c);
    for l in model.layers.iter_mut() {
        if !l.adapted {
            continue;
        }
        for v in l.gate_r.mu.iter_mut() {
            *v = 0.3 - grng.next_uniform() * 0.4;
        }
        for v in l.gate_c.mu.iter_mut() {
            *v = 0.3 - grng.next_uniform() * 0.4;
        }
    }
    let idx: Vec<usize> = data
        .train_idx
        .iter()
        .copied()
        .take(cfg.gradcheck_batch)
        .collect();
    let input = data.gather_input(&idx);
    let labels = data.gather_labels(&idx);
    let report = grad_check(
        &model,
        &input.as_input_ref(),
        &labels.as_targets_ref(),
        cfg.gradcheck_h,
        cfg.gradcheck_tolerance,
    )
    .map_err(|e: TrainError<f64>| anyhow!(e.to_string()))?;

    let mut text = String::new();
    let _ = writeln!(text, "h={:?}", cfg.gradcheck_h);
    let _ = writeln!(text, "tolerance={:?}", cfg.gradcheck_tolerance);
    for p in &report.per_param {
        let _ = writeln!(
            text,
            "param={} max_rel_err={:.3e} worst_index={} checked={} skipped={}",
            p.name, p.max_rel_err, p.worst_index, p.checked, p.skipped
        );
    }
    let _ = writeln!(text, "max_rel_err={:.6e}", report.max_rel_err);
    let _ = writeln!(text, "passed={}", report.passed());
    write_artifact(&cfg.out_dir, "gradcheck_report.txt", &text)?;
    println!("{text}");
    if !report.passed() {
        bail!(
            "gradient check failed: max rel err {:.3e} >= {:.0e}",
            report.max_rel_err,
            cfg.gradcheck_tolerance
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

fn parse_seeds(arg: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = arg.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| anyhow!("bad seed {a:?}"))?;
        let b: u64 = b.trim().parse().map_err(|_| anyhow!("bad seed {b:?}"))?;
        if b < a {
            bail!("empty seed range {arg:?}");
        }
        Ok((a..=b).collect())
    } else {
        arg.split(',')
            .map(|s| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| anyhow!("bad seed {s:?}"))
            })
            .collect()
    }
}

pub fn cmd_compare(config_path: &Path, seeds_arg: &str) -> Result<()> {
    let cfg = RunConfig::parse_file(config_path)?;
    if cfg.data_source != DataSource::Planted {
        bail!("compare runs on the planted task; set data.source=planted");
    }
    let seeds = parse_seeds(seeds_arg)?;
    let ccfg = CompareConfig {
        planted: PlantedSpec {
            d_in: cfg.d_in,
            hidden: cfg.hidden,
            keep_frac: cfg.keep_frac,
            n_samples: cfg.n_samples,
            noise: cfg.noise,
            task: cfg.task,
            classes: cfg.classes,
            head_signs: false,
        },
        data_seed: cfg.data_seed,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr_gates: cfg.lr_gates,
        lr_bias_head: cfg.lr_bias_head,
        lambda: cfg.lambda,
        target_sparsity: cfg.target_sparsity,
        lora_rank: cfg.compare_lora_rank,
    };
    let table = compare_gates_vs_lora(&ccfg, &seeds).map_err(|e| anyhow!(e.to_string()))?;
    write_artifact(&cfg.out_dir, "compare_table.txt", &table.to_text())?;
    write_artifact(&cfg.out_dir, "compare_plot.tsv", &table.to_plot_columns())?;
    println!(
        "gates median epochs to 90% of final: {:.1}; low-rank baseline: {:.1}",
        table.gates_median_epochs_to_90, table.lora_median_epochs_to_90
    );
    Ok(())
}
