//! Flat key=value run configuration.
//!
//! Dotted keys give sections (`train.lr_gates=1e-3`), `#` starts a comment,
//! and unknown keys are a hard error — a typo must never silently fall back
//! to a default. Every run writes a resolved snapshot (all keys, defaults
//! filled in, sorted) beside its outputs.

use anyhow::{anyhow, bail, Context, Result};
use finegates::gates::GateAxis;
use finegates::model::TaskKind;
use finegates::train::Schedule;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArchKind {
    Mlp,
    Transformer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InitMode {
    /// Seeded He-style random weights.
    Random,
    /// Planted-teacher weights (planted data source only).
    Teacher,
    /// Load frozen weights (and gates) from a checkpoint.
    Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    Planted,
    Csv,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub out_dir: PathBuf,

    pub arch_kind: ArchKind,
    pub widths: Vec<usize>,
    pub vocab: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_blocks: usize,
    pub head_out: Option<usize>,
    pub gate_mlp: bool,

    pub init_mode: InitMode,
    pub init_seed: u64,
    pub init_checkpoint: Option<PathBuf>,

    pub data_source: DataSource,
    pub data_path: Option<PathBuf>,
    pub label_col: String,
    pub tokens_col: Option<String>,
    pub task: TaskKind,
    pub data_seed: u64,
    pub d_in: usize,
    pub hidden: usize,
    pub keep_frac: f64,
    pub n_samples: usize,
    pub noise: f64,
    pub classes: usize,

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
    pub train_seed: u64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub train_bias: bool,
    pub lowrank_rank: Option<usize>,
    pub snapshot_gates: bool,

    pub gradcheck_h: f64,
    pub gradcheck_tolerance: f64,
    pub gradcheck_batch: usize,

    pub compare_lora_rank: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("runs/out"),
            arch_kind: ArchKind::Mlp,
            widths: vec![32, 64],
            vocab: 64,
            seq_len: 8,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            n_blocks: 1,
            head_out: None,
            gate_mlp: true,
            init_mode: InitMode::Random,
            init_seed: 0,
            init_checkpoint: None,
            data_source: DataSource::Planted,
            data_path: None,
            label_col: "label".into(),
            tokens_col: None,
            task: TaskKind::Classification,
            data_seed: 0,
            d_in: 32,
            hidden: 64,
            keep_frac: 0.6,
            n_samples: 512,
            noise: 0.1,
            classes: 3,
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
            train_seed: 0,
            schedule: Schedule::Constant,
            weight_decay: 0.0,
            train_bias: true,
            lowrank_rank: None,
            snapshot_gates: true,
            gradcheck_h: 1e-3,
            gradcheck_tolerance: 1e-6,
            gradcheck_batch: 8,
            compare_lora_rank: 4,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => bail!("{key}: expected true/false, got {v:?}"),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| anyhow!("{key}: cannot parse {v:?}"))
}

/// Per-layer override keys look like `train.layer3.target_rows`.
fn parse_layer_override(key: &str, rest: &str, v: &str) -> Result<(usize, GateAxis, f64)> {
    let (layer_part, field) = rest
        .split_once('.')
        .ok_or_else(|| anyhow!("{key}: expected train.layerN.target_rows|target_cols"))?;
    let idx: usize = layer_part
        .strip_prefix("layer")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| anyhow!("{key}: bad layer index"))?;
    let axis = match field {
        "target_rows" => GateAxis::Row,
        "target_cols" => GateAxis::Column,
        _ => bail!("{key}: unknown per-layer field {field:?}"),
    };
    let t: f64 = parse_num(key, v)?;
    if !(0.0..=1.0).contains(&t) {
        bail!("{key}: target {t} outside [0, 1]");
    }
    Ok((idx, axis, t))
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut schedule_kind = "constant".to_string();
        let mut warmup_steps = 100usize;
        let mut schedule_floor = 0.1f64;
        let mut seen = BTreeMap::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key=value, got {raw:?}", lineno + 1))?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(prev) = seen.insert(key.to_string(), lineno + 1) {
                bail!("line {}: duplicate key {key} (first at line {prev})", lineno + 1);
            }
            match key {
                "out.dir" => cfg.out_dir = PathBuf::from(value),
                "arch.kind" => {
                    cfg.arch_kind = match value {
                        "mlp" => ArchKind::Mlp,
                        "transformer" => ArchKind::Transformer,
                        _ => bail!("{key}: unknown arch {value:?}"),
                    }
                }
                "arch.widths" => {
                    cfg.widths = value
                        .split(',')
                        .map(|s| parse_num::<usize>(key, s.trim()))
                        .collect::<Result<_>>()?;
                }
                "arch.vocab" => cfg.vocab = parse_num(key, value)?,
                "arch.seq_len" => cfg.seq_len = parse_num(key, value)?,
                "arch.d_model" => cfg.d_model = parse_num(key, value)?,
                "arch.n_heads" => cfg.n_heads = parse_num(key, value)?,
                "arch.d_ff" => cfg.d_ff = parse_num(key, value)?,
                "arch.n_blocks" => cfg.n_blocks = parse_num(key, value)?,
                "arch.head_out" => cfg.head_out = Some(parse_num(key, value)?),
                "arch.gate_mlp" => cfg.gate_mlp = parse_bool(key, value)?,
                "init.mode" => {
                    cfg.init_mode = match value {
                        "random" => InitMode::Random,
                        "teacher" => InitMode::Teacher,
                        "checkpoint" => InitMode::Checkpoint,
                        _ => bail!("{key}: unknown init mode {value:?}"),
                    }
                }
                "init.seed" => cfg.init_seed = parse_num(key, value)?,
                "init.checkpoint" => cfg.init_checkpoint = Some(PathBuf::from(value)),
                "data.source" => {
                    cfg.data_source = match value {
                        "planted" => DataSource::Planted,
                        "csv" => DataSource::Csv,
                        _ => bail!("{key}: unknown data source {value:?}"),
                    }
                }
                "data.path" => cfg.data_path = Some(PathBuf::from(value)),
                "data.label_col" => cfg.label_col = value.to_string(),
                "data.tokens_col" => cfg.tokens_col = Some(value.to_string()),
                "data.task" => {
                    cfg.task = match value {
                        "classification" => TaskKind::Classification,
                        "regression" => TaskKind::Regression,
                        _ => bail!("{key}: unknown task {value:?}"),
                    }
                }
                "data.seed" => cfg.data_seed = parse_num(key, value)?,
                "data.d_in" => cfg.d_in = parse_num(key, value)?,
                "data.hidden" => cfg.hidden = parse_num(key, value)?,
                "data.keep_frac" => cfg.keep_frac = parse_num(key, value)?,
                "data.n_samples" => cfg.n_samples = parse_num(key, value)?,
                "data.noise" => cfg.noise = parse_num(key, value)?,
                "data.classes" => cfg.classes = parse_num(key, value)?,
                "train.lr_gates" => cfg.lr_gates = parse_num(key, value)?,
                "train.lr_bias_head" => cfg.lr_bias_head = parse_num(key, value)?,
                "train.lambda" => cfg.lambda = parse_num(key, value)?,
                "train.target_sparsity" => cfg.target_sparsity = parse_num(key, value)?,
                "train.target_rows" => cfg.target_rows = Some(parse_num(key, value)?),
                "train.target_cols" => cfg.target_cols = Some(parse_num(key, value)?),
                "train.kurtosis_weighting" => cfg.kurtosis_weighting = parse_bool(key, value)?,
                "train.epochs" => cfg.epochs = parse_num(key, value)?,
                "train.batch_size" => cfg.batch_size = parse_num(key, value)?,
                "train.seed" => cfg.train_seed = parse_num(key, value)?,
                "train.schedule" => {
                    schedule_kind = value.to_string();
                }
                "train.warmup_steps" => warmup_steps = parse_num(key, value)?,
                "train.schedule_floor" => schedule_floor = parse_num(key, value)?,
                "train.weight_decay" => cfg.weight_decay = parse_num(key, value)?,
                "train.train_bias" => cfg.train_bias = parse_bool(key, value)?,
                "train.lowrank_rank" => cfg.lowrank_rank = Some(parse_num(key, value)?),
                "train.snapshot_gates" => cfg.snapshot_gates = parse_bool(key, value)?,
                "gradcheck.h" => cfg.gradcheck_h = parse_num(key, value)?,
                "gradcheck.tolerance" => cfg.gradcheck_tolerance = parse_num(key, value)?,
                "gradcheck.batch" => cfg.gradcheck_batch = parse_num(key, value)?,
                "compare.lora_rank" => cfg.compare_lora_rank = parse_num(key, value)?,
                _ if key.starts_with("train.layer") => {
                    let rest = key.strip_prefix("train.").expect("prefix checked");
                    cfg.layer_overrides.push(parse_layer_override(key, rest, value)?);
                }
                _ => bail!("line {}: unknown key {key:?}", lineno + 1),
            }
        }

        cfg.schedule = match schedule_kind.as_str() {
            "constant" => Schedule::Constant,
            "warmup_cosine" => Schedule::WarmupCosine {
                warmup_steps,
                floor_frac: schedule_floor,
            },
            other => bail!("train.schedule: unknown schedule {other:?}"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        RunConfig::parse_str(&text)
    }

    fn validate(&self) -> Result<()> {
        if self.arch_kind == ArchKind::Mlp && self.widths.len() < 2 {
            bail!("arch.widths needs at least input and one hidden width");
        }
        if self.init_mode == InitMode::Checkpoint && self.init_checkpoint.is_none() {
            bail!("init.mode=checkpoint requires init.checkpoint=<path>");
        }
        if self.init_mode == InitMode::Teacher && self.data_source != DataSource::Planted {
            bail!("init.mode=teacher requires data.source=planted");
        }
        if self.data_source == DataSource::Csv && self.data_path.is_none() {
            bail!("data.source=csv requires data.path=<file>");
        }
        if !(0.0..1.0).contains(&self.target_sparsity) {
            bail!("train.target_sparsity must be in [0, 1)");
        }
        Ok(())
    }

    /// All keys with their effective values, sorted; identical configs
    /// produce identical snapshots.
    pub fn resolved_snapshot(&self) -> String {
        let mut lines: Vec<String> = Vec::new();
        let mut kv = |k: &str, v: String| lines.push(format!("{k}={v}"));
        kv("out.dir", self.out_dir.display().to_string());
        kv(
            "arch.kind",
            match self.arch_kind {
                ArchKind::Mlp => "mlp".into(),
                ArchKind::Transformer => "transformer".into(),
            },
        );
        kv(
            "arch.widths",
            self.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
        );
        kv("arch.vocab", self.vocab.to_string());
        kv("arch.seq_len", self.seq_len.to_string());
        kv("arch.d_model", self.d_model.to_string());
        kv("arch.n_heads", self.n_heads.to_string());
        kv("arch.d_ff", self.d_ff.to_string());
        kv("arch.n_blocks", self.n_blocks.to_string());
        if let Some(h) = self.head_out {
            kv("arch.head_out", h.to_string());
        }
        kv("arch.gate_mlp", self.gate_mlp.to_string());
        kv(
            "init.mode",
            match self.init_mode {
                InitMode::Random => "random".into(),
                InitMode::Teacher => "teacher".into(),
                InitMode::Checkpoint => "checkpoint".into(),
            },
        );
        kv("init.seed", self.init_seed.to_string());
        if let Some(p) = &self.init_checkpoint {
            kv("init.checkpoint", p.display().to_string());
        }
        kv(
            "data.source",
            match self.data_source {
                DataSource::Planted => "planted".into(),
                DataSource::Csv => "csv".into(),
            },
        );
        if let Some(p) = &self.data_path {
            kv("data.path", p.display().to_string());
        }
        kv("data.label_col", self.label_col.clone());
        if let Some(t) = &self.tokens_col {
            kv("data.tokens_col", t.clone());
        }
        kv("data.task", self.task.name().to_string());
        kv("data.seed", self.data_seed.to_string());
        kv("data.d_in", self.d_in.to_string());
        kv("data.hidden", self.hidden.to_string());
        kv("data.keep_frac", format!("{:?}", self.keep_frac));
        kv("data.n_samples", self.n_samples.to_string());
        kv("data.noise", format!("{:?}", self.noise));
        kv("data.classes", self.classes.to_string());
        kv("train.lr_gates", format!("{:?}", self.lr_gates));
        kv("train.lr_bias_head", format!("{:?}", self.lr_bias_head));
        kv("train.lambda", format!("{:?}", self.lambda));
        kv("train.target_sparsity", format!("{:?}", self.target_sparsity));
        if let Some(t) = self.target_rows {
            kv("train.target_rows", format!("{t:?}"));
        }
        if let Some(t) = self.target_cols {
            kv("train.target_cols", format!("{t:?}"));
        }
        for (l, axis, t) in &self.layer_overrides {
            let field = match axis {
                GateAxis::Row => "target_rows",
                GateAxis::Column => "target_cols",
            };
            kv(&format!("train.layer{l}.{field}"), format!("{t:?}"));
        }
        kv("train.kurtosis_weighting", self.kurtosis_weighting.to_string());
        kv("train.epochs", self.epochs.to_string());
        kv("train.batch_size", self.batch_size.to_string());
        kv("train.seed", self.train_seed.to_string());
        match self.schedule {
            Schedule::Constant => kv("train.schedule", "constant".into()),
            Schedule::WarmupCosine { warmup_steps, floor_frac } => {
                kv("train.schedule", "warmup_cosine".into());
                kv("train.warmup_steps", warmup_steps.to_string());
                kv("train.schedule_floor", format!("{floor_frac:?}"));
            }
        }
        kv("train.weight_decay", format!("{:?}", self.weight_decay));
        kv("train.train_bias", self.train_bias.to_string());
        if let Some(r) = self.lowrank_rank {
            kv("train.lowrank_rank", r.to_string());
        }
        kv("train.snapshot_gates", self.snapshot_gates.to_string());
        kv("gradcheck.h", format!("{:?}", self.gradcheck_h));
        kv("gradcheck.tolerance", format!("{:?}", self.gradcheck_tolerance));
        kv("gradcheck.batch", self.gradcheck_batch.to_string());
        kv("compare.lora_rank", self.compare_lora_rank.to_string());
        lines.sort();
        let mut out = String::new();
        for l in lines {
            let _ = writeln!(out, "{l}");
        }
        out
    }

    pub fn train_config(&self) -> finegates::train::TrainConfig {
        finegates::train::TrainConfig {
            lr_gates: self.lr_gates,
            lr_bias_head: self.lr_bias_head,
            lambda: self.lambda,
            target_sparsity: self.target_sparsity,
            target_rows: self.target_rows,
            target_cols: self.target_cols,
            layer_overrides: self.layer_overrides.clone(),
            kurtosis_weighting: self.kurtosis_weighting,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.train_seed,
            schedule: self.schedule,
            weight_decay: self.weight_decay,
            train_bias: self.train_bias,
            train_gates: true,
            lowrank_rank: self.lowrank_rank,
            snapshot_gates: self.snapshot_gates,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_snapshot() {
        let cfg = RunConfig::default();
        let snap = cfg.resolved_snapshot();
        assert!(snap.contains("train.lr_gates=0.001"));
        assert!(snap.contains("arch.kind=mlp"));
        // snapshot parses back without unknown-key errors
        let reparsed = RunConfig::parse_str(&snap).unwrap();
        assert_eq!(reparsed.resolved_snapshot(), snap);
    }

    #[test]
    fn unknown_key_is_hard_error() {
        let err = RunConfig::parse_str("train.lr_gaets=0.01\n").unwrap_err();
        assert!(err.to_string().contains("unknown key"));
    }

    #[test]
    fn duplicate_key_rejected() {
        let err = RunConfig::parse_str("train.epochs=1\ntrain.epochs=2\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = RunConfig::parse_str("# a comment\n\ntrain.epochs=7 # trailing\n").unwrap();
        assert_eq!(cfg.epochs, 7);
    }

    #[test]
    fn per_layer_overrides() {
        let cfg =
            RunConfig::parse_str("train.layer2.target_rows=0.25\ntrain.layer0.target_cols=0.0\n")
                .unwrap();
        assert_eq!(cfg.layer_overrides.len(), 2);
        assert_eq!(cfg.layer_overrides[0], (2, GateAxis::Row, 0.25));
        assert_eq!(cfg.layer_overrides[1], (0, GateAxis::Column, 0.0));
    }

    #[test]
    fn checkpoint_init_requires_path() {
        let err = RunConfig::parse_str("init.mode=checkpoint\n").unwrap_err();
        assert!(err.to_string().contains("init.checkpoint"));
    }

    #[test]
    fn warmup_schedule_parses() {
        let cfg = RunConfig::parse_str(
            "train.schedule=warmup_cosine\ntrain.warmup_steps=50\ntrain.schedule_floor=0.2\n",
        )
        .unwrap();
        assert_eq!(
            cfg.schedule,
            Schedule::WarmupCosine { warmup_steps: 50, floor_frac: 0.2 }
        );
    }
}
