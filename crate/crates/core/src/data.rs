//! Datasets: the planted-subnetwork synthetic task and CSV ingestion.
//!
//! The planted task is the desk-scale verification harness: a frozen teacher
//! MLP whose hidden layer has a known sparse row support generates the
//! labels, so support recovery can be scored exactly.

use crate::layers::{gelu_forward, Linear};
use crate::matrix::Matrix;
use crate::model::TaskKind;
use crate::precision::{re, Real};
use crate::rng::RngStream;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("row {line}: {detail}")]
    MalformedRow { line: usize, detail: String },
    #[error("missing column {0}")]
    MissingColumn(String),
    #[error("file has no data rows")]
    EmptyFile,
    #[error("bad planted spec: {0}")]
    BadSpec(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone)]
pub enum FeatureStorage<T> {
    /// `N x d` dense features.
    Dense(Matrix<T>),
    /// `N * seq_len` token ids, row-major.
    Tokens { ids: Vec<u32>, seq_len: usize },
}

#[derive(Debug, Clone)]
pub enum LabelStorage<T> {
    Classes(Vec<usize>),
    /// `N x out` regression targets.
    Targets(Matrix<T>),
}

#[derive(Debug, Clone)]
pub enum Provenance {
    Csv(String),
    Planted { seed: u64 },
}

/// Teacher network behind a planted dataset; finetuning experiments start
/// from these weights.
#[derive(Debug, Clone)]
pub struct PlantedTeacher<T> {
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub head: Linear<T>,
    /// True for hidden rows that are part of the planted subnetwork.
    pub support: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub features: FeatureStorage<T>,
    pub labels: LabelStorage<T>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub provenance: Provenance,
    pub teacher: Option<PlantedTeacher<T>>,
}

/// An owned mini-batch extracted from a dataset.
#[derive(Debug, Clone)]
pub enum BatchInput<T> {
    Dense(Matrix<T>),
    Tokens { ids: Vec<u32>, seq_len: usize },
}

impl<T: Real> BatchInput<T> {
    pub fn as_input_ref(&self) -> crate::model::InputRef<'_, T> {
        match self {
            BatchInput::Dense(m) => crate::model::InputRef::Dense(m),
            BatchInput::Tokens { ids, .. } => crate::model::InputRef::Tokens(ids),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            BatchInput::Dense(m) => m.rows(),
            BatchInput::Tokens { ids, seq_len } => ids.len() / seq_len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub enum BatchLabels<T> {
    Classes(Vec<usize>),
    Targets(Matrix<T>),
}

impl<T: Real> Dataset<T> {
    pub fn len(&self) -> usize {
        match &self.labels {
            LabelStorage::Classes(c) => c.len(),
            LabelStorage::Targets(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> TaskKind {
        match &self.labels {
            LabelStorage::Classes(_) => TaskKind::Classification,
            LabelStorage::Targets(_) => TaskKind::Regression,
        }
    }

    /// Width the model head must have for this dataset.
    pub fn head_out(&self) -> usize {
        match &self.labels {
            LabelStorage::Classes(c) => c.iter().copied().max().map_or(1, |m| m + 1),
            LabelStorage::Targets(t) => t.cols(),
        }
    }

    pub fn input_width(&self) -> Option<usize> {
        match &self.features {
            FeatureStorage::Dense(m) => Some(m.cols()),
            FeatureStorage::Tokens { .. } => None,
        }
    }

    pub fn gather_input(&self, idx: &[usize]) -> BatchInput<T> {
        match &self.features {
            FeatureStorage::Dense(m) => {
                let out = Matrix::from_fn(idx.len(), m.cols(), |i, j| m[(idx[i], j)]);
                BatchInput::Dense(out)
            }
            FeatureStorage::Tokens { ids, seq_len } => {
                let mut out = Vec::with_capacity(idx.len() * seq_len);
                for &i in idx {
                    out.extend_from_slice(&ids[i * seq_len..(i + 1) * seq_len]);
                }
                BatchInput::Tokens { ids: out, seq_len: *seq_len }
            }
        }
    }

    pub fn gather_labels(&self, idx: &[usize]) -> BatchLabels<T> {
        match &self.labels {
            LabelStorage::Classes(c) => BatchLabels::Classes(idx.iter().map(|&i| c[i]).collect()),
            LabelStorage::Targets(t) => BatchLabels::Targets(Matrix::from_fn(
                idx.len(),
                t.cols(),
                |i, j| t[(idx[i], j)],
            )),
        }
    }

    pub fn planted_support(&self) -> Option<&[bool]> {
        self.teacher.as_ref().map(|t| t.support.as_slice())
    }
}

fn split_indices(n: usize, frac_train: f64, rng: &mut RngStream) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let n_train = ((n as f64) * frac_train).round() as usize;
    let n_train = n_train.clamp(1, n.max(1));
    let val = idx.split_off(n_train.min(idx.len()));
    (idx, val)
}

#[derive(Debug, Clone)]
pub struct PlantedSpec {
    pub d_in: usize,
    pub hidden: usize,
    /// Fraction of hidden rows that are live in the teacher.
    pub keep_frac: f64,
    pub n_samples: usize,
    /// Label noise: gaussian scale added to teacher outputs before
    /// argmax (classification) or directly (regression).
    pub noise: f64,
    pub task: TaskKind,
    pub classes: usize,
    /// Give every head weight the same magnitude (random sign). Keeps the
    /// curvature of each live hidden unit commensurate, which the descent
    /// experiments rely on; accuracy experiments use the gaussian default.
    pub head_signs: bool,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        PlantedSpec {
            d_in: 32,
            hidden: 64,
            keep_frac: 0.6,
            n_samples: 512,
            noise: 0.1,
            task: TaskKind::Classification,
            classes: 3,
            head_signs: false,
        }
    }
}

/// Builds a planted-subnetwork dataset. The teacher hidden layer has exactly
/// `ceil(keep_frac * hidden)` nonzero rows (weights and bias both zeroed on
/// dead rows), the planted support is recorded, and the split is a seeded
/// 80/20 shuffle.
pub fn generate_planted<T: Real>(seed: u64, spec: &PlantedSpec) -> Result<Dataset<T>, DataError> {
    if !(spec.keep_frac > 0.0 && spec.keep_frac <= 1.0) {
        return Err(DataError::BadSpec(format!(
            "keep_frac {} outside (0, 1]",
            spec.keep_frac
        )));
    }
    if spec.d_in == 0 || spec.hidden == 0 || spec.n_samples < 4 {
        return Err(DataError::BadSpec(
            "need d_in, hidden >= 1 and n_samples >= 4".into(),
        ));
    }
    if spec.task == TaskKind::Classification && spec.classes < 2 {
        return Err(DataError::BadSpec("classification needs >= 2 classes".into()));
    }
    let n_live = (spec.keep_frac * spec.hidden as f64).ceil() as usize;
    let root = RngStream::new(seed);

    // planted support: seeded shuffle of row ids
    let mut srng = root.substream(1);
    let mut rows: Vec<usize> = (0..spec.hidden).collect();
    srng.shuffle(&mut rows);
    let mut support = vec![false; spec.hidden];
    for &r in rows.iter().take(n_live) {
        support[r] = true;
    }

    let mut wrng = root.substream(2);
    let scale = (2.0 / spec.d_in as f64).sqrt();
    let w1 = Matrix::from_fn(spec.hidden, spec.d_in, |i, _| {
        let draw = wrng.next_gauss();
        if support[i] {
            re(draw * scale)
        } else {
            T::zero()
        }
    });
    let b1: Vec<T> = (0..spec.hidden)
        .map(|i| {
            let draw = wrng.next_gauss() * 0.1;
            if support[i] {
                re(draw)
            } else {
                T::zero()
            }
        })
        .collect();
    let head_out = match spec.task {
        TaskKind::Classification => spec.classes,
        TaskKind::Regression => 1,
    };
    let mut hrng = root.substream(3);
    let head_scale = (2.0 / spec.hidden as f64).sqrt();
    let head = Linear {
        w: Matrix::from_fn(head_out, spec.hidden, |_, _| {
            let draw = hrng.next_gauss();
            if spec.head_signs {
                re(draw.signum() * head_scale)
            } else {
                re(draw * head_scale)
            }
        }),
        bias: vec![T::zero(); head_out],
    };

    let mut xrng = root.substream(4);
    let features = Matrix::from_fn(spec.n_samples, spec.d_in, |_, _| re(xrng.next_gauss()));

    // teacher forward
    let mut hidden = features.matmul_nt(&w1);
    for i in 0..hidden.rows() {
        for (j, v) in hidden.row_mut(i).iter_mut().enumerate() {
            *v += b1[j];
        }
    }
    let hidden = gelu_forward(&hidden);
    let outputs = head.forward(&hidden);

    let mut nrng = root.substream(5);
    let labels = match spec.task {
        TaskKind::Classification => {
            let mut classes = Vec::with_capacity(spec.n_samples);
            for i in 0..spec.n_samples {
                let mut best = 0usize;
                let mut best_v = f64::NEG_INFINITY;
                for c in 0..head_out {
                    let v = outputs[(i, c)].to_f64_() + nrng.next_gauss() * spec.noise;
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                classes.push(best);
            }
            LabelStorage::Classes(classes)
        }
        TaskKind::Regression => {
            let targets = Matrix::from_fn(spec.n_samples, 1, |i, _| {
                outputs[(i, 0)] + re(nrng.next_gauss() * spec.noise)
            });
            LabelStorage::Targets(targets)
        }
    };

    let mut split_rng = root.substream(6);
    let (train_idx, val_idx) = split_indices(spec.n_samples, 0.8, &mut split_rng);

    Ok(Dataset {
        features: FeatureStorage::Dense(features),
        labels,
        train_idx,
        val_idx,
        provenance: Provenance::Planted { seed },
        teacher: Some(PlantedTeacher { w1, b1, head, support }),
    })
}

#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub label_col: String,
    /// When set, that column holds whitespace-separated token ids and every
    /// other column is ignored.
    pub tokens_col: Option<String>,
    pub task: TaskKind,
    pub split_seed: u64,
    pub train_frac: f64,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            label_col: "label".into(),
            tokens_col: None,
            task: TaskKind::Classification,
            split_seed: 0,
            train_frac: 0.8,
        }
    }
}

/// Loads a CSV with a header row: numeric feature columns (or one token-id
/// list column) plus a label column. The split is a seeded shuffle.
pub fn load_csv<T: Real>(path: &Path, schema: &CsvSchema) -> Result<Dataset<T>, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_pos = headers
        .iter()
        .position(|h| h == schema.label_col)
        .ok_or_else(|| DataError::MissingColumn(schema.label_col.clone()))?;
    let tokens_pos = match &schema.tokens_col {
        Some(name) => Some(
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| DataError::MissingColumn(name.clone()))?,
        ),
        None => None,
    };
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&i| i != label_pos && Some(i) != tokens_pos)
        .collect();

    let mut dense_rows: Vec<Vec<T>> = Vec::new();
    let mut token_rows: Vec<Vec<u32>> = Vec::new();
    let mut class_labels: Vec<usize> = Vec::new();
    let mut value_labels: Vec<T> = Vec::new();

    for (row_i, record) in reader.records().enumerate() {
        let line = row_i + 2; // 1-based, after the header
        let record = record?;
        let label_raw = record
            .get(label_pos)
            .ok_or(DataError::MalformedRow { line, detail: "missing label cell".into() })?;
        match schema.task {
            TaskKind::Classification => {
                let v: i64 = label_raw.parse().map_err(|_| DataError::MalformedRow {
                    line,
                    detail: format!("label {label_raw:?} is not an integer class"),
                })?;
                if v < 0 {
                    return Err(DataError::MalformedRow {
                        line,
                        detail: format!("negative class label {v}"),
                    });
                }
                class_labels.push(v as usize);
            }
            TaskKind::Regression => {
                let v: f64 = label_raw.parse().map_err(|_| DataError::MalformedRow {
                    line,
                    detail: format!("label {label_raw:?} is not numeric"),
                })?;
                value_labels.push(re(v));
            }
        }
        if let Some(tp) = tokens_pos {
            let cell = record
                .get(tp)
                .ok_or(DataError::MalformedRow { line, detail: "missing tokens cell".into() })?;
            let ids: Result<Vec<u32>, _> =
                cell.split_whitespace().map(|t| t.parse::<u32>()).collect();
            let ids = ids.map_err(|_| DataError::MalformedRow {
                line,
                detail: format!("token list {cell:?} is not whitespace-separated ids"),
            })?;
            if ids.is_empty() {
                return Err(DataError::MalformedRow { line, detail: "empty token list".into() });
            }
            if let Some(first) = token_rows.first() {
                if ids.len() != first.len() {
                    return Err(DataError::MalformedRow {
                        line,
                        detail: format!(
                            "token list length {} differs from first row's {}",
                            ids.len(),
                            first.len()
                        ),
                    });
                }
            }
            token_rows.push(ids);
        } else {
            let mut row = Vec::with_capacity(feature_cols.len());
            for &ci in &feature_cols {
                let cell = record.get(ci).ok_or(DataError::MalformedRow {
                    line,
                    detail: "short row".into(),
                })?;
                let v: f64 = cell.parse().map_err(|_| DataError::MalformedRow {
                    line,
                    detail: format!(
                        "column {:?} value {cell:?} is not numeric",
                        headers.get(ci).unwrap_or("")
                    ),
                })?;
                row.push(re(v));
            }
            dense_rows.push(row);
        }
    }

    let n = class_labels.len().max(value_labels.len());
    if n == 0 {
        return Err(DataError::EmptyFile);
    }

    let features = if tokens_pos.is_some() {
        let seq_len = token_rows[0].len();
        let ids = token_rows.concat();
        FeatureStorage::Tokens { ids, seq_len }
    } else {
        let d = feature_cols.len();
        let flat: Vec<T> = dense_rows.concat();
        FeatureStorage::Dense(Matrix::from_vec(n, d, flat))
    };
    let labels = match schema.task {
        TaskKind::Classification => LabelStorage::Classes(class_labels),
        TaskKind::Regression => LabelStorage::Targets(Matrix::from_vec(n, 1, value_labels)),
    };
    let mut rng = RngStream::new(schema.split_seed).substream(0xc5);
    let (train_idx, val_idx) = split_indices(n, schema.train_frac, &mut rng);
    Ok(Dataset {
        features,
        labels,
        train_idx,
        val_idx,
        provenance: Provenance::Csv(path.display().to_string()),
        teacher: None,
    })
}
