//! Checkpoint container: magic `FGCK`, a little-endian `u32` version, a
//! `u64` manifest length, a line-oriented text manifest, then the raw tensor
//! blob. Every tensor carries a CRC-32 that is verified on load, and
//! save → load → save reproduces files byte for byte.

use crate::gates::{GateAxis, SparsityObjective, StochasticGateVector};
use crate::layers::{GatedLinear, Linear, LowRank};
use crate::matrix::Matrix;
use crate::model::{Arch, GatedModel, LayerNorm, TaskKind};
use crate::precision::{Dtype, Real};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"FGCK";

#[derive(Debug, Error)]
pub enum ModelCheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("tensor {name}: stored crc32 {stored:08x} != computed {computed:08x}")]
    ChecksumMismatch { name: String, stored: u32, computed: u32 },
    #[error("malformed manifest: {0}")]
    Malformed(String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint file not found: {0}")]
    CheckpointMissing(String),
}

// CRC-32 (IEEE, reflected). Table built at compile time; the standard check
// value crc32(b"123456789") == 0xcbf43926 is asserted in tests.
const CRC_TABLE: [u32; 256] = {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 { 0xedb8_8320 ^ (c >> 1) } else { c >> 1 };
            k += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
};

pub fn crc32(bytes: &[u8]) -> u32 {
    let mut c = 0xffff_ffffu32;
    for &b in bytes {
        c = CRC_TABLE[((c ^ b as u32) & 0xff) as usize] ^ (c >> 8);
    }
    c ^ 0xffff_ffff
}

#[derive(Debug, Clone)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl NamedTensor {
    pub fn from_scalars<T: Real>(name: &str, shape: Vec<usize>, data: &[T]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut bytes = Vec::with_capacity(data.len() * T::DTYPE.size_bytes());
        for &v in data {
            v.write_le(&mut bytes);
        }
        NamedTensor { name: name.into(), dtype: T::DTYPE, shape, bytes }
    }

    pub fn from_indices(name: &str, data: &[u32]) -> Self {
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for &v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        NamedTensor { name: name.into(), dtype: Dtype::U32, shape: vec![data.len()], bytes }
    }

    /// Decodes into the requested precision; f32 widens exactly, f64 narrows
    /// with rounding.
    pub fn to_scalars<T: Real>(&self) -> Result<Vec<T>, ModelCheckpointError> {
        let n = self.shape.iter().product::<usize>();
        let width = self.dtype.size_bytes();
        if self.bytes.len() != n * width {
            return Err(ModelCheckpointError::Malformed(format!(
                "tensor {}: {} bytes for {} elements",
                self.name,
                self.bytes.len(),
                n
            )));
        }
        let mut out = Vec::with_capacity(n);
        for chunk in self.bytes.chunks_exact(width) {
            let v = match self.dtype {
                Dtype::F32 => f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64,
                Dtype::F64 => f64::from_le_bytes(chunk.try_into().expect("8 bytes")),
                Dtype::U32 => {
                    return Err(ModelCheckpointError::Malformed(format!(
                        "tensor {} holds indices, not scalars",
                        self.name
                    )))
                }
            };
            out.push(T::from_f64(v));
        }
        Ok(out)
    }

    pub fn to_indices(&self) -> Result<Vec<u32>, ModelCheckpointError> {
        if self.dtype != Dtype::U32 {
            return Err(ModelCheckpointError::Malformed(format!(
                "tensor {} is not an index tensor",
                self.name
            )));
        }
        Ok(self
            .bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn to_matrix<T: Real>(&self) -> Result<Matrix<T>, ModelCheckpointError> {
        if self.shape.len() != 2 {
            return Err(ModelCheckpointError::Malformed(format!(
                "tensor {} is not a matrix",
                self.name
            )));
        }
        Ok(Matrix::from_vec(self.shape[0], self.shape[1], self.to_scalars()?))
    }
}

/// Ordered metadata plus named tensors; the on-disk representation is fully
/// determined by the field order, so identical containers serialize to
/// identical bytes.
#[derive(Debug, Clone, Default)]
pub struct Container {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<NamedTensor>,
}

impl Container {
    pub fn push_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.into(), value.to_string()));
    }

    pub fn meta_get(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str, ModelCheckpointError> {
        self.meta_get(key)
            .ok_or_else(|| ModelCheckpointError::Malformed(format!("missing meta key {key}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&NamedTensor, ModelCheckpointError> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| ModelCheckpointError::MissingTensor(name.into()))
    }

    pub fn has_tensor(&self, name: &str) -> bool {
        self.tensors.iter().any(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = String::new();
        manifest.push_str(&format!("format_version={CHECKPOINT_VERSION}\n"));
        for (k, v) in &self.meta {
            manifest.push_str(&format!("{k}={v}\n"));
        }
        let mut blob = Vec::new();
        for t in &self.tensors {
            let shape = t
                .shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            manifest.push_str(&format!(
                "tensor name={} dtype={} shape={} offset={} len={} crc32={:08x}\n",
                t.name,
                t.dtype.name(),
                shape,
                blob.len(),
                t.bytes.len(),
                crc32(&t.bytes)
            ));
            blob.extend_from_slice(&t.bytes);
        }
        let mut out = Vec::with_capacity(16 + manifest.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Container, ModelCheckpointError> {
        if bytes.len() < 16 || &bytes[0..4] != MAGIC {
            return Err(ModelCheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(ModelCheckpointError::VersionMismatch { found: version });
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        if bytes.len() < 16 + mlen {
            return Err(ModelCheckpointError::Malformed("truncated manifest".into()));
        }
        let manifest = std::str::from_utf8(&bytes[16..16 + mlen])
            .map_err(|_| ModelCheckpointError::Malformed("manifest is not utf-8".into()))?;
        let blob = &bytes[16 + mlen..];

        let mut meta = Vec::new();
        let mut tensors = Vec::new();
        for (lineno, line) in manifest.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("tensor ") {
                let mut name = None;
                let mut dtype = None;
                let mut shape = None;
                let mut offset = None;
                let mut len = None;
                let mut crc = None;
                for field in rest.split(' ') {
                    let (k, v) = field.split_once('=').ok_or_else(|| {
                        ModelCheckpointError::Malformed(format!("line {}: {field}", lineno + 1))
                    })?;
                    match k {
                        "name" => name = Some(v.to_string()),
                        "dtype" => dtype = Dtype::parse(v),
                        "shape" => {
                            let dims: Result<Vec<usize>, _> =
                                v.split('x').map(|d| d.parse::<usize>()).collect();
                            shape = dims.ok();
                        }
                        "offset" => offset = v.parse::<usize>().ok(),
                        "len" => len = v.parse::<usize>().ok(),
                        "crc32" => crc = u32::from_str_radix(v, 16).ok(),
                        other => {
                            return Err(ModelCheckpointError::Malformed(format!(
                                "unknown tensor field {other}"
                            )))
                        }
                    }
                }
                let (name, dtype, shape, offset, len, crc) = match
                    (name, dtype, shape, offset, len, crc)
                {
                    (Some(a), Some(b), Some(c), Some(d), Some(e), Some(f)) => (a, b, c, d, e, f),
                    _ => {
                        return Err(ModelCheckpointError::Malformed(format!(
                            "incomplete tensor line {}",
                            lineno + 1
                        )))
                    }
                };
                if offset + len > blob.len() {
                    return Err(ModelCheckpointError::Malformed(format!(
                        "tensor {name} extends past blob"
                    )));
                }
                let data = blob[offset..offset + len].to_vec();
                let computed = crc32(&data);
                if computed != crc {
                    return Err(ModelCheckpointError::ChecksumMismatch {
                        name,
                        stored: crc,
                        computed,
                    });
                }
                tensors.push(NamedTensor { name, dtype, shape, bytes: data });
            } else if let Some((k, v)) = line.split_once('=') {
                if k != "format_version" {
                    meta.push((k.to_string(), v.to_string()));
                }
            } else {
                return Err(ModelCheckpointError::Malformed(format!(
                    "line {}: {line}",
                    lineno + 1
                )));
            }
        }
        Ok(Container { meta, tensors })
    }

    pub fn write_to(&self, path: &Path) -> Result<(), ModelCheckpointError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Container, ModelCheckpointError> {
        if !path.exists() {
            return Err(ModelCheckpointError::CheckpointMissing(
                path.display().to_string(),
            ));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Container::from_bytes(&bytes)
    }
}

// ---------------------------------------------------------------------------
// model <-> container
// ---------------------------------------------------------------------------

fn fmt_f64(v: f64) -> String {
    // shortest representation that parses back to the same bits
    format!("{v:?}")
}

fn parse_f64(s: &str) -> Result<f64, ModelCheckpointError> {
    s.parse::<f64>()
        .map_err(|_| ModelCheckpointError::Malformed(format!("bad float {s}")))
}

fn parse_usize(s: &str) -> Result<usize, ModelCheckpointError> {
    s.parse::<usize>()
        .map_err(|_| ModelCheckpointError::Malformed(format!("bad integer {s}")))
}

impl<T: Real> GatedModel<T> {
    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.push_meta("kind", "gated");
        c.push_meta("dtype", T::DTYPE.name());
        c.push_meta("task", self.task.name());
        c.push_meta("sigma", fmt_f64(self.sigma));
        c.push_meta("lambda", fmt_f64(self.objective.lambda.to_f64_()));
        c.push_meta("target_sparsity", fmt_f64(self.objective.target_sparsity));
        if let Some(t) = self.objective.target_rows {
            c.push_meta("target_rows", fmt_f64(t));
        }
        if let Some(t) = self.objective.target_cols {
            c.push_meta("target_cols", fmt_f64(t));
        }
        c.push_meta("kurtosis_weighting", u8::from(self.objective.kurtosis_weighting));
        if !self.objective.layer_overrides.is_empty() {
            let enc = self
                .objective
                .layer_overrides
                .iter()
                .map(|(l, a, t)| {
                    let axis = match a {
                        GateAxis::Row => "r",
                        GateAxis::Column => "c",
                    };
                    format!("{l}:{axis}:{}", fmt_f64(*t))
                })
                .collect::<Vec<_>>()
                .join(",");
            c.push_meta("layer_overrides", enc);
        }
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
                vocab,
                seq_len,
                d_model,
                n_heads,
                d_ff,
                n_blocks,
                head_out,
                gate_mlp,
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
        c.push_meta(
            "adapted",
            self.layers
                .iter()
                .map(|l| if l.adapted { "1" } else { "0" })
                .collect::<Vec<_>>()
                .join(","),
        );

        if let Some(e) = &self.embed {
            c.tensors.push(NamedTensor::from_scalars(
                "embed",
                vec![e.rows(), e.cols()],
                e.data(),
            ));
        }
        for (i, ln) in self.lns.iter().enumerate() {
            c.tensors.push(NamedTensor::from_scalars(
                &format!("ln{i}.gain"),
                vec![ln.gain.len()],
                &ln.gain,
            ));
            c.tensors.push(NamedTensor::from_scalars(
                &format!("ln{i}.bias"),
                vec![ln.bias.len()],
                &ln.bias,
            ));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layer{i}");
            c.tensors.push(NamedTensor::from_scalars(
                &format!("{p}.w0"),
                vec![l.w0.rows(), l.w0.cols()],
                l.w0.data(),
            ));
            c.tensors.push(NamedTensor::from_scalars(
                &format!("{p}.bias"),
                vec![l.bias.len()],
                &l.bias,
            ));
            c.tensors.push(NamedTensor::from_scalars(
                &format!("{p}.mu_r"),
                vec![l.gate_r.len()],
                &l.gate_r.mu,
            ));
            c.tensors.push(NamedTensor::from_scalars(
                &format!("{p}.mu_c"),
                vec![l.gate_c.len()],
                &l.gate_c.mu,
            ));
            if let Some(lr) = &l.lowrank {
                c.tensors.push(NamedTensor::from_scalars(
                    &format!("{p}.lora_a"),
                    vec![lr.a.rows(), lr.a.cols()],
                    lr.a.data(),
                ));
                c.tensors.push(NamedTensor::from_scalars(
                    &format!("{p}.lora_b"),
                    vec![lr.b.rows(), lr.b.cols()],
                    lr.b.data(),
                ));
            }
        }
        c.tensors.push(NamedTensor::from_scalars(
            "head.w",
            vec![self.head.w.rows(), self.head.w.cols()],
            self.head.w.data(),
        ));
        c.tensors.push(NamedTensor::from_scalars(
            "head.bias",
            vec![self.head.bias.len()],
            &self.head.bias,
        ));
        c
    }

    pub fn from_container(c: &Container) -> Result<GatedModel<T>, ModelCheckpointError> {
        if c.require_meta("kind")? != "gated" {
            return Err(ModelCheckpointError::Malformed(
                "not a gated-model checkpoint".into(),
            ));
        }
        let task = match c.require_meta("task")? {
            "classification" => TaskKind::Classification,
            "regression" => TaskKind::Regression,
            other => {
                return Err(ModelCheckpointError::Malformed(format!("unknown task {other}")))
            }
        };
        let sigma = parse_f64(c.require_meta("sigma")?)?;
        let mut objective =
            SparsityObjective::<T>::new(T::zero(), parse_f64(c.require_meta("target_sparsity")?)?);
        objective.lambda = T::from_f64(parse_f64(c.require_meta("lambda")?)?);
        objective.target_rows = c.meta_get("target_rows").map(parse_f64).transpose()?;
        objective.target_cols = c.meta_get("target_cols").map(parse_f64).transpose()?;
        objective.kurtosis_weighting = c.require_meta("kurtosis_weighting")? == "1";
        if let Some(enc) = c.meta_get("layer_overrides") {
            for item in enc.split(',') {
                let parts: Vec<&str> = item.split(':').collect();
                if parts.len() != 3 {
                    return Err(ModelCheckpointError::Malformed(format!(
                        "bad override {item}"
                    )));
                }
                let axis = match parts[1] {
                    "r" => GateAxis::Row,
                    "c" => GateAxis::Column,
                    other => {
                        return Err(ModelCheckpointError::Malformed(format!(
                            "bad override axis {other}"
                        )))
                    }
                };
                objective
                    .layer_overrides
                    .push((parse_usize(parts[0])?, axis, parse_f64(parts[2])?));
            }
        }

        let arch = match c.require_meta("arch")? {
            "mlp" => Arch::Mlp {
                widths: c
                    .require_meta("widths")?
                    .split(',')
                    .map(parse_usize)
                    .collect::<Result<Vec<_>, _>>()?,
                head_out: parse_usize(c.require_meta("head_out")?)?,
            },
            "transformer" => Arch::Transformer {
                vocab: parse_usize(c.require_meta("vocab")?)?,
                seq_len: parse_usize(c.require_meta("seq_len")?)?,
                d_model: parse_usize(c.require_meta("d_model")?)?,
                n_heads: parse_usize(c.require_meta("n_heads")?)?,
                d_ff: parse_usize(c.require_meta("d_ff")?)?,
                n_blocks: parse_usize(c.require_meta("n_blocks")?)?,
                head_out: parse_usize(c.require_meta("head_out")?)?,
                gate_mlp: c.require_meta("gate_mlp")? == "1",
            },
            other => {
                return Err(ModelCheckpointError::Malformed(format!("unknown arch {other}")))
            }
        };

        let adapted: Vec<bool> = c
            .require_meta("adapted")?
            .split(',')
            .map(|s| s == "1")
            .collect();

        let embed = if c.has_tensor("embed") {
            Some(c.tensor("embed")?.to_matrix()?)
        } else {
            None
        };
        let mut lns = Vec::new();
        for i in 0.. {
            if !c.has_tensor(&format!("ln{i}.gain")) {
                break;
            }
            lns.push(LayerNorm {
                gain: c.tensor(&format!("ln{i}.gain"))?.to_scalars()?,
                bias: c.tensor(&format!("ln{i}.bias"))?.to_scalars()?,
            });
        }
        let mut layers = Vec::new();
        for i in 0..adapted.len() {
            let p = format!("layer{i}");
            let w0: Matrix<T> = c.tensor(&format!("{p}.w0"))?.to_matrix()?;
            let bias: Vec<T> = c.tensor(&format!("{p}.bias"))?.to_scalars()?;
            let mu_r: Vec<T> = c.tensor(&format!("{p}.mu_r"))?.to_scalars()?;
            let mu_c: Vec<T> = c.tensor(&format!("{p}.mu_c"))?.to_scalars()?;
            if mu_r.len() != w0.rows() || mu_c.len() != w0.cols() || bias.len() != w0.rows() {
                return Err(ModelCheckpointError::Malformed(format!(
                    "inconsistent shapes for {p}"
                )));
            }
            let lowrank = if c.has_tensor(&format!("{p}.lora_a")) {
                Some(LowRank {
                    a: c.tensor(&format!("{p}.lora_a"))?.to_matrix()?,
                    b: c.tensor(&format!("{p}.lora_b"))?.to_matrix()?,
                })
            } else {
                None
            };
            layers.push(GatedLinear {
                gate_r: StochasticGateVector::from_mu(mu_r, sigma, GateAxis::Row),
                gate_c: StochasticGateVector::from_mu(mu_c, sigma, GateAxis::Column),
                w0,
                bias,
                lowrank,
                adapted: adapted[i],
            });
        }
        let head = Linear {
            w: c.tensor("head.w")?.to_matrix()?,
            bias: c.tensor("head.bias")?.to_scalars()?,
        };
        Ok(GatedModel {
            arch,
            task,
            layers,
            head,
            embed,
            lns,
            objective,
            sigma,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), ModelCheckpointError> {
        self.to_container().write_to(path)
    }

    pub fn load_checkpoint(path: &Path) -> Result<GatedModel<T>, ModelCheckpointError> {
        GatedModel::from_container(&Container::read_from(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_transformer;

    #[test]
    fn crc_check_value() {
        assert_eq!(crc32(b"123456789"), 0xcbf4_3926);
    }

    fn sample_model() -> GatedModel<f64> {
        let mut m = build_transformer::<f64>(
            40,
            4,
            16,
            2,
            24,
            1,
            3,
            true,
            SparsityObjective::new(2.0, 0.4),
            TaskKind::Classification,
            0.5,
            17,
        )
        .unwrap();
        // perturb mu so gates are nontrivial
        let mut rng = crate::rng::RngStream::new(3);
        for l in m.layers.iter_mut() {
            for v in l.gate_r.mu.iter_mut() {
                *v = rng.next_gauss() * 0.3;
            }
        }
        m.objective.target_cols = Some(0.1);
        m.objective
            .layer_overrides
            .push((2, GateAxis::Row, 0.25));
        m
    }

    #[test]
    fn round_trip_is_bit_exact_and_idempotent() {
        let dir = std::env::temp_dir().join(format!("fgck_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a.fgck");
        let p2 = dir.join("b.fgck");
        let m = sample_model();
        m.save_checkpoint(&p1).unwrap();
        let loaded = GatedModel::<f64>::load_checkpoint(&p1).unwrap();
        assert_eq!(m.frozen_hash(), loaded.frozen_hash());
        assert_eq!(m.layers[0].gate_r.mu, loaded.layers[0].gate_r.mu);
        assert_eq!(m.objective, loaded.objective);
        assert_eq!(m.arch, loaded.arch);
        loaded.save_checkpoint(&p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2, "save -> load -> save must be byte-identical");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupted_blob_detected() {
        let m = sample_model();
        let mut bytes = m.to_container().to_bytes();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40; // flip a bit inside the last tensor
        match Container::from_bytes(&bytes) {
            Err(ModelCheckpointError::ChecksumMismatch { .. }) => {}
            other => panic!("expected checksum mismatch, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let m = sample_model();
        let mut bytes = m.to_container().to_bytes();
        bytes[4] = 99;
        match Container::from_bytes(&bytes) {
            Err(ModelCheckpointError::VersionMismatch { found: 99 }) => {}
            other => panic!("expected version mismatch, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(matches!(
            Container::from_bytes(b"NOPExxxxxxxxxxxxxxxx"),
            Err(ModelCheckpointError::BadMagic)
        ));
    }

    #[test]
    fn manifest_tensor_count_matches_arch() {
        let m = sample_model();
        let c = m.to_container();
        // embed + 2 LN pairs + 6 layers x 4 tensors + head w/bias
        assert_eq!(c.tensors.len(), 1 + 4 + 6 * 4 + 2);
    }

    #[test]
    fn missing_file_reports_checkpoint_missing() {
        let p = std::path::Path::new("/nonexistent/dir/model.fgck");
        match Container::read_from(p) {
            Err(ModelCheckpointError::CheckpointMissing(_)) => {}
            other => panic!("expected missing checkpoint, got {other:?}"),
        }
    }
}
