//! Checkpoint files: a magic line, one JSON header line, then the raw
//! parameters as little-endian `f64`. The header carries a SHA-256 over
//! itself (with an empty checksum field) followed by the payload.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::{BaseModel, Fingerprint, NetworkSpec};
use crate::param::ParamVector;
use crate::tangent::{ComponentRecord, TangentModel};

pub const MAGIC: &str = "TMCCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Base,
    Tangent,
}

impl CheckpointKind {
    fn name(self) -> &'static str {
        match self {
            CheckpointKind::Base => "base",
            CheckpointKind::Tangent => "tangent",
        }
    }
}

/// Free-form provenance stored alongside the parameters.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Hex SHA-256 of the training configuration that produced the model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub task_id: u32,
    pub coefficient: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub kind: CheckpointKind,
    pub spec: NetworkSpec,
    /// Fingerprint of the stored weights (base) or of the anchor (tangent).
    pub fingerprint: String,
    pub task_count: u32,
    #[serde(flatten)]
    pub meta: CheckpointMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component_log: Option<Vec<LogEntry>>,
    pub param_count: usize,
    /// Number of `f64` values in the payload.
    pub value_count: usize,
    pub checksum: String,
}

/// Hex SHA-256 of any serializable configuration, over its JSON encoding.
pub fn config_digest<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_vec(config).expect("configs serialize");
    hex::encode(Sha256::digest(json))
}

fn checksum(header: &CheckpointHeader, payload: &[u8]) -> String {
    let mut unsigned = header.clone();
    unsigned.checksum.clear();
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&unsigned).expect("header serializes"));
    h.update(payload);
    hex::encode(h.finalize())
}

fn encode(mut header: CheckpointHeader, values: &[&[f64]]) -> Vec<u8> {
    let mut payload = Vec::with_capacity(8 * header.value_count);
    for v in values.iter().flat_map(|s| s.iter()) {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    header.checksum = checksum(&header, &payload);
    let mut out = format!("{MAGIC}/{}\n", header.version).into_bytes();
    out.extend(serde_json::to_vec(&header).expect("header serializes"));
    out.push(b'\n');
    out.extend(payload);
    out
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Splits and verifies a checkpoint without interpreting its parameters.
pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<f64>)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt("missing magic line"))?;
    let magic = std::str::from_utf8(&bytes[..nl]).map_err(|_| corrupt("magic line is not text"))?;
    let version = magic
        .strip_prefix(MAGIC)
        .and_then(|v| v.strip_prefix('/'))
        .ok_or_else(|| corrupt("not a checkpoint file"))?;
    let version: u32 = version
        .parse()
        .map_err(|_| corrupt("unreadable format version"))?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let rest = &bytes[nl + 1..];
    let hl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt("missing header line"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&rest[..hl]).map_err(|e| corrupt(format!("bad header: {e}")))?;
    if header.version != version {
        return Err(corrupt("header version disagrees with magic line"));
    }
    let payload = &rest[hl + 1..];
    if payload.len() != 8 * header.value_count {
        return Err(corrupt(format!(
            "payload holds {} bytes, header promises {} values",
            payload.len(),
            header.value_count
        )));
    }
    if checksum(&header, payload) != header.checksum {
        return Err(Error::ChecksumMismatch);
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((header, values))
}

pub fn encode_base(model: &BaseModel, meta: &CheckpointMeta) -> Vec<u8> {
    let n = model.spec().param_count();
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        kind: CheckpointKind::Base,
        spec: model.spec().clone(),
        fingerprint: model.fingerprint().to_hex(),
        task_count: 0,
        meta: meta.clone(),
        component_log: None,
        param_count: n,
        value_count: n,
        checksum: String::new(),
    };
    encode(header, &[model.weights().as_slice()])
}

/// Layout: the composed delta, then each logged component delta in log order.
pub fn encode_tangent(model: &TangentModel, meta: &CheckpointMeta) -> Vec<u8> {
    let n = model.base().spec().param_count();
    let log = model.component_log();
    let mut values: Vec<&[f64]> = vec![model.delta().as_slice()];
    if let Some(log) = log {
        values.extend(log.iter().map(|r| r.delta.as_slice()));
    }
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        kind: CheckpointKind::Tangent,
        spec: model.base().spec().clone(),
        fingerprint: model.base().fingerprint().to_hex(),
        task_count: model.task_count(),
        meta: meta.clone(),
        component_log: log.map(|l| {
            l.iter()
                .map(|r| LogEntry {
                    task_id: r.task_id,
                    coefficient: r.coefficient,
                })
                .collect()
        }),
        param_count: n,
        value_count: n * values.len(),
        checksum: String::new(),
    };
    encode(header, &values)
}

fn expect_kind(header: &CheckpointHeader, kind: CheckpointKind) -> Result<()> {
    if header.kind != kind {
        return Err(Error::KindMismatch {
            expected: kind.name(),
            found: header.kind.name().to_string(),
        });
    }
    if header.param_count != header.spec.param_count() {
        return Err(corrupt("parameter count disagrees with the network spec"));
    }
    Ok(())
}

pub fn decode_base(bytes: &[u8]) -> Result<(BaseModel, CheckpointMeta)> {
    let (header, values) = decode(bytes)?;
    expect_kind(&header, CheckpointKind::Base)?;
    if values.len() != header.param_count {
        return Err(corrupt("base payload length"));
    }
    let model = BaseModel::new(header.spec, ParamVector::from_vec(values))?;
    let stored = Fingerprint::from_hex(&header.fingerprint)?;
    if stored != model.fingerprint() {
        return Err(Error::AnchorMismatch {
            left: stored.to_hex(),
            right: model.fingerprint().to_hex(),
        });
    }
    Ok((model, header.meta))
}

/// Decodes a tangent checkpoint onto `base`, refusing it unless the stored
/// anchor fingerprint matches.
pub fn decode_tangent(
    bytes: &[u8],
    base: &Arc<BaseModel>,
) -> Result<(TangentModel, CheckpointMeta)> {
    let (header, values) = decode(bytes)?;
    expect_kind(&header, CheckpointKind::Tangent)?;
    let stored = Fingerprint::from_hex(&header.fingerprint)?;
    if stored != base.fingerprint() {
        return Err(Error::AnchorMismatch {
            left: stored.to_hex(),
            right: base.fingerprint().to_hex(),
        });
    }
    let n = header.param_count;
    let blocks = 1 + header.component_log.as_ref().map_or(0, Vec::len);
    if values.len() != n * blocks {
        return Err(corrupt("tangent payload length"));
    }
    let mut chunks = values
        .chunks_exact(n.max(1))
        .map(|c| ParamVector::from_vec(c.to_vec()));
    let delta = chunks.next().unwrap_or_else(|| ParamVector::zeros(0));
    let log = header.component_log.map(|entries| {
        entries
            .into_iter()
            .zip(chunks)
            .map(|(e, d)| ComponentRecord {
                task_id: e.task_id,
                coefficient: e.coefficient,
                delta: Arc::new(d),
            })
            .collect()
    });
    let model = TangentModel::from_parts(Arc::clone(base), delta, header.task_count, log)?;
    Ok((model, header.meta))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_base(path: impl AsRef<Path>, model: &BaseModel, meta: &CheckpointMeta) -> Result<()> {
    write(path.as_ref(), &encode_base(model, meta))
}

pub fn save_tangent(
    path: impl AsRef<Path>,
    model: &TangentModel,
    meta: &CheckpointMeta,
) -> Result<()> {
    write(path.as_ref(), &encode_tangent(model, meta))
}

pub fn load_base(path: impl AsRef<Path>) -> Result<(BaseModel, CheckpointMeta)> {
    decode_base(&read(path.as_ref())?)
}

pub fn load_tangent(
    path: impl AsRef<Path>,
    base: &Arc<BaseModel>,
) -> Result<(TangentModel, CheckpointMeta)> {
    decode_tangent(&read(path.as_ref())?, base)
}

/// Verified header of any checkpoint file.
pub fn read_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    decode(&read(path.as_ref())?).map(|(h, _)| h)
}
