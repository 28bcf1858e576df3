//! Single-file archives of named arrays.
//!
//! Layout: the 9-byte tag `HPDPCKPT1`, a little-endian `u64` manifest
//! length, a JSON manifest (`kind`, free-form `meta`, and one
//! `{name, offset, rows, cols}` record per array), then all arrays as one
//! little-endian `f64` blob. Offsets count values, not bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{HpdpError, Result};
use crate::model::{param_name, Architecture, ModelParams, PARAM_NAMES};
use crate::numerics::Matrix;
use crate::priors::PrototypeBank;
use crate::trainer::TrainConfig;

pub const ARCHIVE_TAG: &[u8; 9] = b"HPDPCKPT1";
const TEACHERS: &str = "teachers";
const CENTROIDS: &str = "centroids";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayRecord {
    name: String,
    offset: usize,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: String,
    kind: String,
    meta: Value,
    arrays: Vec<ArrayRecord>,
}

/// Serialize named arrays plus metadata into archive bytes.
pub fn encode_archive(kind: &str, meta: Value, arrays: &[(&str, &Matrix)]) -> Result<Vec<u8>> {
    let mut records = Vec::with_capacity(arrays.len());
    let mut offset = 0;
    for (name, m) in arrays {
        records.push(ArrayRecord {
            name: name.to_string(),
            offset,
            rows: m.rows(),
            cols: m.cols(),
        });
        offset += m.len();
    }
    let manifest = Manifest {
        version: "HPDPCKPT1".into(),
        kind: kind.into(),
        meta,
        arrays: records,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| HpdpError::Input(format!("manifest encoding: {e}")))?;
    let mut out = Vec::with_capacity(17 + json.len() + 8 * offset);
    out.extend_from_slice(ARCHIVE_TAG);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in arrays {
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Inverse of [`encode_archive`]: `(kind, meta, arrays in file order)`.
pub fn decode_archive(bytes: &[u8], path: &Path) -> Result<(String, Value, Vec<(String, Matrix)>)> {
    let fail = |d: String| HpdpError::format(path, d);
    if bytes.len() < 17 || &bytes[..9] != ARCHIVE_TAG {
        return Err(fail("missing HPDPCKPT1 tag".into()));
    }
    let len = u64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes")) as usize;
    let json_end = 17usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fail("truncated manifest".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[17..json_end]).map_err(|e| fail(format!("manifest: {e}")))?;
    let blob = &bytes[json_end..];
    if blob.len() % 8 != 0 {
        return Err(fail("array blob is not a whole number of f64 values".into()));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for r in manifest.arrays {
        let end = r.offset + r.rows * r.cols;
        if end > values.len() {
            return Err(fail(format!("array {} extends past the blob", r.name)));
        }
        arrays.push((r.name, Matrix::new(r.rows, r.cols, values[r.offset..end].to_vec())?));
    }
    Ok((manifest.kind, manifest.meta, arrays))
}

/// Write via a temporary sibling file and rename, so readers never see a
/// partial archive.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HpdpError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| HpdpError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| HpdpError::io(path, e))
}

fn read(path: &Path, kind: &str) -> Result<(Value, Vec<(String, Matrix)>)> {
    let bytes = fs::read(path).map_err(|e| HpdpError::io(path, e))?;
    let (k, meta, arrays) = decode_archive(&bytes, path)?;
    if k != kind {
        return Err(HpdpError::format(path, format!("expected a {kind} archive, found {k}")));
    }
    Ok((meta, arrays))
}

/// Trained model state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub config: TrainConfig,
    pub params: ModelParams,
    pub teachers: Option<Matrix>,
    pub epoch: usize,
    pub best_val: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    arch: Architecture,
    config: TrainConfig,
    epoch: usize,
    best_val: Option<f64>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = CheckpointMeta {
            arch: self.arch.clone(),
            config: self.config.clone(),
            epoch: self.epoch,
            best_val: self.best_val,
        };
        let meta = serde_json::to_value(&meta).map_err(|e| HpdpError::Input(e.to_string()))?;
        let mut arrays: Vec<(&str, &Matrix)> = self
            .params
            .arrays
            .iter()
            .enumerate()
            .map(|(i, m)| (param_name(i), m))
            .collect();
        if let Some(t) = &self.teachers {
            arrays.push((TEACHERS, t));
        }
        encode_archive("model", meta, &arrays)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (kind, meta, arrays) = decode_archive(bytes, path)?;
        if kind != "model" {
            return Err(HpdpError::format(
                path,
                format!("expected a model archive, found {kind}"),
            ));
        }
        Self::assemble(meta, arrays, path)
    }

    fn assemble(meta: Value, mut arrays: Vec<(String, Matrix)>, path: &Path) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(meta).map_err(|e| HpdpError::format(path, e.to_string()))?;
        let teachers = match arrays.iter().position(|(n, _)| n == TEACHERS) {
            Some(i) => Some(arrays.remove(i).1),
            None => None,
        };
        if arrays.len() != PARAM_NAMES.len() || arrays.iter().zip(PARAM_NAMES).any(|((n, _), want)| n != want) {
            return Err(HpdpError::format(path, "parameter arrays are missing or out of order"));
        }
        let params = ModelParams {
            arrays: arrays.into_iter().map(|(_, m)| m).collect(),
        };
        params
            .check_shapes(&meta.arch)
            .map_err(|e| HpdpError::format(path, e.to_string()))?;
        Ok(Self {
            arch: meta.arch,
            config: meta.config,
            params,
            teachers,
            epoch: meta.epoch,
            best_val: meta.best_val,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, arrays) = read(path, "model")?;
        Self::assemble(meta, arrays, path)
    }
}

#[derive(Serialize, Deserialize)]
struct BankMeta {
    inertia: f64,
    assignments: Vec<usize>,
}

pub fn save_prototypes(bank: &PrototypeBank, path: &Path) -> Result<()> {
    let meta = serde_json::to_value(BankMeta {
        inertia: bank.inertia,
        assignments: bank.assignments.clone(),
    })
    .map_err(|e| HpdpError::Input(e.to_string()))?;
    write_atomic(
        path,
        &encode_archive("prototypes", meta, &[(CENTROIDS, &bank.centroids)])?,
    )
}

pub fn load_prototypes(path: &Path) -> Result<PrototypeBank> {
    let (meta, mut arrays) = read(path, "prototypes")?;
    let meta: BankMeta = serde_json::from_value(meta).map_err(|e| HpdpError::format(path, e.to_string()))?;
    match arrays.pop() {
        Some((name, centroids)) if name == CENTROIDS && arrays.is_empty() => Ok(PrototypeBank {
            centroids,
            inertia: meta.inertia,
            assignments: meta.assignments,
        }),
        _ => Err(HpdpError::format(
            path,
            "prototype archive must hold exactly one centroid array",
        )),
    }
}
