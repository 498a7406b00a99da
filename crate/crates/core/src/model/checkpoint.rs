//! Checkpoint container: a length-prefixed JSON header describing the
//! tensor manifest, followed by a raw little-endian `f64` payload.
//!
//! ```text
//! [u64 LE header length][header JSON][f64 LE payload ...]
//! ```
//!
//! Round trips are bit-exact because values travel as raw IEEE-754 bytes.
//! The same container carries dense Fisher-matrix dumps under a different
//! format tag.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{LayerParams, ModelConfig, ModelParams};

pub const CHECKPOINT_FORMAT: &str = "suslab-checkpoint";
pub const MATRIX_FORMAT: &str = "suslab-matrix";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("file too short for header: {0}")]
    TruncatedHeader(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("tensor {tensor}: expected shape {expected_rows}x{expected_cols}, manifest has {got_rows}x{got_cols}")]
    DimensionMismatch {
        tensor: String,
        expected_rows: usize,
        expected_cols: usize,
        got_rows: usize,
        got_cols: usize,
    },
    #[error("payload truncated: expected {expected} bytes, found {got}")]
    TruncatedPayload { expected: usize, got: usize },
    #[error("tensor {0} contains non-finite values")]
    NonFinite(String),
    #[error("checkpoint {field} is {got}, expected {expected}")]
    ConfigMismatch {
        field: &'static str,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// byte offset into the payload
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<ModelConfig>,
    tensors: Vec<TensorEntry>,
}

fn write_container(path: &Path, header: &Header, tensors: &[&Array2<f64>]) -> Result<(), CheckpointError> {
    let header_bytes = serde_json::to_vec(header)
        .map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;
    let mut file = fs::File::create(path)?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    let mut buf = Vec::new();
    for t in tensors {
        for &v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    file.write_all(&buf)?;
    Ok(())
}

fn read_container(path: &Path) -> Result<(Header, Vec<u8>), CheckpointError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return Err(CheckpointError::TruncatedHeader(format!(
            "{} bytes, need at least 8",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + header_len {
        return Err(CheckpointError::TruncatedHeader(format!(
            "header claims {header_len} bytes, file has {}",
            bytes.len() - 8
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;
    if header.version != FORMAT_VERSION {
        return Err(CheckpointError::MalformedHeader(format!(
            "unsupported version {}",
            header.version
        )));
    }
    Ok((header, bytes[8 + header_len..].to_vec()))
}

fn extract_tensor(entry: &TensorEntry, payload: &[u8]) -> Result<Array2<f64>, CheckpointError> {
    let n_bytes = entry.rows * entry.cols * 8;
    let end = entry.offset + n_bytes;
    if payload.len() < end {
        return Err(CheckpointError::TruncatedPayload {
            expected: end,
            got: payload.len(),
        });
    }
    let mut values = Vec::with_capacity(entry.rows * entry.cols);
    for chunk in payload[entry.offset..end].chunks_exact(8) {
        values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    let t = Array2::from_shape_vec((entry.rows, entry.cols), values)
        .map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;
    if t.iter().any(|v| !v.is_finite()) {
        return Err(CheckpointError::NonFinite(entry.name.clone()));
    }
    Ok(t)
}

/// Expected tensor shapes for a config, in the canonical order.
fn expected_shapes(config: &ModelConfig) -> Vec<(String, usize, usize)> {
    let d = config.embed_dim;
    let m = config.mlp_dim();
    let mut out = vec![
        ("token_embed".to_string(), config.vocab_size, d),
        ("pos_embed".to_string(), config.max_seq_len, d),
    ];
    for i in 0..config.n_layers {
        let per_layer = [
            ("ln1_gamma", 1, d),
            ("ln1_beta", 1, d),
            ("wq", d, d),
            ("bq", 1, d),
            ("wk", d, d),
            ("bk", 1, d),
            ("wv", d, d),
            ("bv", 1, d),
            ("wo", d, d),
            ("bo", 1, d),
            ("ln2_gamma", 1, d),
            ("ln2_beta", 1, d),
            ("w_up", d, m),
            ("b_up", 1, m),
            ("w_down", m, d),
            ("b_down", 1, d),
        ];
        out.extend(per_layer.map(|(n, r, c)| (format!("layers.{i}.{n}"), r, c)));
    }
    out.push(("lnf_gamma".to_string(), 1, d));
    out.push(("lnf_beta".to_string(), 1, d));
    out.push(("w_out".to_string(), d, config.vocab_size));
    out.push(("b_out".to_string(), 1, config.vocab_size));
    out
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), CheckpointError> {
    let tensors = params.tensors();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    for (name, t) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            rows: t.nrows(),
            cols: t.ncols(),
            offset,
        });
        offset += t.len() * 8;
    }
    let header = Header {
        format: CHECKPOINT_FORMAT.to_string(),
        version: FORMAT_VERSION,
        config: Some(params.config),
        tensors: entries,
    };
    let values: Vec<&Array2<f64>> = tensors.iter().map(|(_, t)| *t).collect();
    write_container(path, &header, &values)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, CheckpointError> {
    let (header, payload) = read_container(path)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(CheckpointError::MalformedHeader(format!(
            "format tag {:?}, expected {CHECKPOINT_FORMAT:?}",
            header.format
        )));
    }
    let config = header.config.ok_or_else(|| {
        CheckpointError::MalformedHeader("missing model config".to_string())
    })?;
    config
        .validate()
        .map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;

    let expected = expected_shapes(&config);
    if header.tensors.len() != expected.len() {
        return Err(CheckpointError::MalformedHeader(format!(
            "manifest lists {} tensors, config requires {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    let mut loaded = Vec::with_capacity(expected.len());
    for (entry, (name, rows, cols)) in header.tensors.iter().zip(&expected) {
        if &entry.name != name || entry.rows != *rows || entry.cols != *cols {
            return Err(CheckpointError::DimensionMismatch {
                tensor: entry.name.clone(),
                expected_rows: *rows,
                expected_cols: *cols,
                got_rows: entry.rows,
                got_cols: entry.cols,
            });
        }
        loaded.push(extract_tensor(entry, &payload)?);
    }

    let d = config.embed_dim;
    let mut it = loaded.into_iter();
    let token_embed = it.next().unwrap();
    let pos_embed = it.next().unwrap();
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerParams {
            ln1_gamma: it.next().unwrap(),
            ln1_beta: it.next().unwrap(),
            wq: it.next().unwrap(),
            bq: it.next().unwrap(),
            wk: it.next().unwrap(),
            bk: it.next().unwrap(),
            wv: it.next().unwrap(),
            bv: it.next().unwrap(),
            wo: it.next().unwrap(),
            bo: it.next().unwrap(),
            ln2_gamma: it.next().unwrap(),
            ln2_beta: it.next().unwrap(),
            w_up: it.next().unwrap(),
            b_up: it.next().unwrap(),
            w_down: it.next().unwrap(),
            b_down: it.next().unwrap(),
        });
    }
    debug_assert_eq!(d, token_embed.ncols());
    Ok(ModelParams {
        config,
        token_embed,
        pos_embed,
        layers,
        lnf_gamma: it.next().unwrap(),
        lnf_beta: it.next().unwrap(),
        w_out: it.next().unwrap(),
        b_out: it.next().unwrap(),
    })
}

/// Checks a loaded checkpoint against the dimensions a run expects,
/// reporting the first differing field with both values.
pub fn ensure_matches(params: &ModelParams, expected: &ModelConfig) -> Result<(), CheckpointError> {
    let got = &params.config;
    let fields: [(&'static str, usize, usize); 5] = [
        ("embed_dim", expected.embed_dim, got.embed_dim),
        ("vocab_size", expected.vocab_size, got.vocab_size),
        ("n_layers", expected.n_layers, got.n_layers),
        ("n_heads", expected.n_heads, got.n_heads),
        ("max_seq_len", expected.max_seq_len, got.max_seq_len),
    ];
    for (field, want, have) in fields {
        if want != have {
            return Err(CheckpointError::ConfigMismatch {
                field,
                expected: want,
                got: have,
            });
        }
    }
    Ok(())
}

/// Dumps a dense matrix (e.g. an exact Fisher matrix) in the same container.
pub fn save_matrix(matrix: &Array2<f64>, name: &str, path: &Path) -> Result<(), CheckpointError> {
    let header = Header {
        format: MATRIX_FORMAT.to_string(),
        version: FORMAT_VERSION,
        config: None,
        tensors: vec![TensorEntry {
            name: name.to_string(),
            rows: matrix.nrows(),
            cols: matrix.ncols(),
            offset: 0,
        }],
    };
    write_container(path, &header, &[matrix])
}

pub fn load_matrix(path: &Path) -> Result<(String, Array2<f64>), CheckpointError> {
    let (header, payload) = read_container(path)?;
    if header.format != MATRIX_FORMAT {
        return Err(CheckpointError::MalformedHeader(format!(
            "format tag {:?}, expected {MATRIX_FORMAT:?}",
            header.format
        )));
    }
    let entry = header
        .tensors
        .first()
        .ok_or_else(|| CheckpointError::MalformedHeader("empty manifest".to_string()))?;
    Ok((entry.name.clone(), extract_tensor(entry, &payload)?))
}
