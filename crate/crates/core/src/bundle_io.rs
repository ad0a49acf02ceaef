//! On-disk bundle format.
//!
//! A bundle file is a UTF-8 text manifest followed immediately by a binary blob:
//!
//! ```text
//! ladabert-bundle v1
//! entries <count>
//! <name> <group> <rows> <cols> <offset> <sha256>
//! ...
//! end
//! <blob>
//! ```
//!
//! Each manifest line describes one matrix. `offset` is the byte offset of the
//! matrix inside the blob (the blob starts right after the `end\n` line), the
//! payload is `rows*cols` IEEE-754 doubles in little-endian byte order, row-major,
//! and `sha256` is the lowercase hex digest of exactly those payload bytes.
//! Entries are written back to back in bundle order.

use std::fs;
use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{DenseMatrix, Group, ParamBundle, TensorError};

pub const MAGIC: &str = "ladabert-bundle v1";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("malformed manifest at line {line}: {reason}")]
    MalformedManifest { line: usize, reason: String },
    #[error("checksum mismatch for entry {name:?}: manifest {expected}, blob {actual}")]
    ChecksumMismatch {
        name: String,
        expected: String,
        actual: String,
    },
    #[error("truncated blob for entry {name:?}: needs bytes {start}..{end}, blob has {available}")]
    TruncatedBlob {
        name: String,
        start: usize,
        end: usize,
        available: usize,
    },
    #[error("invalid entry {name:?}: {source}")]
    InvalidEntry {
        name: String,
        #[source]
        source: TensorError,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn encode_bundle(bundle: &ParamBundle) -> Vec<u8> {
    let mut manifest = format!("{MAGIC}\nentries {}\n", bundle.len());
    let mut blob = Vec::with_capacity(bundle.param_count(None) * 8);
    for (name, entry) in bundle.iter() {
        let start = blob.len();
        for v in entry.matrix.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        let (rows, cols) = entry.matrix.shape();
        manifest.push_str(&format!(
            "{name} {} {rows} {cols} {start} {}\n",
            entry.group,
            sha256_hex(&blob[start..])
        ));
    }
    manifest.push_str("end\n");
    let mut out = manifest.into_bytes();
    out.extend_from_slice(&blob);
    out
}

struct ManifestLine {
    name: String,
    group: Group,
    rows: usize,
    cols: usize,
    offset: usize,
    checksum: String,
}

fn malformed(line: usize, reason: impl Into<String>) -> BundleError {
    BundleError::MalformedManifest {
        line,
        reason: reason.into(),
    }
}

fn parse_field<T: std::str::FromStr>(line: usize, what: &str, raw: &str) -> Result<T, BundleError> {
    raw.parse()
        .map_err(|_| malformed(line, format!("invalid {what} {raw:?}")))
}

fn parse_entry(line_no: usize, line: &str) -> Result<ManifestLine, BundleError> {
    let fields: Vec<&str> = line.split(' ').collect();
    if fields.len() != 6 {
        return Err(malformed(line_no, format!("expected 6 fields, found {}", fields.len())));
    }
    let group = fields[1].parse::<Group>().map_err(|e| malformed(line_no, e))?;
    let checksum = fields[5].to_string();
    if checksum.len() != 64 || !checksum.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(malformed(line_no, "checksum must be 64 hex digits"));
    }
    Ok(ManifestLine {
        name: fields[0].to_string(),
        group,
        rows: parse_field(line_no, "rows", fields[2])?,
        cols: parse_field(line_no, "cols", fields[3])?,
        offset: parse_field(line_no, "offset", fields[4])?,
        checksum,
    })
}

pub fn decode_bundle(bytes: &[u8]) -> Result<ParamBundle, BundleError> {
    let mut cursor = 0usize;
    let mut next_line = |line_no: usize| -> Result<&str, BundleError> {
        let rest = &bytes[cursor..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| malformed(line_no, "unexpected end of manifest"))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| malformed(line_no, "manifest is not valid UTF-8"))?;
        cursor += end + 1;
        Ok(line)
    };

    if next_line(1)? != MAGIC {
        return Err(malformed(1, format!("expected header {MAGIC:?}")));
    }
    let count_line = next_line(2)?;
    let count: usize = match count_line.strip_prefix("entries ") {
        Some(raw) => parse_field(2, "entry count", raw)?,
        None => return Err(malformed(2, "expected `entries <count>`")),
    };
    let mut lines = Vec::with_capacity(count);
    for i in 0..count {
        let line_no = i + 3;
        lines.push(parse_entry(line_no, next_line(line_no)?)?);
    }
    if next_line(count + 3)? != "end" {
        return Err(malformed(count + 3, "expected `end`"));
    }
    let blob = &bytes[cursor..];

    let mut bundle = ParamBundle::new();
    for line in lines {
        let byte_len = line
            .rows
            .checked_mul(line.cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| malformed(0, format!("shape overflow for {:?}", line.name)))?;
        let end = line.offset.saturating_add(byte_len);
        if end > blob.len() {
            return Err(BundleError::TruncatedBlob {
                name: line.name,
                start: line.offset,
                end,
                available: blob.len(),
            });
        }
        let payload = &blob[line.offset..end];
        let actual = sha256_hex(payload);
        if actual != line.checksum {
            return Err(BundleError::ChecksumMismatch {
                name: line.name,
                expected: line.checksum,
                actual,
            });
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let matrix = DenseMatrix::new(line.rows, line.cols, data).map_err(|source| {
            BundleError::InvalidEntry {
                name: line.name.clone(),
                source,
            }
        })?;
        bundle
            .insert(line.name.clone(), line.group, matrix)
            .map_err(|source| BundleError::InvalidEntry {
                name: line.name,
                source,
            })?;
    }
    Ok(bundle)
}

pub fn save_bundle(bundle: &ParamBundle, path: impl AsRef<Path>) -> Result<(), BundleError> {
    fs::write(path, encode_bundle(bundle))?;
    Ok(())
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<ParamBundle, BundleError> {
    decode_bundle(&fs::read(path)?)
}
