//! On-disk container for named f64 tensor collections (network weights).
//!
//! Layout: an 8-byte magic string, a little-endian u64 header length, a JSON
//! header, then the concatenated tensor payload as little-endian f64 values.
//! The header carries caller-supplied metadata plus a tensor directory
//! (name, shape, payload offset in values, value count). Readers locate
//! tensors through the directory, so unknown metadata fields never break
//! older files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LVWGTS01";

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, counted in f64 values.
    offset: u64,
    count: u64,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Archive {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Write named tensors plus arbitrary JSON metadata to `path`.
pub fn save_named(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &[(String, Vec<usize>, &[f64])],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, shape, values) in tensors {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(format_err(
                path,
                format!(
                    "tensor {name} has {} values but shape {:?} implies {expected}",
                    values.len(),
                    shape
                ),
            ));
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            count: values.len() as u64,
        });
        offset += values.len() as u64;
    }
    let header = Header {
        meta: meta.clone(),
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| format_err(path, format!("header serialization: {e}")))?;

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
        }
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(|e| io_err(path, e))?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    w.write_all(&header_bytes).map_err(|e| io_err(path, e))?;
    for (_, _, values) in tensors {
        let mut buf = Vec::with_capacity(values.len() * 8);
        for v in *values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Read an archive back: metadata plus name -> (shape, values).
#[allow(clippy::type_complexity)]
pub fn load_named(path: &Path) -> Result<(serde_json::Value, BTreeMap<String, (Vec<usize>, Vec<f64>)>)> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(format_err(path, "not a weight archive (bad magic)"));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes).map_err(|e| io_err(path, e))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    if header_len > 1 << 30 {
        return Err(format_err(path, "header length is implausibly large"));
    }
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(|e| io_err(path, e))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| format_err(path, format!("header parse: {e}")))?;

    let total: u64 = header.tensors.iter().map(|t| t.count).sum();
    let mut payload = vec![0u8; (total as usize) * 8];
    r.read_exact(&mut payload).map_err(|e| io_err(path, e))?;

    let mut out = BTreeMap::new();
    for entry in header.tensors {
        let expected: usize = entry.shape.iter().product();
        if expected as u64 != entry.count {
            return Err(format_err(
                path,
                format!("tensor {} directory entry is inconsistent", entry.name),
            ));
        }
        let start = (entry.offset as usize) * 8;
        let end = start + (entry.count as usize) * 8;
        if end > payload.len() {
            return Err(format_err(
                path,
                format!("tensor {} payload is out of bounds", entry.name),
            ));
        }
        let values: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if out.insert(entry.name.clone(), (entry.shape, values)).is_some() {
            return Err(format_err(path, format!("duplicate tensor name {}", entry.name)));
        }
    }
    Ok((header.meta, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.lvw");
        let a: Vec<f64> = vec![1.5, -2.25, f64::MIN_POSITIVE, 1e300, -0.0];
        let b: Vec<f64> = (0..24).map(|i| (i as f64).sin()).collect();
        let meta = json!({"kind": "test", "note": 7});
        save_named(
            &path,
            &meta,
            &[
                ("alpha".to_string(), vec![5], a.as_slice()),
                ("beta.weight".to_string(), vec![2, 3, 4], b.as_slice()),
            ],
        )
        .unwrap();

        let (meta2, tensors) = load_named(&path).unwrap();
        assert_eq!(meta2, meta);
        let (shape_a, vals_a) = &tensors["alpha"];
        assert_eq!(shape_a, &vec![5]);
        for (x, y) in vals_a.iter().zip(&a) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let (shape_b, vals_b) = &tensors["beta.weight"];
        assert_eq!(shape_b, &vec![2, 3, 4]);
        assert_eq!(vals_b, &b);
    }

    #[test]
    fn rejects_wrong_magic_and_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.lvw");
        std::fs::write(&path, b"NOTANARCHIVE....").unwrap();
        let err = load_named(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        let vals = [1.0, 2.0];
        let err = save_named(
            &path,
            &serde_json::Value::Null,
            &[("x".to_string(), vec![3], vals.as_slice())],
        )
        .unwrap_err();
        assert!(err.to_string().contains("implies"), "{err}");
    }
}
