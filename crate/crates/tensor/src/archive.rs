//! Single-file tensor archive: magic, JSON header, raw little-endian payload.
//!
//! ```text
//! b"SWARCH01" | u64 LE header length | header JSON | tensor data ...
//! ```
//! The header holds caller metadata under `meta` and a table of tensor names
//! and shapes in payload order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;
use crate::TensorError;

const MAGIC: &[u8; 8] = b"SWARCH01";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    meta: Value,
    tensors: Vec<Entry>,
}

pub fn write_archive<T: Scalar>(path: &Path, meta: &Value, tensors: &[(String, Tensor<T>)]) -> Result<(), TensorError> {
    let header = Header {
        dtype: T::DTYPE.to_string(),
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    for (_, t) in tensors {
        f.write_all(&T::to_le_bytes_vec(t.data()))?;
    }
    f.flush()?;
    Ok(())
}

pub type Named<T> = Vec<(String, Tensor<T>)>;

/// Reads an archive, converting stored values to `T`.
pub fn read_archive<T: Scalar>(path: &Path) -> Result<(Value, Named<T>), TensorError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(TensorError::Format("bad archive magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| TensorError::Format("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body)?;
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(TensorError::Format(format!("unknown dtype {other}"))),
    };
    let mut offset = 16 + hlen;
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = bytes
            .get(offset..offset + n * width)
            .ok_or_else(|| TensorError::Format(format!("truncated payload for {}", e.name)))?;
        offset += n * width;
        let data: Vec<T> = if width == 4 {
            raw.chunks_exact(4)
                .map(|c| lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect()
        } else {
            raw.chunks_exact(8)
                .map(|c| lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect()
        };
        out.push((e.name, Tensor::from_vec(&e.shape, data)?));
    }
    if offset != bytes.len() {
        return Err(TensorError::Format("trailing bytes after payload".into()));
    }
    Ok((header.meta, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_dtype_conversion() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        let t = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 * 0.25);
        let meta = serde_json::json!({"step": 7});
        write_archive(&path, &meta, &[("t".to_string(), t.clone())]).unwrap();
        let (m, back) = read_archive::<f32>(&path).unwrap();
        assert_eq!(m, meta);
        assert_eq!(back[0].1, t);
        let (_, wide) = read_archive::<f64>(&path).unwrap();
        assert_eq!(wide[0].1.data()[5], 1.25);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.bin");
        fs::write(&path, b"not an archive at all").unwrap();
        assert!(read_archive::<f32>(&path).is_err());
    }
}
