//! Binary tensor-record files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"CTCK" | version: u32 | count: u32 |
//!   count x ( name_len: u32 | name: utf8 | ndim: u32 | dims: ndim x u64 | values: numel x f64 )
//! ```

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CTCK";
pub const VERSION: u32 = 1;

pub fn encode_records<'a>(records: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let records: Vec<_> = records.into_iter().collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        read_exact(&mut r, &mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| TensorError::Checkpoint("record name is not utf-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel.saturating_mul(8) > r.len() {
            return Err(TensorError::Checkpoint(format!("record `{name}` truncated")));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(read_array(&mut r)?));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    if !r.is_empty() {
        return Err(TensorError::Checkpoint("trailing bytes".into()));
    }
    Ok(out)
}

/// Write records to `path` via a temporary file and rename, so a failed
/// write never clobbers an existing checkpoint.
pub fn write_records<'a>(
    path: &Path,
    records: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let bytes = encode_records(records);
    let tmp = path.with_extension("tmp");
    {
        let mut f = BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(&bytes)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_records(&bytes)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    if r.len() < buf.len() {
        return Err(TensorError::Checkpoint("unexpected end of file".into()));
    }
    buf.copy_from_slice(&r[..buf.len()]);
    *r = &r[buf.len()..];
    Ok(())
}

fn read_array<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new([2], vec![1.0, -0.5]).unwrap();
        let bytes = encode_records([("w", &t)]);
        assert_eq!(&bytes[..4], b"CTCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        // name_len + name + ndim + one dim + two values
        assert_eq!(bytes.len(), 12 + 4 + 1 + 4 + 8 + 16);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let t = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = encode_records([("a", &t)]);
        assert!(decode_records(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_records(&bad).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ctck");
        let a = Tensor::new([2, 2], vec![0.1, 0.2, 0.3, f64::MIN_POSITIVE]).unwrap();
        let b = Tensor::scalar(7.0);
        write_records(&path, [("a", &a), ("b.bias", &b)]).unwrap();
        let back = read_records(&path).unwrap();
        assert_eq!(back[0], ("a".to_string(), a));
        assert_eq!(back[1], ("b.bias".to_string(), b));
    }
}
