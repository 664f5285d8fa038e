//! Named-tensor checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CCFT"  magic
//! u32     format version (1)
//! u64     tensor count
//! per tensor:
//!   u32   name length, then UTF-8 name bytes
//!   u32   rank, then rank × u64 extents
//!   f64   row-major elements
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{CcfError, Result};

pub const MAGIC: &[u8; 4] = b"CCFT";
pub const VERSION: u32 = 1;

pub fn encode<W: Write>(mut w: W, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn decode<R: Read>(mut r: R) -> Result<BTreeMap<String, Tensor>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CcfError::Checkpoint("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CcfError::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = read_u64(&mut r)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| CcfError::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let t = Tensor::new(shape, data).map_err(|e| CcfError::Checkpoint(format!("{name}: {e}")))?;
        out.insert(name, t);
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    encode(BufWriter::new(File::create(path)?), tensors)
}

pub fn read_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    if !path.exists() {
        return Err(CcfError::MissingArtifact(path.to_path_buf()));
    }
    decode(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), Tensor::matrix(1, 2, vec![1.0, -0.5]).unwrap());
        let mut buf = Vec::new();
        encode(&mut buf, &m).unwrap();
        assert_eq!(&buf[..4], b"CCFT");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 1);
        // name, rank, 2 extents, 2 values
        assert_eq!(buf.len(), 16 + 4 + 1 + 4 + 16 + 16);
        assert_eq!(decode(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut buf = Vec::new();
        encode(&mut buf, &BTreeMap::new()).unwrap();
        buf[4] = 9;
        let err = decode(buf.as_slice()).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }
}
