//! Named-tensor checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "PKDC" | version | count | count × (name_len, name utf-8, rank, dims[rank], f32 data)
//! ```

use std::path::Path;

use super::tensor::ParamTensor;
use crate::codec::{put_f32s, put_str, put_u32, write_atomic, Reader};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PKDC";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_RANK: usize = 8;

pub fn encode_checkpoint(tensors: &[(String, ParamTensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, tensors.len() as u32);
    for (name, t) in tensors {
        put_str(&mut out, name);
        put_u32(&mut out, t.dims().len() as u32);
        for &d in t.dims() {
            put_u32(&mut out, d as u32);
        }
        put_f32s(&mut out, t.data());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, ParamTensor)>> {
    let bad = |m: String| Error::Checkpoint(m);
    let mut r = Reader::new(bytes);
    let magic = r.bytes(4).ok_or_else(|| bad("truncated magic".into()))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let version = r.u32().ok_or_else(|| bad("truncated version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = r.u32().ok_or_else(|| bad("truncated count".into()))? as usize;
    let mut out = Vec::new();
    for i in 0..count {
        let name = r
            .string()
            .ok_or_else(|| bad(format!("tensor {i}: truncated name")))?
            .map_err(|_| bad(format!("tensor {i}: name is not UTF-8")))?;
        let rank = r.u32().ok_or_else(|| bad(format!("{name}: truncated rank")))? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(bad(format!("{name}: unsupported rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32().ok_or_else(|| bad(format!("{name}: truncated dims")))? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
            .ok_or_else(|| bad(format!("{name}: data for dims {dims:?} is truncated")))?;
        let data = r.f32s(n).ok_or_else(|| bad(format!("{name}: truncated data")))?;
        let t = ParamTensor::new(dims, data).map_err(|e| bad(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.remaining() != 0 {
        return Err(bad(format!("{} trailing bytes", r.remaining())));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, tensors: &[(String, ParamTensor)]) -> Result<()> {
    write_atomic(path, &encode_checkpoint(tensors))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, ParamTensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_garbage() {
        assert!(decode_checkpoint(b"").is_err());
        assert!(decode_checkpoint(b"PKDW\x01\0\0\0\0\0\0\0").is_err());
        assert!(decode_checkpoint(b"PKDC\x02\0\0\0\0\0\0\0").is_err());
        assert!(decode_checkpoint(b"PKDC\x01\0\0\0\0\0\0\0").unwrap().is_empty());
        assert!(decode_checkpoint(b"PKDC\x01\0\0\0\0\0\0\0x").is_err());
    }

    #[test]
    fn huge_dims_do_not_allocate() {
        let mut b = b"PKDC".to_vec();
        put_u32(&mut b, 1);
        put_u32(&mut b, 1);
        put_str(&mut b, "w");
        put_u32(&mut b, 2);
        put_u32(&mut b, u32::MAX);
        put_u32(&mut b, u32::MAX);
        assert!(decode_checkpoint(&b).is_err());
    }
}
