//! Named-tensor checkpoint file.
//!
//! Layout (little-endian): magic "FKDP1", u32 tensor count, then per tensor
//! (u32 name length, name bytes, u32 rank, u64 dims..., row-major f64 data).

use std::path::Path;

use crate::error::{FkdError, Result};
use crate::mat::Mat;

const MAGIC: &[u8; 5] = b"FKDP1";

pub fn save_checkpoint(path: impl AsRef<Path>, tensors: &[(String, Mat)]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, mat) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&(mat.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(mat.cols() as u64).to_le_bytes());
        for v in mat.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, &buf).map_err(|e| FkdError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Mat)>> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| FkdError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let fail = |msg: &str| FkdError::CheckpointInvalid(format!("{}: {msg}", path.display()));
    if buf.len() < 9 || &buf[..5] != MAGIC {
        return Err(fail("bad magic"));
    }
    let count = u32::from_le_bytes(buf[5..9].try_into().unwrap()) as usize;
    let mut off = 9usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let need = |o: usize, k: usize| -> Result<()> {
            if o + k > buf.len() {
                Err(fail("truncated"))
            } else {
                Ok(())
            }
        };
        need(off, 4)?;
        let name_len = u32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        need(off, name_len)?;
        let name = String::from_utf8(buf[off..off + name_len].to_vec())
            .map_err(|_| fail("bad name encoding"))?;
        off += name_len;
        need(off, 4)?;
        let rank = u32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        if rank != 2 {
            return Err(fail("only rank-2 tensors supported"));
        }
        need(off, 16)?;
        let rows = u64::from_le_bytes(buf[off..off + 8].try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(buf[off + 8..off + 16].try_into().unwrap()) as usize;
        off += 16;
        need(off, rows * cols * 8)?;
        let mut data = Vec::with_capacity(rows * cols);
        for k in 0..rows * cols {
            let o = off + k * 8;
            data.push(f64::from_le_bytes(buf[o..o + 8].try_into().unwrap()));
        }
        off += rows * cols * 8;
        out.push((name, Mat::from_vec(rows, cols, data)));
    }
    Ok(out)
}
