//! Named-tensor archive used for checkpoints.
//!
//! Layout (little-endian): magic `CCFK`, `u32` version, `u32` scalar width in
//! bytes, `u64` metadata length, metadata JSON, `u32` tensor count, then per
//! tensor a `u32`-prefixed UTF-8 name, `u32` rows, `u32` cols and the values
//! in native width. Values round-trip bitwise.

use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

const MAGIC: &[u8; 4] = b"CCFK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorArchive<T> {
    pub meta: Value,
    pub tensors: Vec<(String, Matrix<T>)>,
}

impl<T: Scalar> TensorArchive<T> {
    pub fn new(meta: Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix<T>) {
        self.tensors.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("JSON value serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&T::DTYPE.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for &x in m.as_slice() {
                x.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0, path };
        if cur.take(4)? != MAGIC {
            return Err(Error::bad_artifact(path, "not a checkpoint archive"));
        }
        if cur.u32()? != VERSION {
            return Err(Error::bad_artifact(path, "unsupported archive version"));
        }
        let dtype = cur.u32()?;
        if dtype != T::DTYPE {
            return Err(Error::bad_artifact(
                path,
                format!("archive holds {dtype}-byte scalars, expected {}", T::DTYPE),
            ));
        }
        let meta_len = cur.u64()? as usize;
        let meta = serde_json::from_slice(cur.take(meta_len)?)
            .map_err(|e| Error::bad_artifact(path, format!("metadata: {e}")))?;
        let count = cur.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(len)?.to_vec())
                .map_err(|_| Error::bad_artifact(path, "tensor name is not UTF-8"))?;
            let rows = cur.u32()? as usize;
            let cols = cur.u32()? as usize;
            let raw = cur.take(rows * cols * T::BYTES)?;
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            tensors.push((name, Matrix::from_vec(rows, cols, data)));
        }
        if cur.pos != bytes.len() {
            return Err(Error::bad_artifact(path, "trailing bytes after last tensor"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::bad_artifact(self.path, "truncated archive"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
