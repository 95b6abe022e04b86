//! Binary window store.
//!
//! Layout: `b"TCWS"`, `u32` version, `u64` B, `u64` C, `u64` L, then
//! `B * C * L` little-endian `f32` values in `[B, C, L]` order.

use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TCWS";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 * 3;

#[derive(Clone, Debug, PartialEq)]
pub struct WindowStore {
    pub shape: [usize; 3],
    pub values: Vec<f32>,
}

impl WindowStore {
    pub fn new(shape: [usize; 3], values: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::shape(
                "window store",
                format!("{shape:?} needs {} values, got {}", shape.iter().product::<usize>(), values.len()),
            ));
        }
        Ok(WindowStore { shape, values })
    }

    pub fn len(&self) -> usize {
        self.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.shape[0] == 0
    }

    pub fn window(&self, i: usize) -> &[f32] {
        let n = self.shape[1] * self.shape[2];
        &self.values[i * n..(i + 1) * n]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for d in self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a window store".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported window store version {version}")));
        }
        let mut shape = [0usize; 3];
        for (i, d) in shape.iter_mut().enumerate() {
            let o = 8 + 8 * i;
            *d = u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()) as usize;
        }
        let n: usize = shape.iter().product();
        let body = &bytes[HEADER_LEN..];
        if body.len() != 4 * n {
            return Err(Error::Format(format!(
                "window store {shape:?} expects {} bytes of data, found {}",
                4 * n,
                body.len()
            )));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(WindowStore { shape, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(p) = path.parent() {
            std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::data(path.display().to_string(), m),
            e => e,
        })
    }
}
