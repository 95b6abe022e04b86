//! Single-file checkpoint container.
//!
//! Layout: `b"TCKP"`, `u32` container version, `u64` header byte length,
//! the JSON header, then little-endian buffers in header order: parameters,
//! buffers, Adam first moments, Adam second moments.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::params::ParamStore;
use super::{Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TCKP";
const CONTAINER_VERSION: u32 = 1;
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
}

/// Seed and stream position of a ChaCha generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Word position, as a decimal string since it is 128-bit.
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dtype: String,
    pub params: Vec<TensorEntry>,
    pub buffers: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerState>,
    pub global_step: u64,
    pub rng: Option<RngState>,
    pub param_count: usize,
    /// Free-form model description (topology, schedule, ...).
    pub model: serde_json::Value,
}

pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub store: ParamStore<T>,
    pub adam: Option<Adam<T>>,
}

fn entries<T: Real>(names: &[String], values: &[Tensor<T>]) -> Vec<TensorEntry> {
    names
        .iter()
        .zip(values)
        .map(|(n, v)| TensorEntry {
            name: n.clone(),
            shape: v.shape().to_vec(),
        })
        .collect()
}

/// Serialize to bytes.
pub fn to_bytes<T: Real>(
    store: &ParamStore<T>,
    adam: Option<&Adam<T>>,
    global_step: u64,
    rng: Option<RngState>,
    model: serde_json::Value,
) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE.to_string(),
        params: entries(store.names(), store.values()),
        buffers: entries(store.buffer_names(), store.buffers()),
        optimizer: adam.map(|a| OptimizerState {
            config: a.config,
            step: a.step,
        }),
        global_step,
        rng,
        param_count: store.num_scalars(),
        model,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut push = |t: &Tensor<T>| t.data().iter().for_each(|v| v.write_le(&mut out));
    store.values().iter().for_each(&mut push);
    store.buffers().iter().for_each(&mut push);
    if let Some(a) = adam {
        a.m.iter().for_each(&mut push);
        a.v.iter().for_each(&mut push);
    }
    Ok(out)
}

pub fn save<T: Real>(
    path: &Path,
    store: &ParamStore<T>,
    adam: Option<&Adam<T>>,
    global_step: u64,
    rng: Option<RngState>,
    model: serde_json::Value,
) -> Result<Vec<u8>> {
    let bytes = to_bytes(store, adam, global_step, rng, model)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

/// Parse only the JSON header.
pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CONTAINER_VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..end]).map_err(|e| Error::Format(e.to_string()))?;
    Ok((header, end))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn tensor<T: Real>(&mut self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let len = n * T::BYTES;
        if self.pos + len > self.bytes.len() {
            return Err(Error::Format("truncated tensor data".into()));
        }
        let data = self.bytes[self.pos..self.pos + len]
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect();
        self.pos += len;
        Tensor::new(shape.to_vec(), data)
    }
}

/// Decode a full checkpoint into a fresh store.
pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (header, start) = read_header(bytes)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint format {}",
            header.format_version
        )));
    }
    if header.dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "checkpoint holds {} values, requested {}",
            header.dtype,
            T::DTYPE
        )));
    }
    let mut r = Reader { bytes, pos: start };
    let mut store = ParamStore::new();
    for e in &header.params {
        let t = r.tensor(&e.shape)?;
        store.add(e.name.clone(), t)?;
    }
    for e in &header.buffers {
        let t = r.tensor(&e.shape)?;
        store.add_buffer(e.name.clone(), t)?;
    }
    if store.num_scalars() != header.param_count {
        return Err(Error::Format(format!(
            "header claims {} parameters, found {}",
            header.param_count,
            store.num_scalars()
        )));
    }
    let adam = match &header.optimizer {
        Some(opt) => {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for e in &header.params {
                m.push(r.tensor(&e.shape)?);
            }
            for e in &header.params {
                v.push(r.tensor(&e.shape)?);
            }
            Some(Adam {
                config: opt.config,
                step: opt.step,
                m,
                v,
            })
        }
        None => None,
    };
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint data",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        header,
        store,
        adam,
    })
}

pub fn load<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Copy checkpoint values into a store built from the same configuration.
/// Names, order and shapes must all agree.
pub fn restore_into<T: Real>(target: &mut ParamStore<T>, loaded: &ParamStore<T>) -> Result<()> {
    if target.names() != loaded.names() || target.buffer_names() != loaded.buffer_names() {
        return Err(Error::Format(
            "checkpoint parameter names do not match the configured model".into(),
        ));
    }
    for id in loaded.ids() {
        target.set(id, loaded.get(id).clone())?;
    }
    for (i, b) in loaded.buffers().iter().enumerate() {
        let dst = target.buffer_mut(super::params::BufferId(i));
        if dst.shape() != b.shape() {
            return Err(Error::shape("restore", format!("buffer {i} shape")));
        }
        *dst = b.clone();
    }
    Ok(())
}

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_with_optimizer() {
        let mut s = ParamStore::<f32>::new();
        s.add("a.w", Tensor::from_fn(vec![2, 3], |i| i as f32 * 0.5)).unwrap();
        s.add("a.b", Tensor::full(vec![3], -1.0)).unwrap();
        s.add_buffer("a.running_var", Tensor::full(vec![3], 2.0)).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &s);
        let grads = vec![
            Some(Tensor::full(vec![2, 3], 0.1)),
            Some(Tensor::full(vec![3], -0.2)),
        ];
        adam.step(&mut s, &grads).unwrap();
        let rng = RngState {
            seed: 9,
            word_pos: "123".into(),
        };
        let bytes = to_bytes(&s, Some(&adam), 1, Some(rng.clone()), serde_json::json!({"k": 1})).unwrap();
        let ck = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(ck.store.names(), s.names());
        assert_eq!(ck.store.values(), s.values());
        assert_eq!(ck.store.buffers(), s.buffers());
        let a2 = ck.adam.unwrap();
        assert_eq!(a2.m, adam.m);
        assert_eq!(a2.v, adam.v);
        assert_eq!(a2.step, 1);
        assert_eq!(ck.header.rng, Some(rng));
        assert_eq!(ck.header.param_count, 9);
        // re-encoding is byte-identical
        let again = to_bytes(&ck.store, Some(&a2), 1, ck.header.rng.clone(), ck.header.model.clone()).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn rejects_wrong_dtype_and_garbage() {
        let mut s = ParamStore::<f32>::new();
        s.add("p", Tensor::zeros(vec![1])).unwrap();
        let bytes = to_bytes(&s, None, 0, None, serde_json::Value::Null).unwrap();
        assert!(from_bytes::<f64>(&bytes).is_err());
        assert!(from_bytes::<f32>(b"nope").is_err());
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 1]).is_err());
    }
}
