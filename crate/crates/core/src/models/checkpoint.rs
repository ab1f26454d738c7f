//! Binary checkpoint: `"VMTC"`, `u32` version, `u64` header length, a JSON
//! header, then every parameter as little-endian floats in header order,
//! followed by the Adam first and second moments when present.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError, Result};
use crate::codec::CodecConfig;
use crate::tensor::{DType, Float, Tensor};
use crate::train::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VMTC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    codec: CodecConfig,
    seed: u64,
    dtype: DType,
    params: Vec<ParamEntry>,
    optimizer_step: Option<u64>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Everything needed to resume training or run generation.
#[derive(Clone)]
pub struct Checkpoint<T: Float> {
    pub model: Model<T>,
    pub codec: CodecConfig,
    pub seed: u64,
    pub optimizer: Option<AdamState<T>>,
    /// Free-form training metadata (for example the training config).
    pub meta: serde_json::Value,
}

pub fn save_checkpoint<T: Float>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    let bytes = to_bytes(ckpt)?;
    let io = |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    };
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint<T: Float>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}

pub fn to_bytes<T: Float>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let store = &ckpt.model.params;
    let header = Header {
        config: ckpt.model.config.clone(),
        codec: ckpt.codec,
        seed: ckpt.seed,
        dtype: T::DTYPE,
        params: store
            .iter()
            .map(|(_, name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        optimizer_step: ckpt.optimizer.as_ref().map(|o| o.step),
        meta: ckpt.meta.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + store.num_elements() * T::DTYPE.size_bytes() * 3);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in store.iter() {
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    if let Some(opt) = &ckpt.optimizer {
        for moments in [&opt.m, &opt.v] {
            for (id, _, t) in store.iter() {
                let m = &moments[id.index()];
                if m.len() != t.numel() {
                    return Err(ModelError::Checkpoint(format!(
                        "optimizer state for {:?} has {} entries, expected {}",
                        store.name(id),
                        m.len(),
                        t.numel()
                    )));
                }
                for &x in m {
                    x.write_le(&mut out);
                }
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(ModelError::Checkpoint(format!("truncated while reading {what}")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn floats<T: Float>(&mut self, n: usize, what: &str) -> Result<Vec<T>> {
        let w = T::DTYPE.size_bytes();
        let raw = self.take(n * w, what)?;
        Ok(raw.chunks_exact(w).map(T::read_le).collect())
    }
}

fn read_header(c: &mut Cursor) -> Result<Header> {
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(c.take(4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(c.take(8, "header length")?.try_into().unwrap());
    let hlen = usize::try_from(hlen).map_err(|_| ModelError::Checkpoint("header length overflow".into()))?;
    serde_json::from_slice(c.take(hlen, "header")?).map_err(|e| ModelError::Checkpoint(format!("bad header: {e}")))
}

/// Parameter precision recorded in a checkpoint, read from the header only.
pub fn checkpoint_dtype(bytes: &[u8]) -> Result<DType> {
    Ok(read_header(&mut Cursor { bytes, pos: 0 })?.dtype)
}

pub fn from_bytes<T: Float>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut c = Cursor { bytes, pos: 0 };
    let header = read_header(&mut c)?;
    if header.dtype != T::DTYPE {
        return Err(ModelError::DType {
            found: header.dtype.to_string(),
            expected: T::DTYPE.to_string(),
        });
    }
    let mut model = Model::<T>::new(header.config.clone(), header.seed)?;
    let store = &mut model.params;
    for e in &header.params {
        if store.id(&e.name).is_none() {
            return Err(ModelError::UnknownParam(e.name.clone()));
        }
    }
    if let Some((_, name, _)) = store.iter().find(|(_, n, _)| !header.params.iter().any(|e| e.name == *n)) {
        return Err(ModelError::MissingParam(name.to_string()));
    }
    let mut order = Vec::with_capacity(header.params.len());
    for e in &header.params {
        let id = store.id(&e.name).expect("checked above");
        let expected = store.get(id).shape().to_vec();
        if expected != e.shape {
            return Err(ModelError::ParamShape {
                name: e.name.clone(),
                expected,
                found: e.shape.clone(),
            });
        }
        let data = c.floats::<T>(expected.iter().product(), &e.name)?;
        store.set(id, Tensor::new(expected, data)?)?;
        order.push(id);
    }
    let optimizer = match header.optimizer_step {
        None => None,
        Some(step) => {
            let mut st = AdamState::new(store);
            st.step = step;
            for which in 0..2 {
                for &id in &order {
                    let n = store.get(id).numel();
                    let v = c.floats::<T>(n, "optimizer state")?;
                    if which == 0 {
                        st.m[id.index()] = v;
                    } else {
                        st.v[id.index()] = v;
                    }
                }
            }
            Some(st)
        }
    };
    if c.pos != bytes.len() {
        return Err(ModelError::Checkpoint(format!(
            "{} trailing bytes after payload",
            bytes.len() - c.pos
        )));
    }
    Ok(Checkpoint {
        model,
        codec: header.codec,
        seed: header.seed,
        optimizer,
        meta: header.meta,
    })
}
