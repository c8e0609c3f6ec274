//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PFCK"                          4 bytes
//! version                         u32
//! config length                   u64, then that many bytes of UTF-8
//!                                 `key=value` lines
//! tensor count                    u64
//! per tensor:
//!   name length                   u32, then UTF-8 name
//!   dtype tag                     u8 (0 = f32, 1 = f64)
//!   rank                          u32
//!   extents                       rank × u64
//!   payload                       numel × dtype size bytes
//! crc32                           u32 over every preceding byte
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParaFormerModel};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"PFCK";
pub const VERSION: u32 = 1;
const FROZEN_KEY: &str = "frozen_branches";

pub fn to_bytes<T: Scalar>(model: &ParaFormerModel<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());

    let mut cfg = String::new();
    for (k, v) in model.config.to_pairs() {
        cfg.push_str(&format!("{k}={v}\n"));
    }
    cfg.push_str(&format!("{FROZEN_KEY}={}\n", model.frozen_prefix));
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());

    let params = model.named_params();
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, t) in &params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE as u8);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn save<T: Scalar>(model: &ParaFormerModel<T>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<ParaFormerModel<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Schema(format!("{what} runs past the end of the file")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Schema(format!("{what} does not fit in memory")))
    }
}

/// Parses a checkpoint. Checks run in order: magic, checksum, version,
/// config, then the tensor table against the parameters the config implies.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<ParaFormerModel<T>> {
    if bytes.len() >= 4 && &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    if bytes.len() < 12 {
        return Err(Error::Schema(format!("checkpoint truncated to {} bytes", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Integrity { stored, computed });
    }

    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }

    let cfg_len = r.len("config length")?;
    let cfg_text = std::str::from_utf8(r.take(cfg_len, "config block")?)
        .map_err(|_| Error::Schema("config block is not UTF-8".into()))?;
    let mut config = ModelConfig::default();
    let mut seen = Vec::new();
    let mut frozen = 0usize;
    for line in cfg_text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Schema(format!("config line {line:?} is not key=value")))?;
        if k == FROZEN_KEY {
            frozen = v
                .parse()
                .map_err(|_| Error::Schema(format!("{FROZEN_KEY}: bad value {v:?}")))?;
        } else if !config.set(k, v).map_err(|e| Error::Schema(e.to_string()))? {
            return Err(Error::Schema(format!("unknown config key {k:?}")));
        }
        seen.push(k.to_string());
    }
    for key in ModelConfig::KEYS {
        if !seen.iter().any(|s| s == key) {
            return Err(Error::Schema(format!("config key {key:?} missing")));
        }
    }
    config.validate().map_err(|e| Error::Schema(e.to_string()))?;

    let count = r.len("tensor count")?;
    let mut table: HashMap<String, Tensor<T>> = HashMap::new();
    for _ in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Schema("tensor name is not UTF-8".into()))?
            .to_string();
        let tag = r.u8("dtype tag")?;
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Schema(format!("{name}: unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(Error::Schema(format!(
                "{name}: stored as {dtype:?}, loading as {:?}",
                T::DTYPE
            )));
        }
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.len("extent")?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| Error::Schema(format!("{name}: extents overflow")))?;
        let size = dtype.size();
        let payload = r.take(
            numel
                .checked_mul(size)
                .ok_or_else(|| Error::Schema(format!("{name}: payload overflows")))?,
            "tensor payload",
        )?;
        let data = payload.chunks_exact(size).map(T::read_le).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Schema(format!("{name}: {e}")))?;
        if table.insert(name.clone(), t).is_some() {
            return Err(Error::Schema(format!("duplicate tensor {name:?}")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Schema(format!("{} trailing bytes after the tensor table", body.len() - r.pos)));
    }

    let mut model = ParaFormerModel::<T>::init(config)?;
    let expected: BTreeMap<String, Vec<usize>> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    for name in table.keys() {
        if !expected.contains_key(name) {
            return Err(Error::Schema(format!("unexpected tensor {name:?}")));
        }
    }
    for (name, shape) in &expected {
        match table.get(name) {
            None => return Err(Error::Schema(format!("missing tensor {name:?}"))),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::Schema(format!(
                    "{name}: stored shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            }
            Some(_) => {}
        }
    }
    model.visit_params_mut(&mut |name, t| {
        if let Some(stored) = table.remove(&name) {
            *t = stored;
        }
    });
    if frozen > model.n_branches() {
        return Err(Error::Schema(format!("{FROZEN_KEY}={frozen} exceeds the branch count")));
    }
    model.frozen_prefix = frozen;
    Ok(model)
}
