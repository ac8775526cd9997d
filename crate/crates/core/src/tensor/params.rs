use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"CVWT";
pub const WEIGHTS_VERSION: u16 = 1;

const SEED_KEY: &str = "param_seed";

/// Named parameter tensors plus the seed they were initialized from.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    entries: BTreeMap<String, Tensor<T>>,
    pub seed: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            entries: BTreeMap::new(),
            seed,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_params(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            seed: self.seed,
        }
    }

    /// Copy of every entry under `prefix`, with the prefix removed.
    pub fn sub_store(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
            seed: self.seed,
        }
    }

    /// Move every entry of `other` in under `prefix`.
    pub fn absorb(&mut self, prefix: &str, other: ParamStore<T>) -> Result<()> {
        for (k, v) in other.entries {
            self.insert(format!("{prefix}{k}"), v)?;
        }
        Ok(())
    }
}

impl ParamStore<f32> {
    /// Serialize with a `key=value` header block.
    pub fn encode(&self, header: &BTreeMap<String, String>) -> Result<Vec<u8>> {
        let mut text = String::new();
        let mut kv = header.clone();
        kv.insert(SEED_KEY.to_string(), self.seed.to_string());
        for (k, v) in &kv {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Invalid(format!("header entry {k:?} is not a single key=value line")));
            }
            text.push_str(k);
            text.push('=');
            text.push_str(v);
            text.push('\n');
        }

        let mut out = Vec::with_capacity(64 + text.len() + self.num_params() * 4);
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Invalid(format!("parameter name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<(Self, BTreeMap<String, String>)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != WEIGHTS_MAGIC {
            return Err(Error::Format("not a weights file (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != WEIGHTS_VERSION {
            return Err(Error::Format(format!("unsupported weights version {version}")));
        }
        let header_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| Error::Format("header is not UTF-8".into()))?;
        let mut header = parse_kv(text)?;
        let seed = header
            .remove(SEED_KEY)
            .map(|s| s.parse::<u64>())
            .transpose()
            .map_err(|_| Error::Format("bad param_seed".into()))?
            .unwrap_or(0);

        let count = r.u32()? as usize;
        let mut store = ParamStore::new(seed);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store
                .insert(name, Tensor::new(shape, data)?)
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok((store, header))
    }

    pub fn save(&self, path: &Path, header: &BTreeMap<String, String>) -> Result<()> {
        fs::write(path, self.encode(header)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Parse `key=value` lines; blank lines and `#` comments are skipped.
pub(crate) fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Malformed {
            line: i + 1,
            reason: format!("expected key=value, got {line:?}"),
        })?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Malformed {
                line: i + 1,
                reason: format!("duplicate key {}", k.trim()),
            });
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
