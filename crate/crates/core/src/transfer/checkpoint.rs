//! Binary checkpoint format.
//!
//! ```text
//! "QTX1" | version u8 | count u32
//! per entry: path_len u16 | path | rank u8 | dims u32×rank | n_values u32 | f32×n_values
//! meta_len u32 | UTF-8 key=value lines
//! ```
//! All integers and reals are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::model::{Model, ModelConfig, ModelKind, ParamStore};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"QTX1";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    /// Snapshot of `model` with its configuration, kind and vocabulary in the
    /// metadata.
    pub fn from_model(model: &Model, step: u64, seed: u64, vocab: &[String]) -> Self {
        let c = &model.config;
        let mut meta = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            meta.insert(k.to_string(), v);
        };
        put("kind", model.kind.to_string());
        put("step", step.to_string());
        put("seed", seed.to_string());
        put("config_digest", c.shared_digest());
        put("embedding_dim", c.embedding_dim.to_string());
        put("hidden", c.hidden.to_string());
        put("num_classes", c.num_classes.to_string());
        put("vocab_size", c.vocab_size.to_string());
        put("keep_prob", c.keep_prob.to_string());
        put("vocab", vocab.join(" "));
        Self {
            params: round_f32(&model.params),
            meta,
        }
    }

    fn meta_value(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format("checkpoint metadata", format!("missing key {key}")))
    }

    fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.meta_value(key)?;
        raw.parse()
            .map_err(|e| Error::format("checkpoint metadata", format!("{key}={raw}: {e}")))
    }

    pub fn kind(&self) -> Result<ModelKind> {
        self.meta_parse("kind")
    }

    pub fn step(&self) -> Result<u64> {
        self.meta_parse("step")
    }

    pub fn seed(&self) -> Result<u64> {
        self.meta_parse("seed")
    }

    pub fn config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            embedding_dim: self.meta_parse("embedding_dim")?,
            hidden: self.meta_parse("hidden")?,
            num_classes: self.meta_parse("num_classes")?,
            vocab_size: self.meta_parse("vocab_size")?,
            keep_prob: self.meta_parse("keep_prob")?,
        })
    }

    pub fn vocab_tokens(&self) -> Result<Vec<String>> {
        Ok(self.meta_value("vocab")?.split(' ').map(str::to_string).collect())
    }

    pub fn into_model(self) -> Result<Model> {
        let config = self.config()?;
        let kind = self.kind()?;
        Model::from_params(config, kind, self.params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (path, t) in self.params.iter() {
            out.extend_from_slice(&(path.len() as u16).to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&(t.numel() as u32).to_le_bytes());
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let mut text = String::new();
        for (k, v) in &self.meta {
            text.push_str(k);
            text.push('=');
            text.push_str(v);
            text.push('\n');
        }
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "header")?;
        if magic != MAGIC {
            return Err(Error::format("header", format!("bad magic {magic:?}")));
        }
        let version = r.take(1, "header")?[0];
        if version != VERSION {
            return Err(Error::format("header", format!("unsupported version {version}")));
        }
        let count = r.u32("header")?;
        let mut params = ParamStore::new();
        for k in 0..count {
            let here = format!("entry {k}");
            let len = u16::from_le_bytes(r.take(2, &here)?.try_into().expect("2 bytes")) as usize;
            let path = std::str::from_utf8(r.take(len, &here)?)
                .map_err(|e| Error::format(&here, format!("path is not UTF-8: {e}")))?
                .to_string();
            let at = format!("entry {path}");
            if params.get(&path).is_some() {
                return Err(Error::format(&at, "duplicate path"));
            }
            let rank = r.take(1, &at)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(&at)? as usize);
            }
            let n_values = r.u32(&at)? as usize;
            let expected: usize = shape.iter().product();
            if rank == 0 || shape.contains(&0) || expected != n_values {
                return Err(Error::format(
                    &at,
                    format!("shape {shape:?} does not match {n_values} payload values"),
                ));
            }
            let raw = r.take(4 * n_values, &at)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            params.insert(path, Tensor::new(shape, data)?);
        }
        let len = r.u32("metadata")? as usize;
        let text = std::str::from_utf8(r.take(len, "metadata")?)
            .map_err(|e| Error::format("metadata", format!("not UTF-8: {e}")))?;
        if r.pos != bytes.len() {
            return Err(Error::format("metadata", "trailing bytes after metadata"));
        }
        let mut meta = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("metadata", format!("line without '=': {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        Ok(Self { params, meta })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, at: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(at, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, at: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, at)?.try_into().expect("4 bytes")))
    }
}

/// Parameters rounded to the stored 32-bit precision.
pub fn round_f32(params: &ParamStore) -> ParamStore {
    let mut out = params.clone();
    for (_, t) in out.iter_mut() {
        for v in t.data_mut() {
            *v = f64::from(*v as f32);
        }
    }
    out
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Format { locator, message } => Error::Format {
            locator: format!("{}: {locator}", path.display()),
            message,
        },
        other => other,
    })
}
