use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Training hyper-parameters; read from flat `key=value` files.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hidden: usize,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub batch: usize,
    pub lr: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub ema: f64,
    pub patience: u64,
    pub eval_every: u64,
    pub max_steps: u64,
    pub seed: u64,
    pub keep_prob: f64,
    pub clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 200,
            embedding_dim: 100,
            num_classes: 2,
            batch: 50,
            lr: 0.5,
            rho: 0.95,
            epsilon: 1e-6,
            ema: 0.999,
            patience: 5000,
            eval_every: 500,
            max_steps: 100_000,
            seed: 0,
            keep_prob: 0.8,
            clip: 5.0,
        }
    }
}

const KEYS: &[&str] = &[
    "hidden",
    "embedding_dim",
    "num_classes",
    "batch",
    "lr",
    "rho",
    "epsilon",
    "ema",
    "patience",
    "eval_every",
    "max_steps",
    "seed",
    "keep_prob",
    "clip",
];

impl TrainConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Defaults overridden by the `key=value` lines of `text`. Blank lines
    /// and `#` comments are skipped.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let loc = format!("{source}:{}", n + 1);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(&loc, format!("expected key=value, got {line:?}")))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|msg| Error::format(&loc, msg))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            v.parse().map_err(|e| format!("{key}={v}: {e}"))
        }
        match key {
            "hidden" => self.hidden = num(key, value)?,
            "embedding_dim" => self.embedding_dim = num(key, value)?,
            "num_classes" => self.num_classes = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "rho" => self.rho = num(key, value)?,
            "epsilon" => self.epsilon = num(key, value)?,
            "ema" => self.ema = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "keep_prob" => self.keep_prob = num(key, value)?,
            "clip" => self.clip = num(key, value)?,
            _ => return Err(format!("unknown key {key:?} (known: {})", KEYS.join(", "))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Usage(format!("invalid training config: {msg}")));
        if self.hidden < 2 || !self.hidden.is_multiple_of(2) {
            return bad("hidden must be even and at least 2");
        }
        if self.embedding_dim == 0 || self.batch == 0 || self.eval_every == 0 {
            return bad("embedding_dim, batch and eval_every must be positive");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if !(self.lr > 0.0 && self.epsilon > 0.0 && self.clip > 0.0) {
            return bad("lr, epsilon and clip must be positive");
        }
        if !(0.0..1.0).contains(&self.rho) || !(0.0..1.0).contains(&self.ema) {
            return bad("rho and ema must lie in [0, 1)");
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return bad("keep_prob must lie in (0, 1]");
        }
        Ok(())
    }

    /// Canonical `key=value` text, one line per key in a fixed order.
    pub fn to_kv(&self) -> String {
        let values = [
            self.hidden.to_string(),
            self.embedding_dim.to_string(),
            self.num_classes.to_string(),
            self.batch.to_string(),
            self.lr.to_string(),
            self.rho.to_string(),
            self.epsilon.to_string(),
            self.ema.to_string(),
            self.patience.to_string(),
            self.eval_every.to_string(),
            self.max_steps.to_string(),
            self.seed.to_string(),
            self.keep_prob.to_string(),
            self.clip.to_string(),
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_kv().as_bytes()))
    }
}
