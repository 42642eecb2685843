use std::collections::HashMap;

use rand::Rng;

use super::{is_trainable, ParamStore};
use crate::rng::StreamRng;
use crate::tensor::{Tape, Tensor, Var};
use crate::Result;

/// One forward pass: a fresh tape plus lazily bound parameter leaves.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: HashMap<&'p str, Var>,
    track_grads: bool,
    dropout: Option<(f64, StreamRng)>,
}

impl<'p> Graph<'p> {
    /// No gradients, no dropout.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self::build(params, false, None)
    }

    /// Trainable parameters become gradient leaves. `dropout` is
    /// `(keep_prob, rng)`; pass `None` for a deterministic pass.
    pub fn training(params: &'p ParamStore, dropout: Option<(f64, StreamRng)>) -> Self {
        let dropout = dropout.filter(|(keep, _)| *keep < 1.0);
        Self::build(params, true, dropout)
    }

    fn build(params: &'p ParamStore, track_grads: bool, dropout: Option<(f64, StreamRng)>) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: HashMap::new(),
            track_grads,
            dropout,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// Tape leaf for the parameter at `path`, created on first use.
    pub fn param(&mut self, path: &str) -> Var {
        if let Some(&v) = self.bound.get(path) {
            return v;
        }
        let (key, value) = self
            .params
            .entries
            .get_key_value(path)
            .unwrap_or_else(|| panic!("missing parameter {path}"));
        let key = key.as_str();
        let grad = self.track_grads && is_trainable(key);
        let v = self.tape.leaf(value.clone(), grad);
        self.bound.insert(key, v);
        v
    }

    /// Parameters that were used in this pass and carry gradients.
    pub fn bound_trainable(&self) -> Vec<(&'p str, Var)> {
        let mut out: Vec<_> = self
            .bound
            .iter()
            .filter(|(k, _)| self.track_grads && is_trainable(k))
            .map(|(k, v)| (*k, *v))
            .collect();
        out.sort_by(|a, b| a.0.cmp(b.0));
        out
    }

    /// Inverted dropout; identity when dropout is off.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((keep, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = *keep;
        let shape = self.tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.tape.constant(Tensor::new(shape, mask)?);
        self.tape.mul(x, m)
    }
}
