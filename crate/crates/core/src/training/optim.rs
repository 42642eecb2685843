use std::collections::BTreeMap;

use crate::model::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Gradient per parameter path.
pub type Gradients = BTreeMap<String, Tensor>;

/// AdaDelta accumulators `E[g²]` and `E[Δx²]` per parameter, created on
/// first use.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub rho: f64,
    pub epsilon: f64,
    /// Multiplier applied to each AdaDelta update.
    pub lr: f64,
    pub sq_grad: BTreeMap<String, Vec<f64>>,
    pub sq_delta: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(rho: f64, epsilon: f64, lr: f64) -> Self {
        Self {
            rho,
            epsilon,
            lr,
            sq_grad: BTreeMap::new(),
            sq_delta: BTreeMap::new(),
        }
    }
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self::new(0.95, 1e-6, 0.5)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// One AdaDelta update of every parameter that has a gradient.
pub fn adadelta_step(params: &mut ParamStore, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    for (path, g) in grads {
        let p = params
            .get(path)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {path}")))?;
        if p.shape() != g.shape() {
            return Err(mismatch("adadelta_step", p, g));
        }
    }
    let (rho, eps, lr) = (state.rho, state.epsilon, state.lr);
    for (path, g) in grads {
        let p = params.get_mut(path).expect("checked above");
        let n = g.numel();
        let eg = state.sq_grad.entry(path.clone()).or_insert_with(|| vec![0.0; n]);
        let ed = state.sq_delta.entry(path.clone()).or_insert_with(|| vec![0.0; n]);
        for (((w, &gi), eg), ed) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(eg.iter_mut())
            .zip(ed.iter_mut())
        {
            *eg = rho * *eg + (1.0 - rho) * gi * gi;
            let delta = -((*ed + eps).sqrt() / (*eg + eps).sqrt()) * gi;
            *ed = rho * *ed + (1.0 - rho) * delta * delta;
            *w += lr * delta;
        }
    }
    Ok(())
}

/// `shadow ← decay·shadow + (1−decay)·params` over every path.
pub fn ema_update(shadow: &mut ParamStore, params: &ParamStore, decay: f64) -> Result<()> {
    if shadow.len() != params.len() {
        return Err(Error::Contract(format!(
            "shadow holds {} parameters, model {}",
            shadow.len(),
            params.len()
        )));
    }
    for ((sp, s), (pp, p)) in shadow.iter_mut().zip(params.iter()) {
        if sp != pp {
            return Err(Error::Contract(format!("shadow path {sp} does not match {pp}")));
        }
        if s.shape() != p.shape() {
            return Err(mismatch("ema_update", s, p));
        }
        for (sv, &pv) in s.data_mut().iter_mut().zip(p.data()) {
            *sv = decay * *sv + (1.0 - decay) * pv;
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(w));
        p
    }

    fn grad(g: f64) -> Gradients {
        let mut m = Gradients::new();
        m.insert("w".into(), Tensor::scalar(g));
        m
    }

    #[test]
    fn first_step_hand_value() {
        let mut p = scalar_store(0.0);
        let mut st = OptimizerState::default();
        adadelta_step(&mut p, &grad(1.0), &mut st).unwrap();
        let expected = -0.5 * (1e-6f64).sqrt() / (0.05f64 + 1e-6).sqrt();
        let w = p.get("w").unwrap().data()[0];
        assert!((w - expected).abs() < 1e-15);
        assert!((w + 0.002236).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = scalar_store(2.0);
        let mut st = OptimizerState::default();
        adadelta_step(&mut p, &grad(1.0), &mut st).unwrap();
        let w = p.get("w").unwrap().data()[0];
        let (eg, ed) = (st.sq_grad["w"][0], st.sq_delta["w"][0]);
        adadelta_step(&mut p, &grad(0.0), &mut st).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], w);
        assert_eq!(st.sq_grad["w"][0], 0.95 * eg);
        assert_eq!(st.sq_delta["w"][0], 0.95 * ed);
    }

    #[test]
    fn quadratic_converges() {
        let mut p = scalar_store(5.0);
        let mut st = OptimizerState::default();
        let mut steps = 0;
        while p.get("w").unwrap().data()[0].abs() >= 0.05 {
            let w = p.get("w").unwrap().data()[0];
            adadelta_step(&mut p, &grad(2.0 * w), &mut st).unwrap();
            steps += 1;
            assert!(steps <= 10_000, "no convergence");
        }
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut p = scalar_store(0.0);
        let mut g = Gradients::new();
        g.insert("w".into(), Tensor::zeros(&[2]));
        assert!(adadelta_step(&mut p, &g, &mut OptimizerState::default()).is_err());
        let mut shadow = scalar_store(0.0);
        let mut other = ParamStore::new();
        other.insert("w", Tensor::zeros(&[2]));
        assert!(ema_update(&mut shadow, &other, 0.999).is_err());
    }

    #[test]
    fn ema_examples() {
        let mut s = scalar_store(0.0);
        ema_update(&mut s, &scalar_store(1.0), 0.999).unwrap();
        assert!((s.get("w").unwrap().data()[0] - 0.001).abs() < 1e-15);

        let mut s = scalar_store(3.0);
        for _ in 0..100 {
            ema_update(&mut s, &scalar_store(3.0), 0.999).unwrap();
        }
        assert_eq!(s.get("w").unwrap().data()[0], 3.0);
    }

    #[test]
    fn clip_scales_to_bound() {
        let mut g = grad(3.0);
        g.insert("v".into(), Tensor::scalar(4.0));
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g["w"].data()[0] - 0.6).abs() < 1e-12);
        let mut small = grad(0.1);
        clip_global_norm(&mut small, 5.0);
        assert_eq!(small["w"].data()[0], 0.1);
    }
}
