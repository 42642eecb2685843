//! Losses, AdaDelta, weight averaging and the early-stopping training loop.

mod config;
mod optim;
mod trainer;

pub use config::TrainConfig;
pub use optim::{adadelta_step, clip_global_norm, ema_update, Gradients, OptimizerState};
pub use trainer::{
    dev_metric, fit_stats, instance_loss_value, loss_and_gradients, train, DevMetric, FitStats, LogRow, TrainLog,
    TrainOutcome,
};

use rand::seq::SliceRandom;

use crate::rng;
use crate::{Error, Result};

const LOG_FLOOR: f64 = 1e-12;

/// `−ln max(ỹ[label], 1e-12)`.
pub fn classification_loss(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs
        .get(label)
        .ok_or_else(|| Error::Domain(format!("label {label} out of range for {} classes", probs.len())))?;
    Ok(-p.max(LOG_FLOOR).ln())
}

/// `−ln p_start[i] − ln p_end[j]` for the gold span `(i, j)`, `i ≤ j`.
pub fn span_loss(p_start: &[f64], p_end: &[f64], gold: (usize, usize)) -> Result<f64> {
    let (i, j) = gold;
    if i > j || i >= p_start.len() || j >= p_end.len() {
        return Err(Error::Domain(format!(
            "gold span ({i}, {j}) invalid for {} positions",
            p_start.len()
        )));
    }
    Ok(classification_loss(p_start, i)? + classification_loss(p_end, j)?)
}

/// `⌈fraction·n⌉` items without replacement. Smaller fractions yield
/// prefixes of larger ones under the same seed.
pub fn subsample<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Result<Vec<T>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Usage(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng::stream(seed, "subsample"));
    // guard against products like 0.1·30 = 3.0000000000000004
    let k = ((fraction * items.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    Ok(order[..k.min(items.len())].iter().map(|&i| items[i].clone()).collect())
}
