use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoundParams, ParameterStore};
use crate::tape::Gradients;
use crate::tensor::{Real, Tensor};

/// Gradients keyed by parameter name, in store order.
pub type ParamGrads<T> = IndexMap<String, Tensor<T>>;

/// Extracts one gradient per bound parameter.
pub fn param_grads<T: Real>(bound: &BoundParams<'_, T>, grads: &Gradients<T>) -> Result<ParamGrads<T>> {
    bound
        .iter()
        .map(|(name, var)| {
            let g = grads.get(var).ok_or_else(|| Error::MissingGradient(name.to_owned()))?;
            Ok((name.to_owned(), g.clone()))
        })
        .collect()
}

/// Global L2 norm over all gradients.
pub fn grad_norm<T: Real>(grads: &ParamGrads<T>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`.
pub fn clip_grad_norm<T: Real>(grads: &mut ParamGrads<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let k = T::of(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, plus the update count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T: Real = f32> {
    pub step: u64,
    pub m: ParameterStore<T>,
    pub v: ParameterStore<T>,
}

impl<T: Real> OptimState<T> {
    /// Zero moments shaped like `params`.
    pub fn new(params: &ParameterStore<T>) -> Result<Self> {
        let mut m = ParameterStore::new();
        for (name, t) in params.iter() {
            m.insert(name, Tensor::zeros(t.shape())?)?;
        }
        Ok(OptimState {
            step: 0,
            v: m.clone(),
            m,
        })
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step<T: Real>(
    params: &mut ParameterStore<T>,
    grads: &ParamGrads<T>,
    state: &mut OptimState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for name in params.names() {
        let g = grads.get(name).ok_or_else(|| Error::MissingGradient(name.to_owned()))?;
        let p = params.require(name)?;
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!(
                "gradient of `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m = state.m.get_mut(name).ok_or_else(|| Error::MissingGradient(name.to_owned()))?;
        let m = m.data_mut();
        let v = state.v.get_mut(name).ok_or_else(|| Error::MissingGradient(name.to_owned()))?.data_mut();
        for (i, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gv = gv.as_f64();
            let mi = b1 * m[i].as_f64() + (1.0 - b1) * gv;
            let vi = b2 * v[i].as_f64() + (1.0 - b2) * gv * gv;
            m[i] = T::of(mi);
            v[i] = T::of(vi);
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            *pv = T::of(pv.as_f64() - update);
        }
    }
    Ok(())
}

/// Linear decay from `lr_start` at epoch 0 to `lr_end` at the last epoch.
pub fn lr_schedule(epoch: usize, total_epochs: usize, lr_start: f64, lr_end: f64) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(Error::Config(format!("epoch {epoch} outside 0..{total_epochs}")));
    }
    if epoch == 0 || total_epochs == 1 {
        return Ok(lr_start);
    }
    if epoch == total_epochs - 1 {
        return Ok(lr_end);
    }
    let t = epoch as f64 / (total_epochs - 1) as f64;
    Ok(lr_start * (1.0 - t) + lr_end * t)
}
