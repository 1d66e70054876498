//! Parameter updates over named tensors.

use std::collections::{BTreeSet, HashMap};

use crate::autograd::Matrix;
use crate::error::{Error, Result};
use crate::model::Module;

/// Checks that every gradient names a trainable parameter of `model` with
/// matching size, and indexes them by name.
fn align<'g>(
    model: &dyn Module,
    prefix: &str,
    trainable: &BTreeSet<String>,
    grads: &'g [(String, Matrix)],
) -> Result<HashMap<&'g str, &'g Matrix>> {
    let mut sizes = HashMap::new();
    model.visit(prefix, &mut |n, t| {
        sizes.insert(n.to_string(), t.len());
    });
    let mut by_name = HashMap::with_capacity(grads.len());
    for (name, g) in grads {
        if !trainable.contains(name) {
            return Err(Error::Shape(format!("gradient for non-trainable parameter {name}")));
        }
        match sizes.get(name) {
            None => return Err(Error::Shape(format!("gradient for unknown parameter {name}"))),
            Some(&len) if len != g.data.len() => {
                return Err(Error::Shape(format!(
                    "gradient for {name} has {} entries, parameter has {len}",
                    g.data.len()
                )))
            }
            Some(_) => {}
        }
        if by_name.insert(name.as_str(), g).is_some() {
            return Err(Error::Shape(format!("duplicate gradient for {name}")));
        }
    }
    Ok(by_name)
}

/// Momentum buffers keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct SgdState {
    velocity: HashMap<String, Vec<f64>>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }
}

/// Classical momentum: `v ← μ·v + g; p ← p − lr·v`, applied to trainable
/// parameters of `model` only. A trainable parameter without a gradient is
/// treated as having a zero gradient.
pub fn sgd_step(
    model: &mut dyn Module,
    prefix: &str,
    trainable: &BTreeSet<String>,
    grads: &[(String, Matrix)],
    lr: f64,
    momentum: f64,
    state: &mut SgdState,
) -> Result<()> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::Domain(format!("learning rate must be positive, got {lr}")));
    }
    let by_name = align(model, prefix, trainable, grads)?;
    model.visit_mut(prefix, &mut |name, p| {
        if !trainable.contains(name) {
            return;
        }
        let v = state
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; p.len()]);
        let g = by_name.get(name);
        for (i, (pv, vv)) in p.data_mut().iter_mut().zip(v.iter_mut()).enumerate() {
            *vv = momentum * *vv + g.map_or(0.0, |g| g.data[i]);
            *pv = (f64::from(*pv) - lr * *vv) as f32;
        }
    });
    Ok(())
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates for bias-corrected Adam.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One Adam update on the trainable parameters of `model`.
pub fn adam_step(
    model: &mut dyn Module,
    prefix: &str,
    trainable: &BTreeSet<String>,
    grads: &[(String, Matrix)],
    lr: f64,
    state: &mut AdamState,
) -> Result<()> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::Domain(format!("learning rate must be positive, got {lr}")));
    }
    let by_name = align(model, prefix, trainable, grads)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    model.visit_mut(prefix, &mut |name, p| {
        let Some(g) = by_name.get(name) else {
            return;
        };
        let (m, v) = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
        for (i, pv) in p.data_mut().iter_mut().enumerate() {
            let gi = g.data[i];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let step = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            *pv = (f64::from(*pv) - step) as f32;
        }
    });
    Ok(())
}
