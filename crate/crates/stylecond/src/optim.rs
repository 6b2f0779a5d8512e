//! Bias-corrected Adam keyed by tensor name. The model, the conditioner,
//! and inversion vectors all expose name/tensor walkers, so one optimizer
//! covers them; per-name moment buffers live in a BTreeMap to keep
//! iteration order (and therefore arithmetic) deterministic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{TensorView, TensorViewMut};
use crate::numerics::Real;

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
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState<R: Real> {
    pub config: AdamConfig,
    /// Number of optimizer steps taken; drives bias correction.
    pub steps: u64,
    /// First and second moment buffers per tensor name.
    pub moments: BTreeMap<String, (Vec<R>, Vec<R>)>,
}

impl<R: Real> AdamState<R> {
    pub fn new(config: AdamConfig) -> AdamState<R> {
        AdamState {
            config,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Advances the shared step counter. Call exactly once per optimizer
    /// step, before updating any tensor, so every tensor sees the same
    /// bias correction.
    pub fn begin_step(&mut self) {
        self.steps += 1;
    }

    /// Applies one Adam update to a single named tensor. Moment buffers are
    /// created on first sight and must keep their shape afterwards.
    pub fn update_tensor(
        &mut self,
        name: &str,
        lr: R,
        param: &mut TensorViewMut<'_, R>,
        grad: &TensorView<'_, R>,
    ) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::parameter("begin_step must run before updates"));
        }
        if param.len() != grad.len() {
            return Err(Error::Incompatible(format!(
                "tensor {name}: parameter has {} elements, gradient {}",
                param.len(),
                grad.len()
            )));
        }
        // Corrections in f64: beta^t underflows gracefully and the result
        // is identical on every platform.
        let t = self.steps.min(i32::MAX as u64) as i32;
        let c1 = R::from_f64(1.0 / (1.0 - self.config.beta1.powi(t)));
        let c2 = R::from_f64(1.0 / (1.0 - self.config.beta2.powi(t)));
        let b1 = R::from_f64(self.config.beta1);
        let b2 = R::from_f64(self.config.beta2);
        let one = R::one();
        let eps = R::from_f64(self.config.eps);

        let n = param.len();
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![R::zero(); n], vec![R::zero(); n]));
        if m.len() != n {
            return Err(Error::Incompatible(format!(
                "tensor {name}: moment buffer has {} elements, parameter {n}",
                m.len()
            )));
        }
        for (((p, &g), m_i), v_i) in param
            .iter_mut()
            .zip(grad.iter())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m_i = b1 * *m_i + (one - b1) * g;
            *v_i = b2 * *v_i + (one - b2) * g * g;
            let m_hat = *m_i * c1;
            let v_hat = *v_i * c2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Snapshots a tensor walker into a name -> flat-values map.
pub fn collect_tensors<R: Real>(
    walk: impl FnOnce(&mut dyn FnMut(String, TensorView<'_, R>)),
) -> BTreeMap<String, Vec<R>> {
    let mut out = BTreeMap::new();
    walk(&mut |name, view| {
        out.insert(name, view.iter().copied().collect());
    });
    out
}

/// Updates every tensor the walker yields from the matching gradient map.
/// Every walked tensor must have a gradient and vice versa; a mismatch
/// means the caller paired the wrong structures.
pub fn apply_step<R: Real>(
    state: &mut AdamState<R>,
    lr: R,
    grads: &BTreeMap<String, Vec<R>>,
    walk_mut: impl FnOnce(&mut dyn FnMut(String, TensorViewMut<'_, R>)),
) -> Result<()> {
    let mut visited = 0usize;
    let mut failure: Option<Error> = None;
    walk_mut(&mut |name, mut view| {
        if failure.is_some() {
            return;
        }
        match grads.get(&name) {
            Some(g) => {
                visited += 1;
                let g1 = ndarray::ArrayView1::from(g.as_slice());
                let owned = g1.to_owned();
                let gv = TensorView::D1(&owned);
                if let Err(e) = state.update_tensor(&name, lr, &mut view, &gv) {
                    failure = Some(e);
                }
            }
            None => {
                failure = Some(Error::Incompatible(format!(
                    "no gradient for tensor {name}"
                )));
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if visited != grads.len() {
        return Err(Error::Incompatible(format!(
            "{} gradients provided but {visited} tensors updated",
            grads.len()
        )));
    }
    Ok(())
}

/// Linear warmup into a flat schedule: ramps from lr/warmup to lr over the
/// first `warmup` steps, constant afterwards. `step` counts from zero.
pub fn warmup_lr(base_lr: f64, warmup: u64, step: u64) -> f64 {
    if warmup == 0 || step + 1 >= warmup {
        base_lr
    } else {
        base_lr * (step + 1) as f64 / warmup as f64
    }
}
