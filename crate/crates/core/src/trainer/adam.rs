use candle_core::{backprop::GradStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoders::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// First and second moment estimates for one peer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub steps: u64,
    pub moments: Vec<Moments>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let moments = params
            .names()
            .iter()
            .zip(params.vars())
            .map(|(name, var)| Moments {
                name: name.clone(),
                m: vec![0.0; var.elem_count()],
                v: vec![0.0; var.elem_count()],
            })
            .collect();
        Self { steps: 0, moments }
    }

    pub(crate) fn check_matches(&self, params: &ParamStore) -> Result<()> {
        let ok = self.moments.len() == params.len()
            && self
                .moments
                .iter()
                .zip(params.names().iter().zip(params.vars()))
                .all(|(m, (n, v))| &m.name == n && m.m.len() == v.elem_count() && m.v.len() == v.elem_count());
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("optimizer state does not match the model".into()))
        }
    }
}

/// Dense gradients per parameter, zero where the graph did not reach.
pub(crate) fn collect_grads(params: &ParamStore, grads: &GradStore) -> Result<Vec<Vec<f64>>> {
    params
        .vars()
        .iter()
        .map(|var| match grads.get(var.as_tensor()) {
            Some(g) => Ok(g.flatten_all()?.to_vec1::<f64>()?),
            None => Ok(vec![0.0; var.elem_count()]),
        })
        .collect()
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub(crate) fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= s);
    }
    norm
}

pub(crate) fn adam_update(
    params: &ParamStore,
    state: &mut AdamState,
    grads: &[Vec<f64>],
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    state.steps += 1;
    let t = state.steps as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((var, mom), g) in params.vars().iter().zip(&mut state.moments).zip(grads) {
        let mut w = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        for i in 0..w.len() {
            let gi = g[i] + cfg.weight_decay * w[i];
            mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * gi;
            mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = mom.m[i] / bc1;
            let v_hat = mom.v[i] / bc2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        var.set(&Tensor::from_vec(w, var.shape(), var.device())?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![vec![3.0, 0.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        let n: f64 = g.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        let mut g = vec![vec![0.3]];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g, vec![vec![0.3]]);
    }
}
