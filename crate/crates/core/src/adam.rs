//! Adam with bias correction.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_mismatch, Result};
use crate::params::Parameterized;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moment buffers are created lazily on the first step; afterwards their
    /// shapes are fixed.
    fn ensure_moments(&mut self, lens: &[usize]) -> Result<()> {
        if self.first.is_empty() && self.step == 0 {
            self.first = lens.iter().map(|&n| vec![0.0; n]).collect();
            self.second = self.first.clone();
            return Ok(());
        }
        let have: Vec<usize> = self.first.iter().map(Vec::len).collect();
        if have != lens {
            return Err(shape_mismatch(have, lens));
        }
        Ok(())
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(params: &mut [&mut [f32]], grads: &[&[f32]], state: &mut AdamState) -> Result<()> {
    let plens: Vec<usize> = params.iter().map(|p| p.len()).collect();
    let glens: Vec<usize> = grads.iter().map(|g| g.len()).collect();
    if plens != glens {
        return Err(shape_mismatch(plens, glens));
    }
    state.ensure_moments(&plens)?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1 as f64, state.beta2 as f64);
    let c1 = 1.0 - libm::pow(b1, t as f64);
    let c2 = 1.0 - libm::pow(b2, t as f64);
    let (lr, eps) = (state.lr as f64, state.eps as f64);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        for j in 0..p.len() {
            let gj = g[j] as f64;
            let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = lr * (mj / c1) / (libm::sqrt(vj / c2) + eps);
            p[j] = (p[j] as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Adam update of every parameter of `model` using the model-shaped `grads`.
pub fn adam_step_model<M: Parameterized>(model: &mut M, grads: &M, state: &mut AdamState) -> Result<()> {
    let g: Vec<&[f32]> = grads.params("").into_iter().map(|p| p.data).collect();
    let mut p: Vec<&mut [f32]> = model.params_mut("").into_iter().map(|p| p.data).collect();
    adam_step(&mut p, &g, state)
}
