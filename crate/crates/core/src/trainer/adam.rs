use crate::error::{Error, Result};
use crate::models::ParamStore;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment buffers for every tensor of one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = |t: &crate::autodiff::Tensor<f32>| vec![0.0; t.numel()];
        AdamState {
            m: params.tensors().map(zeros).collect(),
            v: params.tensors().map(zeros).collect(),
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    /// Number of updates applied so far.
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, i: usize) -> (&[f64], &[f64]) {
        (&self.m[i], &self.v[i])
    }
}

/// One bias-corrected Adam update. A missing gradient counts as zero. Any
/// non-finite gradient aborts before a single value is touched.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Option<Vec<f32>>],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        if g.len() != params.get(i).numel() {
            return Err(Error::Shape(format!(
                "gradient for {} has {} values, parameter has {}",
                params.name(i),
                g.len(),
                params.get(i).numel()
            )));
        }
        if let Some(j) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {} in {}[{j}] at optimizer step {}",
                g[j],
                params.name(i),
                state.t + 1
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.tensors_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let g = grads[i].as_deref();
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            let gk = g.map_or(0.0, |g| g[k] as f64);
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let step = lr * (m[k] / c1) / ((v[k] / c2).sqrt() + state.eps);
            *w = (*w as f64 - step) as f32;
        }
    }
    Ok(())
}

/// Rescale all gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Option<Vec<f32>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|v| *v *= s));
    }
    norm
}
