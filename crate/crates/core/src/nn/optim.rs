use super::params::ParamStore;
use crate::error::{Error, Result};

/// Adam moment buffers, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(ps: &ParamStore) -> Self {
        let zeros = || ps.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update using the gradients stored in `ps`.
pub fn adam_step(ps: &mut ParamStore, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if state.m.len() != ps.len() {
        return Err(Error::dim(format!(
            "optimizer tracks {} tensors, store has {}",
            state.m.len(),
            ps.len()
        )));
    }
    for id in ps.ids() {
        let t = ps.get(id);
        if let Some(g) = t.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in {}",
                    ps.name(id)
                )));
            }
        }
        if state.m[id.0].len() != t.len() {
            return Err(Error::dim(format!("moment buffer shape for {}", ps.name(id))));
        }
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for id in ps.ids() {
        let t = ps.get_mut(id);
        let Some(g) = t.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        for (j, p) in t.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *p -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(ps: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = ps
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flatten()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for id in ps.ids().collect::<Vec<_>>() {
            ps.get_mut(id).grad_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Linear warm-up to `peak_lr` over `warmup_steps`, then `peak_lr·sqrt(warmup/step)`.
pub fn warmup_lr(step: u64, peak_lr: f64, warmup_steps: u64) -> f64 {
    let step = step.max(1) as f64;
    let warm = warmup_steps.max(1) as f64;
    if step <= warm {
        peak_lr * step / warm
    } else {
        peak_lr * (warm / step).sqrt()
    }
}
