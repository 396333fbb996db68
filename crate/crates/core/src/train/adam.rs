use super::TrainConfig;
use crate::error::{shape_err, Error, Result};
use crate::network::Param;

/// First and second moment estimates per parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Param]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified when any gradient is
/// non-finite; the error names the offending parameter.
pub fn adam_step(params: &mut [Param], grads: &[Vec<f64>], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(shape_err!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if g.len() != p.value.numel() {
            return Err(shape_err!("gradient for `{}` has {} entries, expected {}", p.name, g.len(), p.value.numel()));
        }
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient for `{}` at entry {i}", p.name)));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((x, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *x -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}
