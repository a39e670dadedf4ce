use crate::error::{Error, Result};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;
pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moment estimates and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

pub fn adam_step(weights: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if weights.len() != grads.len() || state.m.len() != weights.len() || state.v.len() != weights.len() {
        return Err(Error::Config("Adam state does not match the weight count".into()));
    }
    state.step += 1;
    let c1 = 1.0 - BETA1.powi(state.step as i32);
    let c2 = 1.0 - BETA2.powi(state.step as i32);
    for i in 0..weights.len() {
        let g = grads[i];
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        weights[i] -= lr * mh / (vh.sqrt() + EPSILON);
    }
    Ok(())
}
