use super::Tensor;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// Adam with the standard moment decay rates and bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    state: AdamState,
}

impl Adam {
    pub fn new(lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config("lr", format!("must be positive, got {lr}")));
        }
        Ok(Self {
            lr,
            state: AdamState::default(),
        })
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    /// Applies one update using each parameter's `grad` buffer.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        adam_step(params, &mut self.state, self.lr)
    }
}

pub fn adam_step(params: &mut [&mut Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
    {
        return Err(Error::Model("optimizer state does not match parameters".into()));
    }
    for (i, p) in params.iter().enumerate() {
        let g = p
            .grad()
            .ok_or_else(|| Error::Model(format!("parameter {i} has no gradient")))?;
        if let Some(j) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "gradient".into(),
                location: format!("parameter {i}, element {j}"),
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = p.grad().expect("checked above").to_vec();
        for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
            *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}
