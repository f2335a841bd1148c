//! Adaptive-moment optimizer with bias correction.

use super::{Gradients, Tensor};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Optimizer state: learning rate, per-parameter moment accumulators and a
/// strictly increasing step counter.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub learning_rate: f32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl OptimState {
    pub fn new(learning_rate: f32) -> Result<Self> {
        if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {learning_rate}"
            )));
        }
        Ok(Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moment accumulators, for checkpointing.
    pub fn moments(&self) -> (&BTreeMap<String, Tensor>, &BTreeMap<String, Tensor>) {
        (&self.m, &self.v)
    }

    /// Rebuild state from checkpointed parts.
    pub fn from_parts(
        learning_rate: f32,
        step: u64,
        m: BTreeMap<String, Tensor>,
        v: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let mut state = Self::new(learning_rate)?;
        state.step = step;
        state.m = m;
        state.v = v;
        Ok(state)
    }

    /// One update over all parameters. Moment tensors are created lazily
    /// and always shape-match their parameter.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &Gradients,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Training(format!("no gradient for parameter {name}")))?;
            if g.shape() != p.shape() {
                return Err(Error::Training(format!(
                    "gradient shape {:?} does not match parameter {name} {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite gradient for parameter {name}"
                )));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let lr = self.learning_rate as f64;
            for ((pv, gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                let gd = *gv as f64;
                let md = self.beta1 * *mv as f64 + (1.0 - self.beta1) * gd;
                let vd = self.beta2 * *vv as f64 + (1.0 - self.beta2) * gd * gd;
                *mv = md as f32;
                *vv = vd as f32;
                let mhat = md / bc1;
                let vhat = vd / bc2;
                *pv = (*pv as f64 - lr * mhat / (vhat.sqrt() + self.eps)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn run_step(p: f32, g: f32, state: &mut OptimState) -> f32 {
        let mut params = BTreeMap::new();
        params.insert("p".to_string(), Tensor::scalar(p));
        // synthesize a gradient through a real graph so Gradients stays opaque
        let mut graph = Graph::new();
        let x = graph.param("p", &Tensor::scalar(p));
        let scaled = graph.mul_scalar(x, g);
        let loss = graph.sum(scaled);
        let grads = graph.backward(loss).unwrap();
        state.step(&mut params, &grads).unwrap();
        params["p"].item().unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut state = OptimState::new(1e-3).unwrap();
        let p = run_step(1.0, 0.0, &mut state);
        assert_eq!(p, 1.0);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn constant_gradient_update_approaches_learning_rate() {
        // with a constant gradient the bias-corrected update tends to
        // lr * sign(g)
        let lr = 1e-3f32;
        let mut state = OptimState::new(lr).unwrap();
        let mut p = 10.0f32;
        let mut last_delta = 0.0f32;
        for _ in 0..200 {
            let next = run_step(p, 2.5, &mut state);
            last_delta = p - next;
            p = next;
        }
        assert!((last_delta - lr).abs() < lr * 0.05, "delta {last_delta}");
    }

    #[test]
    fn nan_gradient_is_a_training_error() {
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Tensor::scalar(1.0));
        let mut graph = Graph::new();
        let x = graph.param("w", &Tensor::scalar(0.0));
        // 0 * inf produces NaN in the forward value; gradient is inf
        let y = graph.mul_scalar(x, f32::INFINITY);
        let loss = graph.sum(y);
        let grads = graph.backward(loss).unwrap();
        let mut state = OptimState::new(1e-3).unwrap();
        let err = state.step(&mut params, &grads).unwrap_err();
        assert!(err.to_string().contains("w"));
    }

    #[test]
    fn step_counter_strictly_increases() {
        let mut state = OptimState::new(1e-3).unwrap();
        for expect in 1..=3 {
            run_step(1.0, 1.0, &mut state);
            assert_eq!(state.step_count(), expect);
        }
    }
}
