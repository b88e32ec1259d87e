use std::collections::BTreeMap;

use crate::{Error, Result};

use super::tensor::Tensor;

/// Adaptive-moment optimizer settings. Weight decay is decoupled and
/// defaults to zero.
#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Per-parameter moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam/AdamW with state keyed by parameter name. Deterministic and
/// replayable: identical (params, grads, state) yield identical updates.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: AdamConfig,
    state: BTreeMap<String, AdamState>,
}

impl Optimizer {
    pub fn new(config: AdamConfig) -> Result<Self> {
        if config.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate must be positive, got {}", config.lr)));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(Optimizer { config, state: BTreeMap::new() })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn state(&self) -> &BTreeMap<String, AdamState> {
        &self.state
    }

    pub fn restore_state(&mut self, state: BTreeMap<String, AdamState>) {
        self.state = state;
    }

    /// One update over named parameters, reading each tensor's accumulated
    /// gradient. `lr_scale` applies the schedule multiplier for this step.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)], lr_scale: f64) -> Result<()> {
        for (name, tensor) in params.iter_mut() {
            let n = tensor.len();
            let grad = tensor
                .grad()
                .ok_or_else(|| Error::InvalidArgument(format!("parameter {name} has no grad")))?
                .to_vec();
            let st = self
                .state
                .entry(name.clone())
                .or_insert_with(|| AdamState { step: 0, m: vec![0.0; n], v: vec![0.0; n] });
            if st.m.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "moment buffer for {name} has length {}, parameter has {}",
                    st.m.len(),
                    n
                )));
            }
            st.step += 1;
            let t = st.step as f64;
            let c = &self.config;
            let bc1 = 1.0 - c.beta1.powf(t);
            let bc2 = 1.0 - c.beta2.powf(t);
            let lr = c.lr * lr_scale;
            let data = tensor.data_mut();
            for i in 0..n {
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * grad[i];
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                data[i] -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * data[i]);
            }
            tensor.assert_finite()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_positive_lr_rejected() {
        let cfg = AdamConfig { lr: 0.0, ..Default::default() };
        assert!(Optimizer::new(cfg).is_err());
    }

    #[test]
    fn zero_grad_fresh_state_leaves_params_unchanged() {
        let mut t = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap().with_grad();
        let mut opt = Optimizer::new(AdamConfig::default()).unwrap();
        opt.step(&mut [("w".into(), &mut t)], 1.0).unwrap();
        assert_eq!(t.data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // g = 1, fresh state: m_hat = g, v_hat = g^2, update = lr * 1 / (1 + eps)
        let mut t = Tensor::scalar(0.0).unwrap().with_grad();
        t.accumulate_grad(&[1.0]).unwrap();
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        let mut opt = Optimizer::new(cfg).unwrap();
        opt.step(&mut [("w".into(), &mut t)], 1.0).unwrap();
        let expect = -0.1 / (1.0 + 1e-8);
        assert!((t.data()[0] - expect).abs() < 1e-12, "{}", t.data()[0]);
    }

    #[test]
    fn replay_from_saved_state_is_deterministic() {
        let run = |seed_state: Option<BTreeMap<String, AdamState>>| {
            let mut t = Tensor::scalar(1.0).unwrap().with_grad();
            let mut opt = Optimizer::new(AdamConfig::default()).unwrap();
            if let Some(s) = seed_state {
                opt.restore_state(s);
            }
            for _ in 0..2 {
                t.zero_grad();
                t.accumulate_grad(&[0.3]).unwrap();
                opt.step(&mut [("w".into(), &mut t)], 1.0).unwrap();
            }
            (t.data()[0], opt.state().clone())
        };
        let (a, _) = run(None);
        let (b, _) = run(None);
        assert_eq!(a, b);
        // Resuming from a snapshot replays identically.
        let (_, snap) = run(None);
        let (c, _) = run(Some(snap.clone()));
        let (d, _) = run(Some(snap));
        assert_eq!(c, d);
    }
}
