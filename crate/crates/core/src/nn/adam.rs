//! Adam with bias correction and an exponential learning-rate schedule.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `lr(step) = lr_init * (lr_final / lr_init)^(step / total_steps)`, held at
/// `lr_final` past the end.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpDecay {
    pub lr_init: f64,
    pub lr_final: f64,
    pub total_steps: usize,
}

impl ExpDecay {
    pub fn constant(lr: f64) -> Self {
        Self {
            lr_init: lr,
            lr_final: lr,
            total_steps: 1,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 || self.lr_init <= 0.0 || self.lr_final <= 0.0 {
            return if step == 0 { self.lr_init } else { self.lr_final };
        }
        let t = (step as f64 / self.total_steps as f64).clamp(0.0, 1.0);
        (self.lr_init.ln() * (1.0 - t) + self.lr_final.ln() * t).exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// Moment buffers of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Tensor,
    pub v: Tensor,
}

impl AdamState {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            step: 0,
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
        }
    }
}

/// Adam over named parameters; moments are created lazily on first step.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub config: AdamConfig,
    states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            states: BTreeMap::new(),
        }
    }

    /// One bias-corrected update of `param` at learning rate `lr`.
    pub fn step(&mut self, path: &str, param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
        if grad.shape() != param.shape() {
            return Err(Error::dim(
                format!("gradient of `{path}`"),
                format!("{:?}", param.shape()),
                format!("{:?}", grad.shape()),
            ));
        }
        if !grad.all_finite() {
            return Err(Error::NonFiniteGradient { path: path.to_string() });
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        let state = self
            .states
            .entry(path.to_string())
            .or_insert_with(|| AdamState::zeros(param.shape()));
        if state.m.shape() != param.shape() {
            return Err(Error::Consistency(format!(
                "adam moments for `{path}` have shape {:?}, parameter has {:?}",
                state.m.shape(),
                param.shape()
            )));
        }
        state.step += 1;
        let bc1 = 1.0 - beta1.powi(state.step as i32);
        let bc2 = 1.0 - beta2.powi(state.step as i32);
        let m = state.m.data_mut();
        let v = state.v.data_mut();
        let p = param.data_mut();
        for i in 0..p.len() {
            let g = grad.data()[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }

    pub fn state(&self, path: &str) -> Option<&AdamState> {
        self.states.get(path)
    }

    pub fn set_state(&mut self, path: &str, state: AdamState) {
        self.states.insert(path.to_string(), state);
    }

    pub fn states(&self) -> impl Iterator<Item = (&str, &AdamState)> {
        self.states.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Rebuild the row-indexed moments of `path` after the parameter rows were
    /// rearranged: new row `i` takes old row `sources[i]`, or zeros for `None`.
    pub fn remap_rows(&mut self, path: &str, sources: &[Option<usize>]) {
        let Some(state) = self.states.get_mut(path) else {
            return;
        };
        let remap = |t: &Tensor| {
            let w = t.row_len();
            let mut data = Vec::with_capacity(sources.len() * w);
            for s in sources {
                match s {
                    Some(r) => data.extend_from_slice(t.row(*r)),
                    None => data.extend(std::iter::repeat_n(0.0, w)),
                }
            }
            let mut shape = t.shape().to_vec();
            shape[0] = sources.len();
            Tensor::new(shape, data).expect("consistent row width")
        };
        state.m = remap(&state.m);
        state.v = remap(&state.v);
    }
}
