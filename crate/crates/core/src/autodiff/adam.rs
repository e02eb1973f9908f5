use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.learning_rate > 0.0;
        if !ok {
            return Err(Error::invalid(format!("invalid Adam hyper-parameters {self:?}")));
        }
        Ok(())
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            step: 0,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            config,
        })
    }
}

/// One bias-corrected Adam update of `params` in place.
///
/// `block` only labels the diagnostic when `grads` holds a NaN or infinity;
/// in that case nothing is modified.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, block: &str) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Shape {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            block: block.to_string(),
        });
    }
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}

/// Adam over an ordered list of named parameter blocks.
#[derive(Clone, Debug)]
pub struct Adam {
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(block_lens: &[usize], config: AdamConfig) -> Result<Self> {
        let states = block_lens
            .iter()
            .map(|&n| AdamState::new(n, config))
            .collect::<Result<_>>()?;
        Ok(Self { states })
    }

    /// Update every block. All gradients are checked before any block moves.
    pub fn step<S: AsRef<str>>(&mut self, blocks: &mut [(S, &mut Tensor)], grads: &[Tensor]) -> Result<()> {
        if blocks.len() != self.states.len() || grads.len() != blocks.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} blocks, got {} blocks and {} gradients",
                self.states.len(),
                blocks.len(),
                grads.len()
            )));
        }
        for ((name, _), g) in blocks.iter().zip(grads) {
            if g.has_non_finite() {
                return Err(Error::NonFiniteGradient {
                    block: name.as_ref().to_string(),
                });
            }
        }
        for (((name, param), g), state) in blocks.iter_mut().zip(grads).zip(&mut self.states) {
            adam_step(param.data_mut(), g.data(), state, name.as_ref())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut p = vec![0.3, -1.2];
        let mut s = AdamState::new(2, AdamConfig::default()).unwrap();
        adam_step(&mut p, &[0.0, 0.0], &mut s, "w").unwrap();
        assert_eq!(p, vec![0.3, -1.2]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = 1, v_hat = 1 after bias correction, so the step is
        // lr * 1 / (1 + eps).
        let mut p = vec![0.0];
        let mut s = AdamState::new(1, AdamConfig::with_learning_rate(0.001)).unwrap();
        adam_step(&mut p, &[1.0], &mut s, "w").unwrap();
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15, "{}", p[0]);
    }

    #[test]
    fn identical_blocks_get_identical_updates() {
        let mut a = vec![0.5, 0.1, -0.2];
        let mut b = a.clone();
        let g = [0.3, -0.7, 1e-3];
        let mut sa = AdamState::new(3, AdamConfig::default()).unwrap();
        let mut sb = sa.clone();
        for _ in 0..5 {
            adam_step(&mut a, &g, &mut sa, "a").unwrap();
            adam_step(&mut b, &g, &mut sb, "b").unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn nan_gradient_names_the_block() {
        let mut w = Tensor::zeros(&[2]);
        let mut bias = Tensor::zeros(&[1]);
        let mut opt = Adam::new(&[2, 1], AdamConfig::default()).unwrap();
        let grads = vec![Tensor::zeros(&[2]), Tensor::vector(vec![f64::NAN])];
        let err = opt
            .step(&mut [("layer0.weight", &mut w), ("layer0.bias", &mut bias)], &grads)
            .unwrap_err();
        assert!(err.to_string().contains("layer0.bias"), "{err}");
        assert_eq!(w.data(), &[0.0, 0.0]);
    }

    #[test]
    fn invalid_hyper_parameters_rejected() {
        let cfg = AdamConfig {
            beta1: 1.0,
            ..AdamConfig::default()
        };
        assert!(AdamState::new(1, cfg).is_err());
    }
}
