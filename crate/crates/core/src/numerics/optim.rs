use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{dim_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// One decoupled-weight-decay Adam update of a single parameter buffer.
/// `step` is the 1-based step count used for bias correction.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<F: Scalar>(
    param: &mut [F],
    grad: &[F],
    m: &mut [F],
    v: &mut [F],
    step: u64,
    lr: f64,
    cfg: &AdamWConfig,
    weight_decay: f64,
) -> Result<()> {
    let n = param.len();
    if grad.len() != n || m.len() != n || v.len() != n {
        return dim_err(format!(
            "adamw buffers disagree: param {n}, grad {}, m {}, v {}",
            grad.len(),
            m.len(),
            v.len()
        ));
    }
    let b1 = F::from_f64(cfg.beta1);
    let b2 = F::from_f64(cfg.beta2);
    let c1 = F::from_f64(1.0 - cfg.beta1.powi(step as i32));
    let c2 = F::from_f64(1.0 - cfg.beta2.powi(step as i32));
    let lr_f = F::from_f64(lr);
    let eps = F::from_f64(cfg.eps);
    let decay = F::from_f64(1.0 - lr * weight_decay);
    let one = F::one();
    for i in 0..n {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        param[i] = param[i] * decay - lr_f * mh / (vh.sqrt() + eps);
    }
    Ok(())
}

/// AdamW over a fixed list of parameters. Parameters flagged `decay = false`
/// (biases, norms, embeddings) skip weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<F: Scalar> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(config: AdamWConfig, sizes: &[usize]) -> Self {
        AdamW {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
        }
    }

    pub fn step(&mut self, params: &[(&Tensor<F>, bool)], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return dim_err(format!("optimizer tracks {} parameters, got {}", self.m.len(), params.len()));
        }
        self.step += 1;
        for (i, (p, decay)) in params.iter().enumerate() {
            let wd = if *decay { self.config.weight_decay } else { 0.0 };
            let grad = p.grad_ref();
            let zeros;
            let g: &[F] = match grad.as_ref() {
                Some(g) => g,
                None => {
                    zeros = vec![F::zero(); p.numel()];
                    &zeros
                }
            };
            let mut data = p.data_mut();
            adamw_update(&mut data, g, &mut self.m[i], &mut self.v[i], self.step, lr, &self.config, wd)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(wd: f64) -> AdamWConfig {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: wd }
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = vec![1.5f64, -2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, &cfg(0.0), 0.0).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![1.0f64];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adamw_update(&mut p, &[1.0], &mut m, &mut v, 1, 0.1, &cfg(0.0), 0.0).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-7, "{}", p[0]);
    }

    #[test]
    fn decoupled_decay() {
        let mut p = vec![1.0f64];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adamw_update(&mut p, &[0.0], &mut m, &mut v, 1, 0.1, &cfg(0.1), 0.1).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![1.0f64; 2];
        let (mut m, mut v) = (vec![0.0; 1], vec![0.0; 2]);
        assert!(adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, &cfg(0.0), 0.0).is_err());
    }
}
