//! Central-difference verification of reverse-mode gradients.

use super::tensor::no_grad;
use super::{Scalar, Tensor};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Largest per-coordinate relative error between the reverse-mode gradient
/// of scalar `f` at `x` and its central difference with step `h`.
pub fn grad_check<F: Scalar>(f: impl Fn(&Tensor<F>) -> Result<Tensor<F>>, x: &Tensor<F>, h: f64) -> Result<f64> {
    let leaf = Tensor::param(x.to_vec(), x.shape())?;
    f(&leaf)?.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![F::zero(); leaf.numel()]);
    let base = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let eval = |delta: f64| -> Result<f64> {
            let mut v = base.clone();
            v[i] = F::from_f64(v[i].as_f64() + delta);
            let t = Tensor::new(v, x.shape())?;
            no_grad(|| f(&t)).map(|l| l.item().as_f64())
        };
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        worst = worst.max(rel_err(analytic[i].as_f64(), numeric));
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub max_rel_err: f64,
    /// `(parameter index, coordinate)` of the worst coordinate.
    pub worst_at: (usize, usize),
    pub checked: usize,
}

/// Gradient check of a closure over model parameters, perturbing the
/// selected `(parameter, coordinate)` pairs in place and restoring them.
pub fn grad_check_params<F: Scalar>(
    loss: impl Fn() -> Result<Tensor<F>>,
    params: &[Tensor<F>],
    coords: &[(usize, usize)],
    h: f64,
) -> Result<ParamCheck> {
    params.iter().for_each(|p| p.zero_grad());
    loss()?.backward()?;
    let grads: Vec<Vec<F>> = params.iter().map(|p| p.grad().unwrap_or_else(|| vec![F::zero(); p.numel()])).collect();
    let mut report = ParamCheck { max_rel_err: 0.0, worst_at: (0, 0), checked: 0 };
    for &(pi, ci) in coords {
        let p = &params[pi];
        let orig = p.data()[ci];
        let eval = |delta: f64| -> Result<f64> {
            p.data_mut()[ci] = F::from_f64(orig.as_f64() + delta);
            let v = no_grad(&loss).map(|l| l.item().as_f64());
            p.data_mut()[ci] = orig;
            v
        };
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        let e = rel_err(grads[pi][ci].as_f64(), numeric);
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst_at = (pi, ci);
        }
        report.checked += 1;
    }
    params.iter().for_each(|p| p.zero_grad());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn rand_t(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new((0..n).map(|_| rng.normal()).collect(), shape).unwrap()
    }

    #[test]
    fn sum_is_exact() {
        let x = Tensor::<f64>::from_f64(&[0.3, -1.0, 2.0], &[3]).unwrap();
        let e = grad_check(|t| Ok(t.sum()), &x, DEFAULT_STEP).unwrap();
        assert!(e < 1e-9, "{e}");
    }

    #[test]
    fn ce_of_softmax_logits() {
        let mut rng = Rng::new(11);
        let x = rand_t(&mut rng, &[3, 4]);
        let e = grad_check(|t| t.cross_entropy(&[0, 3, 1]), &x, DEFAULT_STEP).unwrap();
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn primitives() {
        let mut rng = Rng::new(5);
        let w = rand_t(&mut rng, &[4, 3]);
        let bias = rand_t(&mut rng, &[3]);
        let g = rand_t(&mut rng, &[4]);
        let b = rand_t(&mut rng, &[4]);
        let x = rand_t(&mut rng, &[2, 2, 4]);
        let probe = rand_t(&mut rng, &[2, 2, 3]);
        let tol = 1e-6;

        #[allow(clippy::type_complexity)]
        let checks: Vec<(&str, Box<dyn Fn(&Tensor<f64>) -> Result<Tensor<f64>>>)> = vec![
            ("matmul", Box::new(|t: &Tensor<f64>| t.matmul(&w)?.mul(&probe).map(|y| y.sum()))),
            ("linear", Box::new(|t: &Tensor<f64>| t.linear(&w, &bias)?.mul(&probe).map(|y| y.sum()))),
            ("add_bias", Box::new(|t: &Tensor<f64>| t.matmul(&w)?.add(&bias)?.square().mean_axis(1).map(|y| y.sum()))),
            ("softmax", Box::new(|t: &Tensor<f64>| t.softmax(-1)?.matmul(&w)?.mul(&probe).map(|y| y.sum()))),
            ("softmax_axis1", Box::new(|t: &Tensor<f64>| t.softmax(1)?.matmul(&w)?.mul(&probe).map(|y| y.sum()))),
            (
                "layer_norm",
                Box::new(|t: &Tensor<f64>| t.layer_norm(&g, &b, 1e-6)?.matmul(&w)?.mul(&probe).map(|y| y.sum())),
            ),
            ("gelu", Box::new(|t: &Tensor<f64>| t.gelu().matmul(&w)?.mul(&probe).map(|y| y.sum()))),
            ("exp", Box::new(|t: &Tensor<f64>| Ok(t.scale(0.3).exp().sum()))),
            ("permute", Box::new(|t: &Tensor<f64>| t.permute(&[1, 0, 2])?.matmul(&w)?.mul(&probe).map(|y| y.sum()))),
            ("narrow", Box::new(|t: &Tensor<f64>| Ok(t.narrow(2, 1, 2)?.square().sum()))),
            ("sum_axis", Box::new(|t: &Tensor<f64>| Ok(t.sum_axis(0)?.square().sum()))),
            (
                "reshape",
                Box::new(|t: &Tensor<f64>| t.reshape(&[4, 4])?.matmul(&w.reshape(&[4, 3])?).map(|y| y.square().sum())),
            ),
            ("sub", Box::new(|t: &Tensor<f64>| Ok(t.sub(&x.detach())?.square().sum()))),
            ("self_mul", Box::new(|t: &Tensor<f64>| Ok(t.mul(t)?.sum()))),
            ("index_select", Box::new(|t: &Tensor<f64>| Ok(t.index_select0(&[1, 0, 1])?.square().sum()))),
            ("concat", Box::new(|t: &Tensor<f64>| Ok(Tensor::concat0(&[t.clone(), t.scale(2.0)])?.square().sum()))),
            ("gather", Box::new(|t: &Tensor<f64>| Ok(t.gather_tokens(&[(1, vec![1]), (0, vec![0])])?.square().sum()))),
            ("prepend", Box::new(|t: &Tensor<f64>| Ok(t.prepend_token(&g)?.square().sum()))),
        ];
        for (name, f) in &checks {
            let e = grad_check(f, &x, DEFAULT_STEP).unwrap();
            assert!(e < tol, "{name}: {e}");
        }
        let e = grad_check(|t| x.linear(t, &bias)?.mul(&probe).map(|y| y.sum()), &w, DEFAULT_STEP).unwrap();
        assert!(e < tol, "linear weight: {e}");
        let e = grad_check(|t| Ok(x.linear(&w, t)?.square().sum()), &bias, DEFAULT_STEP).unwrap();
        assert!(e < tol, "linear bias: {e}");
    }

    #[test]
    fn attention_primitives() {
        let mut rng = Rng::new(9);
        let s = rand_t(&mut rng, &[2, 2, 3, 3]);
        let probe = rand_t(&mut rng, &[2, 2, 3, 3]);
        let keep = [true, false, true, true, true, false];
        let f = |t: &Tensor<f64>| {
            t.attention_mask_fill(&keep, -65000.0)?.softmax(-1)?.zero_pruned_rows(&keep)?.mul(&probe).map(|y| y.sum())
        };
        let e = grad_check(f, &s, DEFAULT_STEP).unwrap();
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn kl_both_sides() {
        let mut rng = Rng::new(2);
        let lp = rand_t(&mut rng, &[2, 5]);
        let q = rand_t(&mut rng, &[2, 5]).softmax(-1).unwrap();
        let e = grad_check(|t| t.softmax(-1)?.kl_divergence(&q), &lp, DEFAULT_STEP).unwrap();
        assert!(e < 1e-6, "{e}");
        let p = rand_t(&mut rng, &[2, 5]).softmax(-1).unwrap();
        let e = grad_check(|t| p.kl_divergence(&t.softmax(-1)?), &lp, DEFAULT_STEP).unwrap();
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn batched_matmul_both_operands() {
        let mut rng = Rng::new(4);
        let a = rand_t(&mut rng, &[2, 3, 3, 4]);
        let b = rand_t(&mut rng, &[2, 3, 4, 2]);
        let e = grad_check(|t| Ok(t.matmul(&b)?.square().sum()), &a, DEFAULT_STEP).unwrap();
        assert!(e < 1e-6, "{e}");
        let e = grad_check(|t| Ok(a.matmul(t)?.square().sum()), &b, DEFAULT_STEP).unwrap();
        assert!(e < 1e-6, "{e}");
        let w = rand_t(&mut rng, &[4, 2]);
        let e = grad_check(|t| Ok(a.matmul(t)?.square().sum()), &w, DEFAULT_STEP).unwrap();
        assert!(e < 1e-6, "{e}");
    }
}
