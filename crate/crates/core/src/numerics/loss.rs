use super::{Scalar, Tensor};
use crate::error::{dim_err, Error, Result};

/// Floor applied to the reference distribution before taking its log.
pub const KL_FLOOR: f64 = 1e-12;

impl<F: Scalar> Tensor<F> {
    /// Mean over the batch of `-log softmax(logits)[label]`, logits `[B, C]`.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor<F>> {
        let s = self.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return dim_err(format!("cross_entropy needs [B, C] logits for {} labels, got {s:?}", labels.len()));
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} out of range for {c} classes")));
        }
        let x = self.data();
        let mut probs = vec![F::zero(); b * c];
        let mut total = 0.0f64;
        for (i, (row, pr)) in x.chunks_exact(c).zip(probs.chunks_exact_mut(c)).enumerate() {
            let mx = row.iter().fold(F::neg_infinity(), |a, &v| a.max(v));
            let mut z = F::zero();
            for (p, &v) in pr.iter_mut().zip(row) {
                *p = (v - mx).exp();
                z += *p;
            }
            pr.iter_mut().for_each(|p| *p /= z);
            let lse = mx + z.ln();
            total += (lse - row[labels[i]]).as_f64();
        }
        drop(x);
        let loss = F::from_f64(total / b.max(1) as f64);
        let labels = labels.to_vec();
        Ok(Tensor::from_op(vec![loss], vec![], &[self], move |args| {
            let scale = args.grad[0] / F::from_f64(b.max(1) as f64);
            let mut g = probs.clone();
            for (i, row) in g.chunks_exact_mut(c).enumerate() {
                row[labels[i]] -= F::one();
                row.iter_mut().for_each(|v| *v *= scale);
            }
            vec![Some(g)]
        }))
    }

    /// `KL(self || q)` for row distributions over the last axis, averaged
    /// across rows. `0 ln 0 = 0`; `q` is floored at [`KL_FLOOR`] before the
    /// log, and so is `p`, which makes identical inputs give exactly zero.
    pub fn kl_divergence(&self, q: &Tensor<F>) -> Result<Tensor<F>> {
        if self.shape() != q.shape() || self.rank() == 0 {
            return dim_err(format!("kl_divergence shapes differ: {:?} vs {:?}", self.shape(), q.shape()));
        }
        let n = *self.shape().last().unwrap();
        validate_rows(&self.data(), n, "p")?;
        validate_rows(&q.data(), n, "q")?;
        let floor = F::from_f64(KL_FLOOR);
        let rows = self.numel() / n.max(1);
        let p = self.data();
        let qd = q.data();
        let mut total = 0.0f64;
        for (&pv, &qv) in p.iter().zip(qd.iter()) {
            if pv > F::zero() {
                total += (pv * (pv.max(floor).ln() - qv.max(floor).ln())).as_f64();
            }
        }
        drop((p, qd));
        let value = F::from_f64(total / rows.max(1) as f64);
        Ok(Tensor::from_op(vec![value], vec![], &[self, q], move |args| {
            let scale = args.grad[0] / F::from_f64(rows.max(1) as f64);
            let p = args.inputs[0].data();
            let q = args.inputs[1].data();
            let gp = args.needs[0].then(|| {
                p.iter()
                    .zip(q.iter())
                    .map(|(&pv, &qv)| {
                        if pv > F::zero() {
                            let inner = if pv > floor { pv.ln() + F::one() } else { floor.ln() };
                            scale * (inner - qv.max(floor).ln())
                        } else {
                            F::zero()
                        }
                    })
                    .collect()
            });
            let gq = args.needs[1].then(|| {
                p.iter().zip(q.iter()).map(|(&pv, &qv)| if qv > floor { -scale * pv / qv } else { F::zero() }).collect()
            });
            vec![gp, gq]
        }))
    }
}

fn validate_rows<F: Scalar>(data: &[F], n: usize, which: &str) -> Result<()> {
    for (r, row) in data.chunks_exact(n).enumerate() {
        if row.iter().any(|&v| v < F::zero() || !v.is_finite()) {
            return Err(Error::Distribution(format!("{which} row {r} has a negative or non-finite entry")));
        }
        let s: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > F::DIST_EPS {
            return Err(Error::Distribution(format!("{which} row {r} sums to {s}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64], s: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(v, s).unwrap()
    }

    #[test]
    fn ce_confident_correct_is_near_zero() {
        let l = t(&[50.0, 0.0, 0.0], &[1, 3]).cross_entropy(&[0]).unwrap().item();
        assert!(l < 1e-15);
    }

    #[test]
    fn ce_uniform_is_ln_c() {
        let l = t(&[0.0; 10], &[1, 10]).cross_entropy(&[3]).unwrap().item();
        assert!((l - std::f64::consts::LN_10).abs() < 1e-12);
    }

    #[test]
    fn ce_averages_batch() {
        let a = t(&[1.0, 2.0], &[1, 2]).cross_entropy(&[0]).unwrap().item();
        let b = t(&[0.5, -1.0], &[1, 2]).cross_entropy(&[1]).unwrap().item();
        let both = t(&[1.0, 2.0, 0.5, -1.0], &[2, 2]).cross_entropy(&[0, 1]).unwrap().item();
        assert!((both - 0.5 * (a + b)).abs() < 1e-14);
    }

    #[test]
    fn ce_label_out_of_range() {
        let e = t(&[0.0, 0.0], &[1, 2]).cross_entropy(&[2]).unwrap_err();
        assert!(matches!(e, Error::Index(_)));
    }

    #[test]
    fn kl_identical_is_zero() {
        let p = t(&[0.3, 0.7], &[2]);
        assert_eq!(p.kl_divergence(&p.detach()).unwrap().item(), 0.0);
    }

    #[test]
    fn kl_closed_form() {
        let p = t(&[1.0, 0.0], &[2]);
        let q = t(&[0.5, 0.5], &[2]);
        assert!((p.kl_divergence(&q).unwrap().item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn kl_floor_keeps_it_finite() {
        let p = t(&[0.5, 0.5], &[2]);
        let q = t(&[1.0, 0.0], &[2]);
        let v = p.kl_divergence(&q).unwrap().item();
        assert!(v.is_finite() && v > 0.0);
        let pp = Tensor::<f64>::param(vec![0.5, 0.5], &[2]).unwrap();
        pp.kl_divergence(&q).unwrap().backward().unwrap();
        assert!(pp.grad().unwrap().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn kl_rejects_unnormalised() {
        let p = t(&[0.5, 0.6], &[2]);
        let q = t(&[0.5, 0.5], &[2]);
        assert!(matches!(p.kl_divergence(&q), Err(Error::Distribution(_))));
    }
}
