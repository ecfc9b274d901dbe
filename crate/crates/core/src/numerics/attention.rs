//! Fused multi-head attention products that read queries, keys and values
//! straight out of the packed `[B, T, 3D]` projection, so no head split,
//! permutation or scaling copies are materialised.

use super::tensor::Tensor;
use super::Scalar;
use crate::error::{dim_err, Result};

/// Strided matrix view into a flat buffer.
#[derive(Debug, Clone, Copy)]
struct View {
    off: usize,
    rs: usize,
    cs: usize,
}

impl View {
    fn end(&self, rows: usize, cols: usize) -> usize {
        self.off + (rows - 1) * self.rs + (cols - 1) * self.cs + 1
    }
}

/// `c = alpha * a * b` (`a` is `m x k`, `b` is `k x n`), overwriting `c`.
#[allow(clippy::too_many_arguments)]
fn gemm_view<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: &[F],
    va: View,
    b: &[F],
    vb: View,
    c: &mut [F],
    vc: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k > 0 && va.end(m, k) <= a.len() && vb.end(k, n) <= b.len() && vc.end(m, n) <= c.len());
    // SAFETY: the assert bounds every element reachable through the views,
    // and `c` is a distinct exclusive borrow.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(va.off),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr().add(vb.off),
            vb.rs as isize,
            vb.cs as isize,
            F::zero(),
            c.as_mut_ptr().add(vc.off),
            vc.rs as isize,
            vc.cs as isize,
        );
    }
}

/// `(B, T, D, dh)` of a packed projection.
fn packed_dims(shape: &[usize], heads: usize) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 3 || !shape[2].is_multiple_of(3) || heads == 0 || !(shape[2] / 3).is_multiple_of(heads) {
        return dim_err(format!("packed qkv must be [B, T, 3*D] with D divisible by {heads} heads, got {shape:?}"));
    }
    let d = shape[2] / 3;
    Ok((shape[0], shape[1], d, d / heads))
}

impl<F: Scalar> Tensor<F> {
    /// Scaled attention logits `[B, H, T, T]` from a packed `[B, T, 3D]`
    /// projection laid out as `[q | k | v]`, heads contiguous within each part.
    pub fn attention_scores(&self, heads: usize, scale: f64) -> Result<Tensor<F>> {
        let (b, t, d, dh) = packed_dims(self.shape(), heads)?;
        let w = 3 * d;
        let alpha = F::from_f64(scale);
        let q_view = move |bi: usize, hi: usize| View { off: bi * t * w + hi * dh, rs: w, cs: 1 };
        let k_view = move |bi: usize, hi: usize| View { off: bi * t * w + d + hi * dh, rs: w, cs: 1 };
        let s_view = move |bi: usize, hi: usize| View { off: (bi * heads + hi) * t * t, rs: t, cs: 1 };
        let x = self.data();
        let mut out = vec![F::zero(); b * heads * t * t];
        for bi in 0..b {
            for hi in 0..heads {
                let kv = k_view(bi, hi);
                let kt = View { off: kv.off, rs: 1, cs: w };
                gemm_view(t, dh, t, alpha, &x, q_view(bi, hi), &x, kt, &mut out, s_view(bi, hi));
            }
        }
        drop(x);
        let n = self.numel();
        Ok(Tensor::from_op(out, vec![b, heads, t, t], &[self], move |args| {
            let x = args.inputs[0].data();
            let g = args.grad;
            let mut gx = vec![F::zero(); n];
            for bi in 0..b {
                for hi in 0..heads {
                    let sv = s_view(bi, hi);
                    let st = View { off: sv.off, rs: 1, cs: t };
                    // dQ = G K, dK = G^T Q
                    gemm_view(t, t, dh, alpha, g, sv, &x, k_view(bi, hi), &mut gx, q_view(bi, hi));
                    gemm_view(t, t, dh, alpha, g, st, &x, q_view(bi, hi), &mut gx, k_view(bi, hi));
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Attention output `[B, T, D]` of probabilities `[B, H, T, T]` applied to
    /// the value part of a packed `[B, T, 3D]` projection, heads concatenated.
    pub fn attention_context(&self, qkv: &Tensor<F>, heads: usize) -> Result<Tensor<F>> {
        let (b, t, d, dh) = packed_dims(qkv.shape(), heads)?;
        if self.shape() != [b, heads, t, t] {
            return dim_err(format!(
                "attention probabilities {:?} do not match packed qkv {:?} with {heads} heads",
                self.shape(),
                qkv.shape()
            ));
        }
        let w = 3 * d;
        let one = F::one();
        let v_view = move |bi: usize, hi: usize| View { off: bi * t * w + 2 * d + hi * dh, rs: w, cs: 1 };
        let p_view = move |bi: usize, hi: usize| View { off: (bi * heads + hi) * t * t, rs: t, cs: 1 };
        let c_view = move |bi: usize, hi: usize| View { off: bi * t * d + hi * dh, rs: d, cs: 1 };
        let p = self.data();
        let x = qkv.data();
        let mut out = vec![F::zero(); b * t * d];
        for bi in 0..b {
            for hi in 0..heads {
                gemm_view(t, t, dh, one, &p, p_view(bi, hi), &x, v_view(bi, hi), &mut out, c_view(bi, hi));
            }
        }
        drop(p);
        drop(x);
        let (np, nx) = (self.numel(), qkv.numel());
        Ok(Tensor::from_op(out, vec![b, t, d], &[self, qkv], move |args| {
            let p = args.inputs[0].data();
            let x = args.inputs[1].data();
            let g = args.grad;
            let gp = args.needs[0].then(|| {
                let mut gp = vec![F::zero(); np];
                for bi in 0..b {
                    for hi in 0..heads {
                        let vv = v_view(bi, hi);
                        let vt = View { off: vv.off, rs: 1, cs: w };
                        gemm_view(t, dh, t, one, g, c_view(bi, hi), &x, vt, &mut gp, p_view(bi, hi));
                    }
                }
                gp
            });
            let gx = args.needs[1].then(|| {
                let mut gx = vec![F::zero(); nx];
                for bi in 0..b {
                    for hi in 0..heads {
                        let pv = p_view(bi, hi);
                        let pt = View { off: pv.off, rs: 1, cs: t };
                        gemm_view(t, t, dh, one, &p, pt, g, c_view(bi, hi), &mut gx, v_view(bi, hi));
                    }
                }
                gx
            });
            vec![gp, gx]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Rng, DEFAULT_STEP};

    fn rand_t(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new((0..n).map(|_| rng.normal()).collect(), shape).unwrap()
    }

    /// Head split through narrow / reshape / permute.
    fn split(qkv: &Tensor<f64>, i: usize, heads: usize) -> Tensor<f64> {
        let s = qkv.shape();
        let (b, t, d) = (s[0], s[1], s[2] / 3);
        qkv.narrow(2, i * d, d).unwrap().reshape(&[b, t, heads, d / heads]).unwrap().permute(&[0, 2, 1, 3]).unwrap()
    }

    #[test]
    fn matches_unfused() {
        let mut rng = Rng::new(4);
        let (b, t, d, heads) = (2, 5, 6, 3);
        let qkv = rand_t(&mut rng, &[b, t, 3 * d]);
        let scores = qkv.attention_scores(heads, 0.3).unwrap();
        let kt = split(&qkv, 1, heads).transpose(2, 3).unwrap();
        let want = split(&qkv, 0, heads).matmul(&kt).unwrap().scale(0.3);
        assert_eq!(scores.shape(), want.shape());
        for (a, w) in scores.to_vec().iter().zip(want.to_vec()) {
            assert!((a - w).abs() < 1e-12);
        }
        let probs = scores.softmax(-1).unwrap();
        let ctx = probs.attention_context(&qkv, heads).unwrap();
        let want =
            probs.matmul(&split(&qkv, 2, heads)).unwrap().permute(&[0, 2, 1, 3]).unwrap().reshape(&[b, t, d]).unwrap();
        for (a, w) in ctx.to_vec().iter().zip(want.to_vec()) {
            assert!((a - w).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients() {
        let mut rng = Rng::new(8);
        let (b, t, d, heads) = (2, 3, 4, 2);
        let qkv = rand_t(&mut rng, &[b, t, 3 * d]);
        let probs = rand_t(&mut rng, &[b, heads, t, t]);
        let ps = rand_t(&mut rng, &[b, heads, t, t]);
        let pc = rand_t(&mut rng, &[b, t, d]);
        let e = grad_check(|x| x.attention_scores(heads, 0.7)?.mul(&ps).map(|y| y.sum()), &qkv, DEFAULT_STEP).unwrap();
        assert!(e < 1e-6, "scores {e}");
        let e =
            grad_check(|x| probs.attention_context(x, heads)?.mul(&pc).map(|y| y.sum()), &qkv, DEFAULT_STEP).unwrap();
        assert!(e < 1e-6, "context values {e}");
        let e =
            grad_check(|p| p.attention_context(&qkv, heads)?.mul(&pc).map(|y| y.sum()), &probs, DEFAULT_STEP).unwrap();
        assert!(e < 1e-6, "context probs {e}");
        let e = grad_check(
            |x| x.attention_scores(heads, 0.5)?.softmax(-1)?.attention_context(x, heads)?.mul(&pc).map(|y| y.sum()),
            &qkv,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(e < 1e-6, "composed {e}");
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::<f64>::zeros(&[1, 2, 8]);
        assert!(x.attention_scores(2, 1.0).is_err());
        let x = Tensor::<f64>::zeros(&[1, 2, 12]);
        assert!(Tensor::<f64>::zeros(&[1, 2, 2, 3]).attention_context(&x, 2).is_err());
    }
}
