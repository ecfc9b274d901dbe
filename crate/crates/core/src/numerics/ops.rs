//! Differentiable tensor operations.

use super::tensor::{check_shape, Tensor};
use super::Scalar;
use crate::error::{dim_err, Error, Result};

// ---------------------------------------------------------------------------
// GEMM helper
// ---------------------------------------------------------------------------

/// `c (+)= op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
/// A transposed operand is stored row-major with the transposed extents.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    a_t: bool,
    b: &[F],
    b_t: bool,
    c: &mut [F],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = F::zero());
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: the asserts above bound every access implied by the strides.
    unsafe {
        F::gemm_raw(m, k, n, F::one(), a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

fn strip_leading_ones(shape: &[usize]) -> &[usize] {
    let first = shape.iter().position(|&d| d != 1).unwrap_or(shape.len());
    &shape[first..]
}

/// `rhs` broadcasts into `lhs` when its shape (ignoring leading unit
/// extents) equals the trailing extents of `lhs`.
fn suffix_broadcast(lhs: &[usize], rhs: &[usize]) -> Option<usize> {
    let r = strip_leading_ones(rhs);
    if r.len() > lhs.len() || lhs[lhs.len() - r.len()..] != *r {
        return None;
    }
    Some(r.iter().product())
}

fn reduce_suffix<F: Scalar>(g: &[F], chunk: usize) -> Vec<F> {
    let mut acc = vec![F::zero(); chunk];
    for c in g.chunks_exact(chunk) {
        acc.iter_mut().zip(c).for_each(|(a, &v)| *a += v);
    }
    acc
}

fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn resolve_axis(rank: usize, axis: isize) -> Result<usize> {
    let a = if axis < 0 { rank as isize + axis } else { axis };
    if a < 0 || a as usize >= rank {
        return Err(Error::Dimension(format!("axis {axis} out of range for rank {rank}")));
    }
    Ok(a as usize)
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<F: Scalar>(data: &[F], shape: &[usize], perm: &[usize]) -> Vec<F> {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = contiguous_strides(shape);
    let mut out = Vec::with_capacity(data.len());
    if rank == 0 || data.is_empty() {
        return data.to_vec();
    }
    // Keep the innermost extent contiguous when it does not move.
    let (chunk, outer_rank) = if perm[rank - 1] == rank - 1 { (shape[rank - 1], rank - 1) } else { (1, rank) };
    let mut idx = vec![0usize; outer_rank];
    let total_outer: usize = out_shape[..outer_rank].iter().product();
    for _ in 0..total_outer {
        let off: usize = (0..outer_rank).map(|i| idx[i] * in_strides[perm[i]]).sum();
        out.extend_from_slice(&data[off..off + chunk]);
        for i in (0..outer_rank).rev() {
            idx[i] += 1;
            if idx[i] < out_shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    out
}

impl<F: Scalar> Tensor<F> {
    // -----------------------------------------------------------------------
    // Elementwise arithmetic
    // -----------------------------------------------------------------------

    /// Elementwise sum. `rhs` may broadcast over the leading extents of
    /// `self` (bias vectors, positional tables).
    pub fn add(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        let Some(chunk) = suffix_broadcast(self.shape(), rhs.shape()) else {
            return dim_err(format!("cannot add shapes {:?} and {:?}", self.shape(), rhs.shape()));
        };
        let a = self.data();
        let b = rhs.data();
        let mut out = a.clone();
        if chunk > 0 {
            for c in out.chunks_exact_mut(chunk) {
                c.iter_mut().zip(b.iter()).for_each(|(x, &y)| *x += y);
            }
        }
        let same = chunk == a.len();
        Ok(Tensor::from_op(out, self.shape().to_vec(), &[self, rhs], move |args| {
            let ga = args.needs[0].then(|| args.grad.to_vec());
            let gb = args.needs[1].then(|| if same { args.grad.to_vec() } else { reduce_suffix(args.grad, chunk) });
            vec![ga, gb]
        }))
    }

    pub fn sub(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        if self.shape() != rhs.shape() {
            return dim_err(format!("cannot subtract shapes {:?} and {:?}", self.shape(), rhs.shape()));
        }
        let out: Vec<F> = self.data().iter().zip(rhs.data().iter()).map(|(&a, &b)| a - b).collect();
        Ok(Tensor::from_op(out, self.shape().to_vec(), &[self, rhs], |args| {
            vec![
                args.needs[0].then(|| args.grad.to_vec()),
                args.needs[1].then(|| args.grad.iter().map(|&g| -g).collect()),
            ]
        }))
    }

    /// Elementwise product; `rhs` may broadcast like in [`Tensor::add`].
    pub fn mul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        let Some(chunk) = suffix_broadcast(self.shape(), rhs.shape()) else {
            return dim_err(format!("cannot multiply shapes {:?} and {:?}", self.shape(), rhs.shape()));
        };
        let mut out = self.to_vec();
        {
            let b = rhs.data();
            if chunk > 0 {
                for c in out.chunks_exact_mut(chunk) {
                    c.iter_mut().zip(b.iter()).for_each(|(x, &y)| *x *= y);
                }
            }
        }
        Ok(Tensor::from_op(out, self.shape().to_vec(), &[self, rhs], move |args| {
            let a = args.inputs[0].data();
            let b = args.inputs[1].data();
            let ga = args.needs[0].then(|| {
                let mut g = args.grad.to_vec();
                for c in g.chunks_exact_mut(chunk) {
                    c.iter_mut().zip(b.iter()).for_each(|(x, &y)| *x *= y);
                }
                g
            });
            let gb = args.needs[1].then(|| {
                let mut acc = vec![F::zero(); chunk];
                for (gc, ac) in args.grad.chunks_exact(chunk).zip(a.chunks_exact(chunk)) {
                    for ((s, &g), &x) in acc.iter_mut().zip(gc).zip(ac) {
                        *s += g * x;
                    }
                }
                acc
            });
            vec![ga, gb]
        }))
    }

    pub fn scale(&self, s: f64) -> Tensor<F> {
        let s = F::from_f64(s);
        let out: Vec<F> = self.data().iter().map(|&v| v * s).collect();
        Tensor::from_op(out, self.shape().to_vec(), &[self], move |args| {
            vec![Some(args.grad.iter().map(|&g| g * s).collect())]
        })
    }

    pub fn square(&self) -> Tensor<F> {
        let out: Vec<F> = self.data().iter().map(|&v| v * v).collect();
        Tensor::from_op(out, self.shape().to_vec(), &[self], |args| {
            let x = args.inputs[0].data();
            let two = F::from_f64(2.0);
            vec![Some(args.grad.iter().zip(x.iter()).map(|(&g, &v)| two * v * g).collect())]
        })
    }

    pub fn exp(&self) -> Tensor<F> {
        let out: Vec<F> = self.data().iter().map(|&v| v.exp_v()).collect();
        Tensor::from_op(out, self.shape().to_vec(), &[self], |args| {
            vec![Some(args.grad.iter().zip(args.out).map(|(&g, &y)| g * y).collect())]
        })
    }

    /// GELU, tanh form: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&self) -> Tensor<F> {
        let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let a = F::from_f64(0.044_715);
        let half = F::from_f64(0.5);
        let one = F::one();
        let out: Vec<F> = self.data().iter().map(|&x| half * x * (one + (c * (x + a * x * x * x)).tanh_v())).collect();
        Tensor::from_op(out, self.shape().to_vec(), &[self], move |args| {
            let x = args.inputs[0].data();
            let three_a = F::from_f64(3.0 * 0.044_715);
            let g = args
                .grad
                .iter()
                .zip(x.iter())
                .map(|(&g, &x)| {
                    let t = (c * (x + a * x * x * x)).tanh_v();
                    let dt = (one - t * t) * c * (one + three_a * x * x);
                    g * (half * (one + t) + half * x * dt)
                })
                .collect();
            vec![Some(g)]
        })
    }

    // -----------------------------------------------------------------------
    // Reductions
    // -----------------------------------------------------------------------

    pub fn sum(&self) -> Tensor<F> {
        let s: F = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(vec![s], vec![], &[self], move |args| vec![Some(vec![args.grad[0]; n])])
    }

    pub fn mean(&self) -> Tensor<F> {
        let n = self.numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&self, axis: isize) -> Result<Tensor<F>> {
        let axis = resolve_axis(self.rank(), axis)?;
        let (outer, n, inner) = split3(self.shape(), axis);
        let x = self.data();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for j in 0..n {
                let src = &x[(o * n + j) * inner..(o * n + j + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_op(out, shape, &[self], move |args| {
            let mut g = vec![F::zero(); outer * n * inner];
            for o in 0..outer {
                let src = &args.grad[o * inner..(o + 1) * inner];
                for j in 0..n {
                    g[(o * n + j) * inner..(o * n + j + 1) * inner].copy_from_slice(src);
                }
            }
            vec![Some(g)]
        }))
    }

    pub fn mean_axis(&self, axis: isize) -> Result<Tensor<F>> {
        let a = resolve_axis(self.rank(), axis)?;
        let n = self.shape()[a].max(1);
        Ok(self.sum_axis(axis)?.scale(1.0 / n as f64))
    }

    // -----------------------------------------------------------------------
    // Layout
    // -----------------------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<F>> {
        check_shape(shape, self.numel())?;
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), &[self], |args| vec![Some(args.grad.to_vec())]))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<F>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return dim_err(format!("invalid permutation {perm:?} for shape {:?}", self.shape()));
        }
        let shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(&self.data(), &shape, perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let os = out_shape.clone();
        Ok(Tensor::from_op(out, out_shape, &[self], move |args| vec![Some(permute_data(args.grad, &os, &inverse))]))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<F>> {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        if a >= perm.len() || b >= perm.len() {
            return dim_err(format!("transpose({a},{b}) on shape {:?}", self.shape()));
        }
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: isize, start: usize, len: usize) -> Result<Tensor<F>> {
        let axis = resolve_axis(self.rank(), axis)?;
        let (outer, n, inner) = split3(self.shape(), axis);
        if start + len > n {
            return dim_err(format!(
                "narrow [{start}, {}) exceeds extent {n} of shape {:?}",
                start + len,
                self.shape()
            ));
        }
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(out, shape, &[self], move |args| {
            let mut g = vec![F::zero(); outer * n * inner];
            for o in 0..outer {
                let base = (o * n + start) * inner;
                g[base..base + len * inner].copy_from_slice(&args.grad[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(g)]
        }))
    }

    /// Concatenate along axis 0.
    pub fn concat0(parts: &[Tensor<F>]) -> Result<Tensor<F>> {
        let Some(first) = parts.first() else {
            return dim_err("concat of zero tensors");
        };
        let tail = &first.shape()[1..];
        let mut rows = 0;
        for p in parts {
            if p.rank() == 0 || &p.shape()[1..] != tail {
                return dim_err(format!("concat shapes {:?} and {:?} disagree past axis 0", first.shape(), p.shape()));
            }
            rows += p.shape()[0];
        }
        let mut out = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let d = p.data();
            out.extend_from_slice(&d);
            sizes.push(d.len());
        }
        let mut shape = first.shape().to_vec();
        shape[0] = rows;
        let refs: Vec<&Tensor<F>> = parts.iter().collect();
        Ok(Tensor::from_op(out, shape, &refs, move |args| {
            let mut off = 0;
            sizes
                .iter()
                .zip(args.needs)
                .map(|(&s, &need)| {
                    let g = need.then(|| args.grad[off..off + s].to_vec());
                    off += s;
                    g
                })
                .collect()
        }))
    }

    /// Rows `idx[i]` of axis 0, in order. Indices may repeat.
    pub fn index_select0(&self, idx: &[usize]) -> Result<Tensor<F>> {
        if self.rank() == 0 {
            return dim_err("index_select0 on a scalar");
        }
        let rows = self.shape()[0];
        let inner = self.numel() / rows.max(1);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("row {bad} out of range for {rows} rows")));
        }
        let x = self.data();
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            out.extend_from_slice(&x[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = idx.len();
        let idx = idx.to_vec();
        Ok(Tensor::from_op(out, shape, &[self], move |args| {
            let mut g = vec![F::zero(); rows * inner];
            for (k, &i) in idx.iter().enumerate() {
                let src = &args.grad[k * inner..(k + 1) * inner];
                g[i * inner..(i + 1) * inner].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
            vec![Some(g)]
        }))
    }

    // -----------------------------------------------------------------------
    // Linear algebra
    // -----------------------------------------------------------------------

    /// Batched matrix product `[.., M, K] x [.., K, P] -> [.., M, P]`.
    /// Batch extents must match or be 1 on one side.
    pub fn matmul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return dim_err(format!("matmul needs rank >= 2, got {sa:?} x {sb:?}"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, p) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return dim_err(format!("matmul inner extents differ: {sa:?} x {sb:?}"));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let plan = BatchPlan::new(ba, bb)
            .ok_or_else(|| Error::Dimension(format!("matmul batch extents do not broadcast: {sa:?} x {sb:?}")))?;
        let mut shape = plan.out_batch.clone();
        shape.extend([m, p]);
        check_shape(&shape, plan.pairs.len() * m * p)?;

        let a = self.data();
        let b = rhs.data();
        let mut out = vec![F::zero(); plan.pairs.len() * m * p];
        if plan.rhs_shared && plan.lhs_identity {
            // Fold the batch into the row dimension: one large GEMM.
            let rows = plan.pairs.len() * m;
            gemm(rows, k, p, &a, false, &b, false, &mut out, false);
        } else {
            for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
                gemm(
                    m,
                    k,
                    p,
                    &a[ia * m * k..(ia + 1) * m * k],
                    false,
                    &b[ib * k * p..(ib + 1) * k * p],
                    false,
                    &mut out[o * m * p..(o + 1) * m * p],
                    false,
                );
            }
        }
        drop(a);
        drop(b);
        let (na, nb) = (self.numel(), rhs.numel());
        Ok(Tensor::from_op(out, shape, &[self, rhs], move |args| {
            let a = args.inputs[0].data();
            let b = args.inputs[1].data();
            let g = args.grad;
            let mut ga = args.needs[0].then(|| vec![F::zero(); na]);
            let mut gb = args.needs[1].then(|| vec![F::zero(); nb]);
            if plan.rhs_shared && plan.lhs_identity {
                let rows = plan.pairs.len() * m;
                if let Some(ga) = ga.as_mut() {
                    gemm(rows, p, k, g, false, &b, true, ga, false);
                }
                if let Some(gb) = gb.as_mut() {
                    gemm(k, rows, p, &a, true, g, false, gb, false);
                }
            } else {
                for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
                    let go = &g[o * m * p..(o + 1) * m * p];
                    if let Some(ga) = ga.as_mut() {
                        gemm(
                            m,
                            p,
                            k,
                            go,
                            false,
                            &b[ib * k * p..(ib + 1) * k * p],
                            true,
                            &mut ga[ia * m * k..(ia + 1) * m * k],
                            true,
                        );
                    }
                    if let Some(gb) = gb.as_mut() {
                        gemm(
                            k,
                            m,
                            p,
                            &a[ia * m * k..(ia + 1) * m * k],
                            true,
                            go,
                            false,
                            &mut gb[ib * k * p..(ib + 1) * k * p],
                            true,
                        );
                    }
                }
            }
            vec![ga, gb]
        }))
    }

    /// Affine map `x W + b` over the last axis: `x [.., in]`, `W [in, out]`,
    /// `b [out]`.
    pub fn linear(&self, weight: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
        let (sx, sw) = (self.shape(), weight.shape());
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] || bias.shape() != [sw[1]] {
            return dim_err(format!("linear needs x [.., k], W [k, n], b [n]; got {sx:?}, {sw:?}, {:?}", bias.shape()));
        }
        let (k, n) = (sw[0], sw[1]);
        let rows = self.numel() / k;
        let mut out = Vec::with_capacity(rows * n);
        {
            let b = bias.data();
            for _ in 0..rows {
                out.extend_from_slice(&b);
            }
        }
        gemm(rows, k, n, &self.data(), false, &weight.data(), false, &mut out, true);
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(Tensor::from_op(out, shape, &[self, weight, bias], move |args| {
            let g = args.grad;
            let gx = args.needs[0].then(|| {
                let mut gx = vec![F::zero(); rows * k];
                gemm(rows, n, k, g, false, &args.inputs[1].data(), true, &mut gx, false);
                gx
            });
            let gw = args.needs[1].then(|| {
                let mut gw = vec![F::zero(); k * n];
                gemm(k, rows, n, &args.inputs[0].data(), true, g, false, &mut gw, false);
                gw
            });
            let gb = args.needs[2].then(|| reduce_suffix(g, n));
            vec![gx, gw, gb]
        }))
    }

    // -----------------------------------------------------------------------
    // Normalisation
    // -----------------------------------------------------------------------

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&self, axis: isize) -> Result<Tensor<F>> {
        let axis = resolve_axis(self.rank(), axis)?;
        let (outer, n, inner) = split3(self.shape(), axis);
        let x = self.data();
        let mut out = vec![F::zero(); x.len()];
        if inner == 1 {
            for (xr, yr) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
                softmax_row(xr, yr);
            }
        } else {
            let mut buf_x = vec![F::zero(); n];
            let mut buf_y = vec![F::zero(); n];
            for o in 0..outer {
                for i in 0..inner {
                    for j in 0..n {
                        buf_x[j] = x[(o * n + j) * inner + i];
                    }
                    softmax_row(&buf_x, &mut buf_y);
                    for j in 0..n {
                        out[(o * n + j) * inner + i] = buf_y[j];
                    }
                }
            }
        }
        Ok(Tensor::from_op(out, self.shape().to_vec(), &[self], move |args| {
            let y = args.out;
            let g = args.grad;
            let mut dx = vec![F::zero(); y.len()];
            if inner == 1 {
                for ((yr, gr), dr) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(dx.chunks_exact_mut(n)) {
                    let dot = lane_dot(yr, gr);
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
            } else {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: F = (0..n).map(|j| y[at(j)] * g[at(j)]).sum();
                        for j in 0..n {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Tensor<F>, beta: &Tensor<F>, eps: f64) -> Result<Tensor<F>> {
        let d = *self.shape().last().ok_or_else(|| Error::Dimension("layer_norm on scalar".into()))?;
        if gamma.numel() != d || beta.numel() != d {
            return dim_err(format!(
                "layer_norm affine shapes {:?}/{:?} do not match last extent {d}",
                gamma.shape(),
                beta.shape()
            ));
        }
        let x = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let rows = x.len() / d.max(1);
        let eps = F::from_f64(eps);
        let inv_d = F::from_f64(1.0 / d as f64);
        let mut out = vec![F::zero(); x.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for (xr, yr) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mean = xr.iter().copied().sum::<F>() * inv_d;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rstd = F::one() / (var + eps).sqrt();
            for (((y, &v), &g), &b) in yr.iter_mut().zip(xr).zip(gm.iter()).zip(bt.iter()) {
                *y = (v - mean) * rstd * g + b;
            }
            means.push(mean);
            rstds.push(rstd);
        }
        drop((x, gm, bt));
        Ok(Tensor::from_op(out, self.shape().to_vec(), &[self, gamma, beta], move |args| {
            let x = args.inputs[0].data();
            let gm = args.inputs[1].data();
            let mut dx = args.needs[0].then(|| vec![F::zero(); x.len()]);
            let mut dg = vec![F::zero(); d];
            let mut db = vec![F::zero(); d];
            let mut gh = vec![F::zero(); d];
            for (r, (xr, gr)) in x.chunks_exact(d).zip(args.grad.chunks_exact(d)).enumerate() {
                let (mean, rstd) = (means[r], rstds[r]);
                let mut sum_gh = F::zero();
                let mut sum_ghx = F::zero();
                for j in 0..d {
                    let xh = (xr[j] - mean) * rstd;
                    dg[j] += gr[j] * xh;
                    db[j] += gr[j];
                    gh[j] = gr[j] * gm[j];
                    sum_gh += gh[j];
                    sum_ghx += gh[j] * xh;
                }
                if let Some(dx) = dx.as_mut() {
                    let (mg, mgx) = (sum_gh * inv_d, sum_ghx * inv_d);
                    let dr = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        let xh = (xr[j] - mean) * rstd;
                        dr[j] = rstd * (gh[j] - mg - xh * mgx);
                    }
                }
            }
            vec![dx, args.needs[1].then_some(dg), args.needs[2].then_some(db)]
        }))
    }

    // -----------------------------------------------------------------------
    // Attention helpers
    // -----------------------------------------------------------------------

    /// On scores `[B, H, T, T]`, replaces every entry whose query row or key
    /// column belongs to a pruned token with `sentinel`. `keep` is `B x T`.
    pub fn attention_mask_fill(&self, keep: &[bool], sentinel: f64) -> Result<Tensor<F>> {
        let (b, h, t) = attention_dims(self.shape(), keep.len())?;
        let fill = F::from_f64(sentinel);
        let mut out = self.to_vec();
        for bi in 0..b {
            let kb = &keep[bi * t..(bi + 1) * t];
            if kb.iter().all(|&k| k) {
                continue;
            }
            for hi in 0..h {
                let base = (bi * h + hi) * t * t;
                for m in 0..t {
                    let row = &mut out[base + m * t..base + (m + 1) * t];
                    if !kb[m] {
                        row.iter_mut().for_each(|v| *v = fill);
                    } else {
                        for (v, &k) in row.iter_mut().zip(kb) {
                            if !k {
                                *v = fill;
                            }
                        }
                    }
                }
            }
        }
        let keep = keep.to_vec();
        Ok(Tensor::from_op(out, self.shape().to_vec(), &[self], move |args| {
            let mut g = args.grad.to_vec();
            for bi in 0..b {
                let kb = &keep[bi * t..(bi + 1) * t];
                for hi in 0..h {
                    let base = (bi * h + hi) * t * t;
                    for m in 0..t {
                        for n in 0..t {
                            if !(kb[m] && kb[n]) {
                                g[base + m * t + n] = F::zero();
                            }
                        }
                    }
                }
            }
            vec![Some(g)]
        }))
    }

    /// On probabilities `[B, H, T, T]`, zeroes the query rows of pruned tokens.
    pub fn zero_pruned_rows(&self, keep: &[bool]) -> Result<Tensor<F>> {
        let (b, h, t) = attention_dims(self.shape(), keep.len())?;
        let zero_rows = |v: &mut [F]| {
            for bi in 0..b {
                for hi in 0..h {
                    for m in 0..t {
                        if !keep[bi * t + m] {
                            let base = ((bi * h + hi) * t + m) * t;
                            v[base..base + t].iter_mut().for_each(|x| *x = F::zero());
                        }
                    }
                }
            }
        };
        let mut out = self.to_vec();
        zero_rows(&mut out);
        let keep = keep.to_vec();
        Ok(Tensor::from_op(out, self.shape().to_vec(), &[self], move |args| {
            let mut g = args.grad.to_vec();
            for bi in 0..b {
                for hi in 0..h {
                    for m in 0..t {
                        if !keep[bi * t + m] {
                            let base = ((bi * h + hi) * t + m) * t;
                            g[base..base + t].iter_mut().for_each(|x| *x = F::zero());
                        }
                    }
                }
            }
            vec![Some(g)]
        }))
    }

    /// `[B, N, D]` with a `[D]` token prepended to every sample -> `[B, N+1, D]`.
    pub fn prepend_token(&self, token: &Tensor<F>) -> Result<Tensor<F>> {
        let s = self.shape();
        if s.len() != 3 || token.numel() != s[2] {
            return dim_err(format!("prepend_token needs [B,N,D] and [D], got {s:?} and {:?}", token.shape()));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let x = self.data();
        let tok = token.data();
        let mut out = Vec::with_capacity(b * (n + 1) * d);
        for bi in 0..b {
            out.extend_from_slice(&tok);
            out.extend_from_slice(&x[bi * n * d..(bi + 1) * n * d]);
        }
        drop((x, tok));
        Ok(Tensor::from_op(out, vec![b, n + 1, d], &[self, token], move |args| {
            let g = args.grad;
            let gx = args.needs[0].then(|| {
                let mut v = Vec::with_capacity(b * n * d);
                for bi in 0..b {
                    let base = bi * (n + 1) * d + d;
                    v.extend_from_slice(&g[base..base + n * d]);
                }
                v
            });
            let gt = args.needs[1].then(|| {
                let mut v = vec![F::zero(); d];
                for bi in 0..b {
                    let base = bi * (n + 1) * d;
                    v.iter_mut().zip(&g[base..base + d]).for_each(|(a, &x)| *a += x);
                }
                v
            });
            vec![gx, gt]
        }))
    }

    /// Gathers tokens from `[B, T, D]`: output sample `i` takes tokens
    /// `picks[i].1` (in order) from input sample `picks[i].0`. All picks must
    /// have the same length.
    pub fn gather_tokens(&self, picks: &[(usize, Vec<usize>)]) -> Result<Tensor<F>> {
        let s = self.shape();
        if s.len() != 3 {
            return dim_err(format!("gather_tokens needs [B,T,D], got {s:?}"));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let len = picks.first().map_or(0, |p| p.1.len());
        for (bi, toks) in picks {
            if *bi >= b {
                return Err(Error::Index(format!("sample {bi} out of range for batch {b}")));
            }
            if toks.len() != len {
                return dim_err("gather_tokens picks differ in length");
            }
            if let Some(&bad) = toks.iter().find(|&&k| k >= t) {
                return Err(Error::Index(format!("token {bad} out of range for {t} tokens")));
            }
        }
        let x = self.data();
        let mut out = Vec::with_capacity(picks.len() * len * d);
        for (bi, toks) in picks {
            for &k in toks {
                let base = (bi * t + k) * d;
                out.extend_from_slice(&x[base..base + d]);
            }
        }
        drop(x);
        let picks = picks.to_vec();
        Ok(Tensor::from_op(out, vec![picks.len(), len, d], &[self], move |args| {
            let mut g = vec![F::zero(); b * t * d];
            let mut off = 0;
            for (bi, toks) in &picks {
                for &k in toks {
                    let base = (bi * t + k) * d;
                    g[base..base + d].iter_mut().zip(&args.grad[off..off + d]).for_each(|(a, &v)| *a += v);
                    off += d;
                }
            }
            vec![Some(g)]
        }))
    }
}

fn attention_dims(shape: &[usize], keep_len: usize) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 || shape[2] != shape[3] || shape[0] * shape[2] != keep_len {
        return dim_err(format!("attention mask of length {keep_len} does not fit scores of shape {shape:?}"));
    }
    Ok((shape[0], shape[1], shape[2]))
}

const LANES: usize = 8;

/// Sum with independent lane accumulators (vectorisable).
#[inline]
pub(crate) fn lane_sum<F: Scalar>(x: &[F]) -> F {
    let mut acc = [F::zero(); LANES];
    let chunks = x.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for i in 0..LANES {
            acc[i] += c[i];
        }
    }
    let mut s = tail.iter().fold(F::zero(), |a, &b| a + b);
    for a in acc {
        s += a;
    }
    s
}

#[inline]
fn lane_max<F: Scalar>(x: &[F]) -> F {
    let mut acc = [F::neg_infinity(); LANES];
    let chunks = x.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for i in 0..LANES {
            acc[i] = if c[i] > acc[i] { c[i] } else { acc[i] };
        }
    }
    let m = tail.iter().fold(F::neg_infinity(), |a, &b| if b > a { b } else { a });
    acc.iter().fold(m, |a, &b| if b > a { b } else { a })
}

#[inline]
fn lane_dot<F: Scalar>(x: &[F], y: &[F]) -> F {
    let mut acc = [F::zero(); LANES];
    let cx = x.chunks_exact(LANES);
    let cy = y.chunks_exact(LANES);
    let tail: F = cx.remainder().iter().zip(cy.remainder()).fold(F::zero(), |a, (&p, &q)| a + p * q);
    for (a, b) in cx.zip(cy) {
        for i in 0..LANES {
            acc[i] += a[i] * b[i];
        }
    }
    acc.iter().fold(tail, |s, &a| s + a)
}

fn softmax_row<F: Scalar>(x: &[F], y: &mut [F]) {
    let mx = lane_max(x);
    for (o, &v) in y.iter_mut().zip(x) {
        *o = (v - mx).exp_v();
    }
    let inv = F::one() / lane_sum(y);
    y.iter_mut().for_each(|v| *v *= inv);
}

/// Maps each output batch index of a broadcast matmul onto operand indices.
struct BatchPlan {
    out_batch: Vec<usize>,
    pairs: Vec<(usize, usize)>,
    /// The right operand has a single batch entry.
    rhs_shared: bool,
    /// Output batch index equals left operand batch index.
    lhs_identity: bool,
}

impl BatchPlan {
    fn new(ba: &[usize], bb: &[usize]) -> Option<Self> {
        let rank = ba.len().max(bb.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(ba), pad(bb));
        let mut out_batch = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return None;
            }
            out_batch.push(x.max(y));
        }
        let total: usize = out_batch.iter().product();
        let sa = contiguous_strides(&pa);
        let sb = contiguous_strides(&pb);
        let mut pairs = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        for _ in 0..total {
            let mut ia = 0;
            let mut ib = 0;
            for i in 0..rank {
                if pa[i] != 1 {
                    ia += idx[i] * sa[i];
                }
                if pb[i] != 1 {
                    ib += idx[i] * sb[i];
                }
            }
            pairs.push((ia, ib));
            for i in (0..rank).rev() {
                idx[i] += 1;
                if idx[i] < out_batch[i] {
                    break;
                }
                idx[i] = 0;
            }
        }
        let rhs_shared = pb.iter().product::<usize>() == 1;
        let lhs_identity = pairs.iter().enumerate().all(|(o, &(ia, _))| o == ia);
        Some(BatchPlan { out_batch, pairs, rhs_shared, lhs_identity })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64], s: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(v, s).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        assert_eq!(i.matmul(&a).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_value() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[5.0, 6.0, 7.0, 8.0], &[2, 2]);
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn matmul_broadcasts_batch() {
        let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], &[2, 2, 2]);
        let b = t(&[1.0, 0.0, 0.0, 1.0], &[1, 2, 2]);
        assert_eq!(a.matmul(&b).unwrap().to_vec(), a.to_vec());
        let b2 = t(&[2.0, 0.0, 0.0, 2.0, 1.0, 0.0, 0.0, 1.0], &[2, 2, 2]);
        let out = a.matmul(&b2).unwrap().to_vec();
        assert_eq!(out, vec![2.0, 4.0, 6.0, 8.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let s = t(&[0.0, 0.0, 0.0], &[3]).softmax(-1).unwrap().to_vec();
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = t(&[1f64.ln(), 2f64.ln(), 3f64.ln()], &[3]).softmax(0).unwrap().to_vec();
        for (v, w) in s.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - w).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_sentinel_underflows_to_zero_f32() {
        let x = Tensor::<f32>::new(vec![-65000.0, 0.0], &[2]).unwrap();
        assert_eq!(x.softmax(0).unwrap().to_vec(), vec![0.0, 1.0]);
    }

    #[test]
    fn softmax_inner_axis_matches_permuted() {
        let x = t(&[0.1, 0.5, -0.3, 2.0, 1.0, 0.0], &[3, 2]);
        let a = x.softmax(0).unwrap().to_vec();
        let b = x.transpose(0, 1).unwrap().softmax(1).unwrap().transpose(0, 1).unwrap().to_vec();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let g = t(&[1.0, 1.0], &[2]);
        let z = t(&[0.0, 0.0], &[2]);
        let c = t(&[3.0, 3.0], &[1, 2]).layer_norm(&g, &z, 1e-6).unwrap().to_vec();
        assert_eq!(c, vec![0.0, 0.0]);
        let y = t(&[1.0, 3.0], &[1, 2]).layer_norm(&g, &z, 1e-12).unwrap().to_vec();
        assert!((y[0] + 1.0).abs() < 1e-9 && (y[1] - 1.0).abs() < 1e-9);
        let five = t(&[5.0, 5.0], &[2]);
        let s = t(&[1.0, 3.0], &[1, 2]).layer_norm(&g, &five, 1e-12).unwrap().to_vec();
        assert!((s[0] - 4.0).abs() < 1e-9 && (s[1] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn gelu_values() {
        let y = t(&[0.0, 1.0, 20.0], &[3]).gelu().to_vec();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 0.8412).abs() < 1e-4, "{}", y[1]);
        assert!((y[2] - 20.0).abs() < 1e-9);
    }

    #[test]
    fn backward_sum_and_square() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
        x.zero_grad();
        x.square().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn permute_round_trip() {
        let x = t(&(0..24).map(f64::from).collect::<Vec<_>>(), &[2, 3, 2, 2]);
        let y = x.permute(&[0, 2, 1, 3]).unwrap();
        assert_eq!(y.shape(), &[2, 2, 3, 2]);
        let z = y.permute(&[0, 2, 1, 3]).unwrap();
        assert_eq!(z.to_vec(), x.to_vec());
        let w = x.permute(&[3, 2, 1, 0]).unwrap().permute(&[3, 2, 1, 0]).unwrap();
        assert_eq!(w.to_vec(), x.to_vec());
    }

    #[test]
    fn narrow_and_mask_ops() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[1, 3, 2]);
        assert_eq!(x.narrow(1, 1, 2).unwrap().to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
        let s = t(&[1.0; 9], &[1, 1, 3, 3]);
        let m = s.attention_mask_fill(&[true, false, true], -65000.0).unwrap().to_vec();
        assert_eq!(m, vec![1.0, -65000.0, 1.0, -65000.0, -65000.0, -65000.0, 1.0, -65000.0, 1.0]);
        let z = s.zero_pruned_rows(&[true, false, true]).unwrap().to_vec();
        assert_eq!(z, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn add_broadcast_rules() {
        let x = Tensor::<f64>::zeros(&[2, 3, 4]);
        assert!(x.add(&Tensor::zeros(&[4])).is_ok());
        assert!(x.add(&Tensor::zeros(&[1, 3, 4])).is_ok());
        assert!(x.add(&Tensor::zeros(&[3])).is_err());
    }
}
