//! Differentiable operations on [`Var`].
//!
//! Broadcasting is limited to a right operand whose shape is a suffix of the
//! left operand's shape (biases, per-feature scales). Anything else needs an
//! explicit reshape.

use super::real::{cast, Real};
use super::tape::Var;
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            axis,
            rank: shape.len(),
        });
    }
    Ok(())
}

fn suffix_repeats(lhs: &[usize], rhs: &[usize]) -> Option<usize> {
    if rhs.len() > lhs.len() || lhs[lhs.len() - rhs.len()..] != *rhs {
        return None;
    }
    Some(lhs[..lhs.len() - rhs.len()].iter().product())
}

impl<'t, T: Real> Var<'t, T> {
    fn emit(
        &self,
        value: Tensor<T>,
        inputs: &[&Var<'t, T>],
        backward: impl FnOnce(&[T], &[bool]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Var<'t, T> {
        self.tape.record(value, inputs, Box::new(backward))
    }

    fn binary(
        &self,
        other: &Var<'t, T>,
        op: &'static str,
        f: fn(T, T) -> T,
        dfa: fn(T, T) -> T,
        dfb: fn(T, T) -> T,
    ) -> Result<Var<'t, T>> {
        if suffix_repeats(self.shape(), other.shape()).is_none() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        let a = self.value.clone();
        let b = other.value.clone();
        let nb = b.numel();
        let mut out = Vec::with_capacity(a.numel());
        for chunk in a.data().chunks_exact(nb.max(1)) {
            out.extend(chunk.iter().zip(b.data()).map(|(&x, &y)| f(x, y)));
        }
        let value = Tensor::from_parts(a.shape().to_vec(), out);
        Ok(self.emit(value, &[self, other], move |g, needs| {
            let (ad, bd) = (a.data(), b.data());
            let step = nb.max(1);
            let ga = needs[0].then(|| {
                let mut out = Vec::with_capacity(g.len());
                for (gc, ac) in g.chunks_exact(step).zip(ad.chunks_exact(step)) {
                    out.extend(gc.iter().zip(ac).zip(bd).map(|((&gi, &x), &y)| gi * dfa(x, y)));
                }
                out
            });
            let gb = needs[1].then(|| {
                let mut acc = vec![T::zero(); nb];
                for (gc, ac) in g.chunks_exact(step).zip(ad.chunks_exact(step)) {
                    for (((s, &gi), &x), &y) in acc.iter_mut().zip(gc).zip(ac).zip(bd) {
                        *s = *s + gi * dfb(x, y);
                    }
                }
                acc
            });
            vec![ga, gb]
        }))
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", |a, b| a + b, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", |a, b| a - b, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "div", |a, b| a / b, |_, b| T::one() / b, |a, b| -a / (b * b))
    }

    /// Elementwise `ln(exp(a) + exp(b))`, well defined when both are `-inf`.
    pub fn logaddexp(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        if self.shape() != other.shape() {
            return Err(Error::shape("logaddexp", self.shape(), other.shape()));
        }
        let a = self.value.clone();
        let b = other.value.clone();
        let out: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| logaddexp(x, y)).collect();
        let y = Tensor::from_parts(a.shape().to_vec(), out);
        let saved = y.clone();
        Ok(self.emit(y, &[self, other], move |g, needs| {
            let weight = |x: T, o: T| {
                if o == T::neg_infinity() {
                    T::zero()
                } else {
                    (x - o).exp()
                }
            };
            let side = |src: &Tensor<T>| -> Vec<T> {
                g.iter()
                    .zip(src.data())
                    .zip(saved.data())
                    .map(|((&gi, &x), &o)| gi * weight(x, o))
                    .collect()
            };
            vec![needs[0].then(|| side(&a)), needs[1].then(|| side(&b))]
        }))
    }

    fn unary(&self, f: impl Fn(T) -> T, df: fn(T, T) -> T) -> Var<'t, T> {
        let x = self.value.clone();
        let y = x.map(f);
        let saved = y.clone();
        self.emit(y, &[self], move |g, _| {
            let d = g
                .iter()
                .zip(x.data())
                .zip(saved.data())
                .map(|((&gi, &xi), &yi)| gi * df(xi, yi))
                .collect();
            vec![Some(d)]
        })
    }

    /// Same value, cut off from the gradient flow.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant(self.value.clone())
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn scale(&self, s: T) -> Var<'t, T> {
        let x = self.value.clone();
        let y = x.map(|v| v * s);
        self.emit(y, &[self], move |g, _| vec![Some(g.iter().map(|&gi| gi * s).collect())])
    }

    pub fn add_scalar(&self, s: T) -> Var<'t, T> {
        let y = self.value.map(|v| v + s);
        self.emit(y, &[self], move |g, _| vec![Some(g.to_vec())])
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.unary(
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&self) -> Var<'t, T> {
        self.unary(
            |x| {
                let (c, k) = gelu_consts::<T>();
                let t = fast_tanh(c * (x + k * x * x * x));
                cast::<T>(0.5) * x * (T::one() + t)
            },
            |x, _| {
                let (c, k) = gelu_consts::<T>();
                let half = cast::<T>(0.5);
                let t = fast_tanh(c * (x + k * x * x * x));
                half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + cast::<T>(3.0) * k * x * x)
            },
        )
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(&self) -> Var<'t, T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Var<'t, T> {
        self.unary(|x| x.ln(), |x, _| T::one() / x)
    }

    /// Stable `ln(1 + exp(x))`.
    pub fn softplus(&self) -> Var<'t, T> {
        self.unary(|x| x.max(T::zero()) + (-x.abs()).exp().ln_1p(), |x, _| sigmoid(x))
    }

    /// Sum of all elements, as a rank-0 tensor. Accumulates in f64.
    pub fn sum(&self) -> Var<'t, T> {
        let total: f64 = self.value.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum();
        let n = self.value.numel();
        self.emit(Tensor::scalar(cast(total)), &[self], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = self.value.numel();
        self.sum().scale(cast(1.0 / n as f64))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        check_axis(self.shape(), axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.value.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let acc: f64 = (0..len)
                    .map(|l| x[(o * len + l) * inner + i].to_f64().unwrap_or(f64::NAN))
                    .sum();
                out[o * inner + i] = cast(acc);
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(self.emit(Tensor::from_parts(shape, out), &[self], move |g, _| {
            let mut d = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    let row = (o * len + l) * inner;
                    d[row..row + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(d)]
        }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        check_axis(self.shape(), axis)?;
        let len = self.shape()[axis];
        Ok(self.sum_axis(axis)?.scale(cast(1.0 / len as f64)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let y = self.value.reshape(shape)?;
        Ok(self.emit(y, &[self], move |g, _| vec![Some(g.to_vec())]))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape().to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::contract(format!("invalid permutation {perm:?} for rank {rank}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let y = permute_data(self.value.data(), &shape, perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let out_shape_bw = out_shape.clone();
        Ok(self.emit(Tensor::from_parts(out_shape, y), &[self], move |g, _| {
            vec![Some(permute_data(g, &out_shape_bw, &inverse))]
        }))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Var<'t, T>> {
        check_axis(self.shape(), a)?;
        check_axis(self.shape(), b)?;
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
        check_axis(first.shape(), axis)?;
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let (a, b) = (first.shape(), p.shape());
            if a.len() != b.len() || a[..axis] != b[..axis] || a[axis + 1..] != b[axis + 1..] {
                return Err(Error::shape("concat", a, b));
            }
            lens.push(b[axis]);
        }
        let (outer, _, inner) = axis_split(first.shape(), axis);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                let d = p.value.data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let refs: Vec<&Var<'t, T>> = parts.iter().collect();
        Ok(first.emit(Tensor::from_parts(shape, out), &refs, move |g, needs| {
            let mut grads: Vec<Option<Vec<T>>> = lens
                .iter()
                .zip(needs)
                .map(|(&len, &need)| need.then(|| Vec::with_capacity(outer * len * inner)))
                .collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (slot, &len) in grads.iter_mut().zip(&lens) {
                    if let Some(buf) = slot {
                        buf.extend_from_slice(&g[pos..pos + len * inner]);
                    }
                    pos += len * inner;
                }
            }
            grads
        }))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var<'t, T>> {
        check_axis(self.shape(), axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        if start >= end || end > len {
            return Err(Error::contract(format!(
                "slice {start}..{end} out of range for axis {axis} of {:?}",
                self.shape()
            )));
        }
        let width = end - start;
        let x = self.value.data();
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = width;
        Ok(self.emit(Tensor::from_parts(shape, out), &[self], move |g, _| {
            let mut d = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                d[(o * len + start) * inner..(o * len + end) * inner]
                    .copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
            }
            vec![Some(d)]
        }))
    }

    /// Gathers entries along `axis` (repeats allowed).
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Var<'t, T>> {
        check_axis(self.shape(), axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        if indices.is_empty() {
            return Err(Error::contract("index_select with no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::contract(format!(
                "index {bad} out of range for axis {axis} of length {len}"
            )));
        }
        let x = self.value.data();
        let m = indices.len();
        let mut out = Vec::with_capacity(outer * m * inner);
        for o in 0..outer {
            for &i in indices {
                out.extend_from_slice(&x[(o * len + i) * inner..(o * len + i + 1) * inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = m;
        let indices = indices.to_vec();
        Ok(self.emit(Tensor::from_parts(shape, out), &[self], move |g, _| {
            let mut d = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for (k, &i) in indices.iter().enumerate() {
                    let src = &g[(o * m + k) * inner..(o * m + k + 1) * inner];
                    let dst = &mut d[(o * len + i) * inner..(o * len + i + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
                }
            }
            vec![Some(d)]
        }))
    }

    /// Row lookup into a `[vocab, dim]` table.
    pub fn embedding(&self, ids: &[usize]) -> Result<Var<'t, T>> {
        if self.rank() != 2 {
            return Err(Error::contract(format!(
                "embedding table must be rank 2, got {:?}",
                self.shape()
            )));
        }
        self.index_select(0, ids)
    }

    /// Replaces positions where `mask` is true with `value`. The mask has
    /// one entry per element.
    pub fn masked_fill(&self, mask: &[bool], value: T) -> Result<Var<'t, T>> {
        if mask.len() != self.value.numel() {
            return Err(Error::shape("masked_fill", self.shape(), &[mask.len()]));
        }
        let y: Vec<T> = self
            .value
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        let mask = mask.to_vec();
        Ok(
            self.emit(Tensor::from_parts(self.shape().to_vec(), y), &[self], move |g, _| {
                vec![Some(
                    g.iter()
                        .zip(&mask)
                        .map(|(&gi, &m)| if m { T::zero() } else { gi })
                        .collect(),
                )]
            }),
        )
    }

    /// Batched matrix product `[.., m, k] · [.., k, n]`. Either operand may be
    /// rank 2, in which case it is shared across the other's batch dims.
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.bmm(other, false)
    }

    /// Batched `a · bᵀ` with `b` shaped `[.., n, k]`.
    pub fn matmul_nt(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.bmm(other, true)
    }

    fn bmm(&self, other: &Var<'t, T>, trans_b: bool) -> Result<Var<'t, T>> {
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(op, sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        if k != kb || !(batch_a == batch_b || batch_a.is_empty() || batch_b.is_empty()) {
            return Err(Error::shape(op, sa, sb));
        }
        let batch_shape = if batch_a.is_empty() { batch_b } else { batch_a }.to_vec();
        let batch: usize = batch_shape.iter().product();
        let (a_batched, b_batched) = (!batch_a.is_empty(), !batch_b.is_empty());
        let a = self.value.clone();
        let b = other.value.clone();
        let b_strides = if trans_b { (1, k) } else { (n, 1) };
        let mut out = vec![T::zero(); batch * m * n];
        if a_batched && !b_batched {
            T::gemm(batch * m, k, n, a.data(), (k, 1), b.data(), b_strides, &mut out, false);
        } else {
            for i in 0..batch {
                let ao = if a_batched { i * m * k } else { 0 };
                let bo = if b_batched { i * k * n } else { 0 };
                T::gemm(
                    m,
                    k,
                    n,
                    &a.data()[ao..],
                    (k, 1),
                    &b.data()[bo..],
                    b_strides,
                    &mut out[i * m * n..],
                    false,
                );
            }
        }
        let mut shape = batch_shape;
        shape.extend([m, n]);
        Ok(
            self.emit(Tensor::from_parts(shape, out), &[self, other], move |g, needs| {
                let (ad, bd) = (a.data(), b.data());
                let ga = needs[0].then(|| {
                    let mut d = vec![T::zero(); a.numel()];
                    // dA = dC · Bᵀ (or dC · B when B was transposed).
                    let bt = if trans_b { (k, 1) } else { (1, n) };
                    if a_batched && !b_batched {
                        T::gemm(batch * m, n, k, g, (n, 1), bd, bt, &mut d, false);
                    } else {
                        for i in 0..batch {
                            let ao = if a_batched { i * m * k } else { 0 };
                            let bo = if b_batched { i * k * n } else { 0 };
                            T::gemm(m, n, k, &g[i * m * n..], (n, 1), &bd[bo..], bt, &mut d[ao..], true);
                        }
                    }
                    d
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![T::zero(); b.numel()];
                    if a_batched && !b_batched {
                        if trans_b {
                            T::gemm(n, batch * m, k, g, (1, n), ad, (k, 1), &mut d, false);
                        } else {
                            T::gemm(k, batch * m, n, ad, (1, k), g, (n, 1), &mut d, false);
                        }
                    } else {
                        for i in 0..batch {
                            let ao = if a_batched { i * m * k } else { 0 };
                            let bo = if b_batched { i * k * n } else { 0 };
                            if trans_b {
                                T::gemm(n, m, k, &g[i * m * n..], (1, n), &ad[ao..], (k, 1), &mut d[bo..], true);
                            } else {
                                T::gemm(k, m, n, &ad[ao..], (1, k), &g[i * m * n..], (n, 1), &mut d[bo..], true);
                            }
                        }
                    }
                    d
                });
                vec![ga, gb]
            }),
        )
    }

    /// Softmax along `axis`, stabilised by max subtraction. A slice that is
    /// entirely `-inf` yields zeros.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        check_axis(self.shape(), axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let y = softmax_data(self.value.data(), outer, len, inner);
        let saved = y.clone();
        Ok(
            self.emit(Tensor::from_parts(self.shape().to_vec(), y), &[self], move |g, _| {
                let mut d = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len)
                            .map(|l| (g[idx(l)] * saved[idx(l)]).to_f64().unwrap_or(f64::NAN))
                            .sum();
                        let dot: T = cast(dot);
                        for l in 0..len {
                            d[idx(l)] = saved[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        check_axis(self.shape(), axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.value.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| x[idx(l)]).fold(T::neg_infinity(), T::max);
                let lse: f64 = (0..len)
                    .map(|l| (x[idx(l)] - max).exp().to_f64().unwrap_or(f64::NAN))
                    .sum::<f64>()
                    .ln();
                let shift = max + cast(lse);
                for l in 0..len {
                    y[idx(l)] = x[idx(l)] - shift;
                }
            }
        }
        let saved = y.clone();
        Ok(
            self.emit(Tensor::from_parts(self.shape().to_vec(), y), &[self], move |g, _| {
                let mut d = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let total: f64 = (0..len).map(|l| g[idx(l)].to_f64().unwrap_or(f64::NAN)).sum();
                        let total: T = cast(total);
                        for l in 0..len {
                            d[idx(l)] = g[idx(l)] - saved[idx(l)].exp() * total;
                        }
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// Layer normalisation over the last axis with f64 statistics.
    pub fn layer_norm(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let d = *shape.last().ok_or_else(|| Error::contract("layer_norm of a scalar"))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape("layer_norm", shape, gamma.shape()));
        }
        let rows = self.value.numel() / d;
        let x = self.value.data();
        let gm = gamma.value.clone();
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![0.0f64; rows];
        let mut y = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|v| {
                    let c = v.to_f64().unwrap_or(f64::NAN) - mean;
                    c * c
                })
                .sum::<f64>()
                / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h: T = cast((row[j].to_f64().unwrap_or(f64::NAN) - mean) * is);
                xhat[r * d + j] = h;
                y[r * d + j] = h * gm.data()[j] + beta.value.data()[j];
            }
        }
        Ok(self.emit(
            Tensor::from_parts(shape.to_vec(), y),
            &[self, gamma, beta],
            move |g, needs| {
                let gd = gm.data();
                let gx = needs[0].then(|| {
                    let mut dx = vec![T::zero(); g.len()];
                    for r in 0..rows {
                        let (mut m1, mut m2) = (0.0f64, 0.0f64);
                        for j in 0..d {
                            let dh = (g[r * d + j] * gd[j]).to_f64().unwrap_or(f64::NAN);
                            m1 += dh;
                            m2 += dh * xhat[r * d + j].to_f64().unwrap_or(f64::NAN);
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dh = (g[r * d + j] * gd[j]).to_f64().unwrap_or(f64::NAN);
                            let h = xhat[r * d + j].to_f64().unwrap_or(f64::NAN);
                            dx[r * d + j] = cast(inv_std[r] * (dh - m1 - h * m2));
                        }
                    }
                    dx
                });
                let ggamma = needs[1].then(|| {
                    let mut acc = vec![0.0f64; d];
                    for (i, (&gi, &h)) in g.iter().zip(&xhat).enumerate() {
                        acc[i % d] += (gi * h).to_f64().unwrap_or(f64::NAN);
                    }
                    acc.into_iter().map(cast).collect()
                });
                let gbeta = needs[2].then(|| {
                    let mut acc = vec![0.0f64; d];
                    for (i, &gi) in g.iter().enumerate() {
                        acc[i % d] += gi.to_f64().unwrap_or(f64::NAN);
                    }
                    acc.into_iter().map(cast).collect()
                });
                vec![gx, ggamma, gbeta]
            },
        ))
    }

    /// 2-D convolution of `[B, C, H, W]` with a `[O, C, KH, KW]` kernel and
    /// optional `[O]` bias. Output spatial size is
    /// `floor((L + 2*padding - K) / stride) + 1`.
    pub fn conv2d(
        &self,
        kernel: &Var<'t, T>,
        bias: Option<&Var<'t, T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, T>> {
        if stride < 1 {
            return Err(Error::contract("conv2d stride must be at least 1"));
        }
        let (xs, ks) = (self.shape(), kernel.shape());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(Error::shape("conv2d", xs, ks));
        }
        if let Some(b) = bias {
            if b.shape() != [ks[0]] {
                return Err(Error::shape("conv2d bias", ks, b.shape()));
            }
        }
        let geo = ConvGeometry {
            batch: xs[0],
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            padding,
        };
        let (ho, wo) = geo.output_hw().ok_or_else(|| Error::shape("conv2d", xs, ks))?;
        let ckk = geo.channels * geo.kh * geo.kw;
        let hw = ho * wo;
        let x = self.value.data();
        let w = kernel.value.clone();
        let mut cols = vec![T::zero(); geo.batch * ckk * hw];
        let mut out = vec![T::zero(); geo.batch * geo.out_channels * hw];
        for bi in 0..geo.batch {
            let col = &mut cols[bi * ckk * hw..(bi + 1) * ckk * hw];
            geo.im2col(&x[bi * geo.channels * geo.height * geo.width..], col, ho, wo);
            T::gemm(
                geo.out_channels,
                ckk,
                hw,
                w.data(),
                (ckk, 1),
                col,
                (hw, 1),
                &mut out[bi * geo.out_channels * hw..],
                false,
            );
            if let Some(b) = bias {
                for o in 0..geo.out_channels {
                    let bv = b.value.data()[o];
                    out[(bi * geo.out_channels + o) * hw..(bi * geo.out_channels + o + 1) * hw]
                        .iter_mut()
                        .for_each(|v| *v = *v + bv);
                }
            }
        }
        let shape = vec![geo.batch, geo.out_channels, ho, wo];
        let mut inputs = vec![self, kernel];
        if let Some(b) = bias {
            inputs.push(b);
        }
        let has_bias = bias.is_some();
        Ok(self.emit(Tensor::from_parts(shape, out), &inputs, move |g, needs| {
            let oc = geo.out_channels;
            let gx = needs[0].then(|| {
                let mut dx = vec![T::zero(); geo.batch * geo.channels * geo.height * geo.width];
                let mut dcol = vec![T::zero(); ckk * hw];
                for bi in 0..geo.batch {
                    T::gemm(
                        ckk,
                        oc,
                        hw,
                        w.data(),
                        (1, ckk),
                        &g[bi * oc * hw..],
                        (hw, 1),
                        &mut dcol,
                        false,
                    );
                    let plane = geo.channels * geo.height * geo.width;
                    geo.col2im(&dcol, &mut dx[bi * plane..(bi + 1) * plane], ho, wo);
                }
                dx
            });
            let gw = needs[1].then(|| {
                let mut dw = vec![T::zero(); oc * ckk];
                for bi in 0..geo.batch {
                    T::gemm(
                        oc,
                        hw,
                        ckk,
                        &g[bi * oc * hw..],
                        (hw, 1),
                        &cols[bi * ckk * hw..],
                        (1, hw),
                        &mut dw,
                        true,
                    );
                }
                dw
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(needs[2].then(|| {
                    let mut db = vec![0.0f64; oc];
                    for bi in 0..geo.batch {
                        for (o, acc) in db.iter_mut().enumerate() {
                            *acc += g[(bi * oc + o) * hw..(bi * oc + o + 1) * hw]
                                .iter()
                                .map(|v| v.to_f64().unwrap_or(f64::NAN))
                                .sum::<f64>();
                        }
                    }
                    db.into_iter().map(cast).collect()
                }));
            }
            grads
        }))
    }
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    out_channels: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeometry {
    fn output_hw(&self) -> Option<(usize, usize)> {
        let out = |len: usize, k: usize| {
            (len + 2 * self.padding)
                .checked_sub(k)
                .map(|span| span / self.stride + 1)
        };
        Some((out(self.height, self.kh)?, out(self.width, self.kw)?))
    }

    /// Visits `(column-row, column, input offset)` for every in-bounds tap.
    fn for_each_tap(&self, ho: usize, wo: usize, mut f: impl FnMut(usize, usize, usize)) {
        let hw = ho * wo;
        for c in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (c * self.kh + ki) * self.kw + kj;
                    for oh in 0..ho {
                        let ih = (oh * self.stride + ki) as isize - self.padding as isize;
                        if ih < 0 || ih as usize >= self.height {
                            continue;
                        }
                        for ow in 0..wo {
                            let iw = (ow * self.stride + kj) as isize - self.padding as isize;
                            if iw < 0 || iw as usize >= self.width {
                                continue;
                            }
                            let src = (c * self.height + ih as usize) * self.width + iw as usize;
                            f(r * hw, oh * wo + ow, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Real>(&self, x: &[T], col: &mut [T], ho: usize, wo: usize) {
        self.for_each_tap(ho, wo, |row, c, src| col[row + c] = x[src]);
    }

    fn col2im<T: Real>(&self, col: &[T], dx: &mut [T], ho: usize, wo: usize) {
        self.for_each_tap(ho, wo, |row, c, src| dx[src] = dx[src] + col[row + c]);
    }
}

/// `tanh` through a single `exp`, which is much cheaper than libm's `tanh`.
fn fast_tanh<T: Real>(u: T) -> T {
    let two = cast::<T>(2.0);
    if u > cast(20.0) {
        return T::one();
    }
    if u < cast(-20.0) {
        return -T::one();
    }
    T::one() - two / ((two * u).exp() + T::one())
}

fn gelu_consts<T: Real>() -> (T, T) {
    (cast((2.0 / std::f64::consts::PI).sqrt()), cast(0.044715))
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn logaddexp<T: Real>(x: T, y: T) -> T {
    let m = x.max(y);
    if m == T::neg_infinity() {
        return m;
    }
    m + ((x - m).exp() + (y - m).exp()).ln()
}

pub(crate) fn softmax_data<T: Real>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + i;
            let max = (0..len).map(|l| x[idx(l)]).fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                continue;
            }
            let mut total = 0.0f64;
            for l in 0..len {
                let e = (x[idx(l)] - max).exp();
                y[idx(l)] = e;
                total += e.to_f64().unwrap_or(f64::NAN);
            }
            let inv: T = cast(1.0 / total);
            for l in 0..len {
                y[idx(l)] = y[idx(l)] * inv;
            }
        }
    }
    y
}

fn permute_data<T: Real>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    if x.is_empty() || rank == 0 {
        return x.to_vec();
    }
    // Copy whole runs when the last axis stays in place.
    let (run, outer_rank) = if perm[rank - 1] == rank - 1 {
        (shape[rank - 1], rank - 1)
    } else {
        (1, rank)
    };
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; outer_rank];
    let mut offset = 0usize;
    for _ in 0..x.len() / run.max(1) {
        if run == 1 {
            out.push(x[offset]);
        } else {
            out.extend_from_slice(&x[offset..offset + run]);
        }
        for ax in (0..outer_rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}
