use std::sync::Arc;

use super::kernels::{self, BilinearTaps};
use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{broadcast_index_map, broadcasts_into, Real, Tensor};

/// Saved state of one fused multi-sequence attention op.
#[derive(Clone, Debug)]
pub struct SpanAttention<T> {
    /// `(start_row, len)` of each independent sequence.
    pub spans: Vec<(usize, usize)>,
    pub heads: usize,
    pub scale: T,
    /// Row-stochastic weights, indexed `[span][head]`, each `len×len`.
    pub probs: Vec<Vec<Vec<T>>>,
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add {
        a: Var,
        b: Var,
        map: Option<Vec<usize>>,
    },
    Sub {
        a: Var,
        b: Var,
        map: Option<Vec<usize>>,
    },
    Mul {
        a: Var,
        b: Var,
        map: Option<Vec<usize>>,
    },
    Scale {
        x: Var,
        s: T,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    MeanPool {
        x: Var,
    },
    SumRows {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape {
        x: Var,
    },
    Transpose {
        x: Var,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Relu {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        cols: Option<Vec<T>>,
    },
    AvgPool2 {
        x: Var,
    },
    Bilinear {
        x: Var,
        plan: Arc<Vec<BilinearTaps<T>>>,
    },
    MinMaxNorm {
        x: Var,
        /// `(argmin, argmax, range)`; `None` for the degenerate constant input.
        state: Option<(usize, usize, T)>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        saved: SpanAttention<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Mse {
        pred: Var,
        target: Vec<T>,
    },
    Bce {
        pred: Var,
        target: Vec<T>,
    },
}

/// Algebra selector used by [`Tape::algebra`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlgebraKind {
    MatMul,
    Add,
    Hadamard,
    Concat {
        axis: usize,
    },
    /// Unary: mean over every axis after the first.
    MeanPool,
}

/// Kernel selector for [`Tape::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    OneByOne,
    ThreeByThreePad1,
}

impl ConvKind {
    pub fn size(self) -> usize {
        match self {
            ConvKind::OneByOne => 1,
            ConvKind::ThreeByThreePad1 => 3,
        }
    }
}

/// Smallest value `bce` feeds into a logarithm.
pub const BCE_CLAMP: f64 = 1e-7;
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Ranges at or below this make min-max normalisation output zeros.
pub const MINMAX_EPS: f64 = 1e-8;

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Tape<T> {
    /// Single entry point over the basic algebra ops. `b` is ignored by
    /// `MeanPool` and required by every other kind.
    pub fn algebra(&mut self, a: Var, b: Option<Var>, kind: AlgebraKind) -> Result<Var> {
        if kind == AlgebraKind::MeanPool {
            return self.mean_pool(a);
        }
        let b = b.ok_or_else(|| Error::invalid("algebra", format!("{kind:?} needs two operands")))?;
        match kind {
            AlgebraKind::MatMul => self.matmul(a, b),
            AlgebraKind::Add => self.add(a, b),
            AlgebraKind::Hadamard => self.mul(a, b),
            AlgebraKind::Concat { axis } => self.concat(&[a, b], axis),
            AlgebraKind::MeanPool => unreachable!(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a)·op(b)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", &sa, &sb, None));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::shape("matmul", &sa, &sb, Some(1)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_into(
            self.data(a),
            sa[0],
            sa[1],
            ta,
            self.data(b),
            sb[0],
            sb[1],
            tb,
            &mut out,
            T::zero(),
        );
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, ta, tb }, ng))
    }

    fn broadcast_binary(&mut self, op: &'static str, a: Var, b: Var) -> Result<Option<Vec<usize>>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(None);
        }
        if !broadcasts_into(sa, sb) {
            return Err(Error::shape(op, sa, sb, None));
        }
        Ok(Some(broadcast_index_map(sa, sb)))
    }

    fn elementwise_binary(&mut self, a: Var, b: Var, map: &Option<Vec<usize>>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (da, db) = (self.data(a), self.data(b));
        let out: Vec<T> = match map {
            None => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Some(m) => da.iter().zip(m).map(|(&x, &j)| f(x, db[j])).collect(),
        };
        Tensor::new(self.shape(a).to_vec(), out).expect("shape preserved")
    }

    /// `a + b`, with `b` broadcast into the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = self.broadcast_binary("add", a, b)?;
        let t = self.elementwise_binary(a, b, &map, |x, y| x + y);
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Add { a, b, map }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = self.broadcast_binary("sub", a, b)?;
        let t = self.elementwise_binary(a, b, &map, |x, y| x - y);
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Sub { a, b, map }, ng))
    }

    /// Hadamard product, with `b` broadcast into the shape of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = self.broadcast_binary("hadamard", a, b)?;
        let t = self.elementwise_binary(a, b, &map, |x, y| x * y);
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Mul { a, b, map }, ng))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let t = self.value(x).map(|v| v * s);
        let ng = self.any_grad(&[x]);
        self.push(t, Op::Scale { x, s }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        let ng = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s: T = d.iter().copied().sum::<T>() / T::lit(d.len() as f64);
        let ng = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Mean { x }, ng)
    }

    /// Mean over every axis after the first: `(C, ...) -> (C)`.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::invalid("mean_pool", format!("needs rank >= 2, got {shape:?}")));
        }
        let c = shape[0];
        let per = self.value(x).len() / c;
        let inv = T::lit(1.0 / per as f64);
        let out: Vec<T> = self
            .data(x)
            .chunks(per)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let ng = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![c], out)?, Op::MeanPool { x }, ng))
    }

    /// `(R, C) -> (1, C)` column sums.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::invalid("sum_rows", format!("needs rank 2, got {shape:?}")));
        }
        let cols = shape[1];
        let mut out = vec![T::zero(); cols];
        for row in self.data(x).chunks(cols) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        let ng = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![1, cols], out)?, Op::SumRows { x }, ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &base, Some(axis)));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::shape("concat", &base, s, Some(axis)));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let block = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self
            .value(x)
            .reshaped(shape)
            .map_err(|_| Error::shape("reshape", self.shape(x), shape, None))?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reshape { x }, ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::invalid("transpose", format!("needs rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.data(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let ng = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose { x }, ng))
    }

    /// Selects rows of a 2-D value (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::invalid("gather_rows", format!("needs rank 2, got {s:?}")));
        }
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows", "empty index list"));
        }
        let cols = s[1];
        let d = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= s[0] {
                return Err(Error::invalid("gather_rows", format!("row {i} out of range for {s:?}")));
            }
            out.extend_from_slice(&d[i * cols..(i + 1) * cols]);
        }
        let ng = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), cols], out)?,
            Op::GatherRows { x, idx: idx.to_vec() },
            ng,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.any_grad(&[x]);
        self.push(t, Op::Relu { x }, ng)
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * kernels::std_normal_cdf(v));
        let ng = self.any_grad(&[x]);
        self.push(t, Op::Gelu { x }, ng)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &shape, &shape, Some(axis)));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = src.to_vec();
        let mut row = vec![T::zero(); n];
        for o in 0..outer {
            for i in 0..inner {
                for j in 0..n {
                    row[j] = src[(o * n + j) * inner + i];
                }
                kernels::softmax_row(&mut row);
                for j in 0..n {
                    out[(o * n + j) * inner + i] = row[j];
                }
            }
        }
        let ng = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, ng))
    }

    /// Normalises over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if d < 2 {
            return Err(Error::invalid(
                "layer_norm",
                format!("last dimension must be >= 2, got {shape:?}"),
            ));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                &shape,
                self.shape(gamma),
                Some(shape.len() - 1),
            ));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let inv_d = T::lit(1.0 / d as f64);
        let (g, b) = (self.data(gamma), self.data(beta));
        let src = self.data(x);
        let rows = src.len() / d;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// `(C_in, H, W)` input, `(C_out, C_in, k, k)` kernels, `(C_out)` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, kind: ConvKind) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let k = kind.size();
        if sx.len() != 3 || sw.len() != 4 || sw[2] != k || sw[3] != k {
            return Err(Error::shape("conv2d", &sx, &sw, None));
        }
        if sw[1] != sx[0] {
            return Err(Error::shape("conv2d", &sx, &sw, Some(0)));
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let cout = sw[0];
        if self.shape(b) != [cout] {
            return Err(Error::shape("conv2d", &sw, self.shape(b), Some(0)));
        }
        let hw = h * wd;
        let cols = (k == 3).then(|| kernels::im2col3(self.data(x), cin, h, wd));
        let mut out = vec![T::zero(); cout * hw];
        {
            let bias = self.data(b);
            for (c, chunk) in out.chunks_mut(hw).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias[c]);
            }
        }
        let rhs: &[T] = cols.as_deref().unwrap_or_else(|| self.data(x));
        kernels::matmul_into(
            self.data(w),
            cout,
            cin * k * k,
            false,
            rhs,
            cin * k * k,
            hw,
            false,
            &mut out,
            T::one(),
        );
        let ng = self.any_grad(&[x, w, b]);
        Ok(self.push(
            Tensor::new(vec![cout, h, wd], out)?,
            Op::Conv2d {
                x,
                w,
                b,
                kernel: k,
                cols,
            },
            ng,
        ))
    }

    /// 2x2 average pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] < 2 || s[2] < 2 {
            return Err(Error::invalid("avg_pool2", format!("needs (C, H>=2, W>=2), got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let src = self.data(x);
        let q = T::lit(0.25);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            let plane = &src[ch * h * w..];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    out[(ch * oh + y) * ow + xx] = (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) * q;
                }
            }
        }
        let ng = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![c, oh, ow], out)?, Op::AvgPool2 { x }, ng))
    }

    /// Resamples every channel of a `(C, H, W)` map with a precomputed plan,
    /// producing `(C, out_h, out_w)`.
    pub fn bilinear(&mut self, x: Var, plan: Arc<Vec<BilinearTaps<T>>>, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || plan.len() != out_h * out_w {
            return Err(Error::invalid(
                "bilinear",
                format!("map {s:?} with plan of {} cells", plan.len()),
            ));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let src = self.data(x);
        let mut out = Vec::with_capacity(c * plan.len());
        for ch in 0..c {
            let plane = &src[ch * hw..(ch + 1) * hw];
            out.extend(
                plan.iter()
                    .map(|taps| taps.iter().fold(T::zero(), |acc, &(i, wt)| acc + plane[i] * wt)),
            );
        }
        let ng = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![c, out_h, out_w], out)?, Op::Bilinear { x, plan }, ng))
    }

    /// Min-max rescaling over all elements; a (near-)constant input maps to
    /// all zeros.
    pub fn min_max_norm(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let (mut imin, mut imax) = (0, 0);
        for (i, &v) in d.iter().enumerate() {
            if v < d[imin] {
                imin = i;
            }
            if v > d[imax] {
                imax = i;
            }
        }
        let range = d[imax] - d[imin];
        let (t, state) = if range <= T::lit(MINMAX_EPS) {
            (self.value(x).map(|_| T::zero()), None)
        } else {
            let lo = d[imin];
            (self.value(x).map(|v| (v - lo) / range), Some((imin, imax, range)))
        };
        let ng = self.any_grad(&[x]);
        self.push(t, Op::MinMaxNorm { x, state }, ng)
    }

    /// Multi-head scaled dot-product attention applied independently to
    /// each row span of `q`, `k`, `v` (all `(rows, d)`); head `m` uses
    /// columns `m·d/heads .. (m+1)·d/heads`.
    pub fn span_attention(&mut self, q: Var, k: Var, v: Var, spans: &[(usize, usize)], heads: usize) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 2 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return Err(Error::shape("attention", &s, self.shape(k), None));
        }
        let (rows, d) = (s[0], s[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(
                "attention",
                format!("d={d} not divisible by {heads} heads"),
            ));
        }
        if spans.iter().any(|&(st, len)| len == 0 || st + len > rows) {
            return Err(Error::invalid("attention", "span out of range"));
        }
        let dk = d / heads;
        let scale = T::lit(1.0 / (dk as f64).sqrt());
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut out = vec![T::zero(); rows * d];
        let mut probs = Vec::with_capacity(spans.len());
        for &(st, len) in spans {
            let mut per_head = Vec::with_capacity(heads);
            for h in 0..heads {
                let off = st * d + h * dk;
                let mut p = vec![T::zero(); len * len];
                // S = Q Kᵀ
                T::gemm(
                    len,
                    dk,
                    len,
                    scale,
                    &qd[off..],
                    d as isize,
                    1,
                    &kd[off..],
                    1,
                    d as isize,
                    T::zero(),
                    &mut p,
                    len as isize,
                    1,
                );
                for row in p.chunks_mut(len) {
                    kernels::softmax_row(row);
                }
                // O = P V
                T::gemm(
                    len,
                    len,
                    dk,
                    T::one(),
                    &p,
                    len as isize,
                    1,
                    &vd[off..],
                    d as isize,
                    1,
                    T::zero(),
                    &mut out[off..],
                    d as isize,
                    1,
                );
                per_head.push(p);
            }
            probs.push(per_head);
        }
        let saved = SpanAttention {
            spans: spans.to_vec(),
            heads,
            scale,
            probs,
        };
        let ng = self.any_grad(&[q, k, v]);
        Ok(self.push(Tensor::new(vec![rows, d], out)?, Op::Attention { q, k, v, saved }, ng))
    }

    pub fn attention_weights(&self, v: Var) -> Option<&SpanAttention<T>> {
        match &self.nodes[v.0].op {
            Op::Attention { saved, .. } => Some(saved),
            _ => None,
        }
    }

    /// Mean softmax cross-entropy of `(B, C)` (or `(C)`) logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let (b, c) = match s.as_slice() {
            [c] => (1, *c),
            [b, c] => (*b, *c),
            _ => {
                return Err(Error::invalid(
                    "cross_entropy",
                    format!("logits must be rank 1 or 2, got {s:?}"),
                ))
            }
        };
        if targets.len() != b {
            return Err(Error::shape("cross_entropy", &s, &[targets.len()], Some(0)));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("class index {t} out of range for {c} classes"),
            ));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = T::zero();
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss = loss + lse - row[t];
            kernels::softmax_row(row);
        }
        loss = loss / T::lit(b as f64);
        let ng = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean squared error against a constant target of equal length.
    pub fn mse(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let d = self.data(pred);
        if d.len() != target.len() {
            return Err(Error::shape("mse", self.shape(pred), &[target.len()], None));
        }
        let n = T::lit(d.len() as f64);
        let loss = d.iter().zip(target).map(|(&p, &t)| (p - t) * (p - t)).sum::<T>() / n;
        let ng = self.any_grad(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            ng,
        ))
    }

    /// Mean binary cross-entropy; predictions are clamped to
    /// `[1e-7, 1 - 1e-7]` before the logarithms.
    pub fn bce(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let d = self.data(pred);
        if d.len() != target.len() {
            return Err(Error::shape("bce", self.shape(pred), &[target.len()], None));
        }
        let lo = T::lit(BCE_CLAMP);
        let hi = T::one() - lo;
        let n = T::lit(d.len() as f64);
        let loss = d
            .iter()
            .zip(target)
            .map(|(&p, &t)| {
                let p = p.max(lo).min(hi);
                -(t * p.ln() + (T::one() - t) * (T::one() - p).ln())
            })
            .sum::<T>()
            / n;
        let ng = self.any_grad(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                target: target.to_vec(),
            },
            ng,
        ))
    }

    pub(crate) fn adjoint(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                if let Some(da) = self.grad_buf(grads, a) {
                    // dop(a) = g · op(b)ᵀ, stored back through op's layout
                    if ta {
                        kernels::matmul_into(self.data(b), sb[0], sb[1], tb, g, m, n, true, da, T::one());
                    } else {
                        kernels::matmul_into(g, m, n, false, self.data(b), sb[0], sb[1], !tb, da, T::one());
                    }
                }
                if let Some(db) = self.grad_buf(grads, b) {
                    // dop(b) = op(a)ᵀ · g
                    if tb {
                        kernels::matmul_into(g, m, n, true, self.data(a), sa[0], sa[1], ta, db, T::one());
                    } else {
                        kernels::matmul_into(self.data(a), sa[0], sa[1], !ta, g, m, n, false, db, T::one());
                    }
                }
            }
            Op::Add { a, b, map } | Op::Sub { a, b, map } => {
                let sign = if matches!(node.op, Op::Sub { .. }) {
                    -T::one()
                } else {
                    T::one()
                };
                if let Some(da) = self.grad_buf(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v);
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    match map {
                        None => db.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + sign * v),
                        Some(m) => {
                            for (&j, &v) in m.iter().zip(g) {
                                db[j] = db[j] + sign * v;
                            }
                        }
                    }
                }
            }
            Op::Mul { a, b, map } => {
                let (va, vb) = (self.data(*a), self.data(*b));
                if let Some(da) = self.grad_buf(grads, *a) {
                    match map {
                        None => da.iter_mut().zip(g).zip(vb).for_each(|((d, &gv), &y)| *d = *d + gv * y),
                        Some(m) => {
                            for ((d, &gv), &j) in da.iter_mut().zip(g).zip(m) {
                                *d = *d + gv * vb[j];
                            }
                        }
                    }
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    match map {
                        None => db.iter_mut().zip(g).zip(va).for_each(|((d, &gv), &x)| *d = *d + gv * x),
                        Some(m) => {
                            for ((&j, &gv), &x) in m.iter().zip(g).zip(va) {
                                db[j] = db[j] + gv * x;
                            }
                        }
                    }
                }
            }
            &Op::Scale { x, s } => {
                if let Some(dx) = self.grad_buf(grads, x) {
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v * s);
                }
            }
            &Op::Sum { x } => {
                if let Some(dx) = self.grad_buf(grads, x) {
                    dx.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            &Op::Mean { x } => {
                if let Some(dx) = self.grad_buf(grads, x) {
                    let v = g[0] / T::lit(dx.len() as f64);
                    dx.iter_mut().for_each(|d| *d = *d + v);
                }
            }
            &Op::MeanPool { x } => {
                if let Some(dx) = self.grad_buf(grads, x) {
                    let per = dx.len() / g.len();
                    let inv = T::lit(1.0 / per as f64);
                    for (chunk, &gv) in dx.chunks_mut(per).zip(g) {
                        chunk.iter_mut().for_each(|d| *d = *d + gv * inv);
                    }
                }
            }
            &Op::SumRows { x } => {
                if let Some(dx) = self.grad_buf(grads, x) {
                    for row in dx.chunks_mut(g.len()) {
                        row.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, _, inner) = split_axis(shape, *axis);
                let total = shape[*axis] * inner;
                let mut off = 0;
                for &p in parts {
                    let block = self.shape(p)[*axis] * inner;
                    if let Some(dp) = self.grad_buf(grads, p) {
                        for o in 0..outer {
                            let src = &g[o * total + off..o * total + off + block];
                            dp[o * block..(o + 1) * block]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &v)| *d = *d + v);
                        }
                    }
                    off += block;
                }
            }
            &Op::Reshape { x } => {
                if let Some(dx) = self.grad_buf(grads, x) {
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v);
                }
            }
            &Op::Transpose { x } => {
                let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                if let Some(dx) = self.grad_buf(grads, x) {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = dx[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let cols = self.shape(*x)[1];
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (r, &src) in idx.iter().enumerate() {
                        let dst = &mut dx[src * cols..(src + 1) * cols];
                        dst.iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                            .for_each(|(d, &v)| *d = *d + v);
                    }
                }
            }
            &Op::Relu { x } => {
                let xv = self.data(x);
                if let Some(dx) = self.grad_buf(grads, x) {
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *d = *d + gv;
                        }
                    }
                }
            }
            &Op::Gelu { x } => {
                let xv = self.data(x);
                if let Some(dx) = self.grad_buf(grads, x) {
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        let dgelu = kernels::std_normal_cdf(v) + v * kernels::std_normal_pdf(v);
                        *d = *d + gv * dgelu;
                    }
                }
            }
            &Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = split_axis(node.value.shape(), axis);
                if let Some(dx) = self.grad_buf(grads, x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let dot: T = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                dx[at(j)] = dx[at(j)] + y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gamma)[0];
                let gam = self.data(*gamma);
                if let Some(dg) = self.grad_buf(grads, *gamma) {
                    for (row_g, row_h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] = dg[j] + row_g[j] * row_h[j];
                        }
                    }
                }
                if let Some(db) = self.grad_buf(grads, *beta) {
                    for row_g in g.chunks(d) {
                        for j in 0..d {
                            db[j] = db[j] + row_g[j];
                        }
                    }
                }
                if let Some(dx) = self.grad_buf(grads, *x) {
                    let inv_d = T::lit(1.0 / d as f64);
                    for (r, (row_g, row_h)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = row_g[j] * gam[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * row_h[j];
                        }
                        mean_dh = mean_dh * inv_d;
                        mean_dh_h = mean_dh_h * inv_d;
                        for j in 0..d {
                            let dh = row_g[j] * gam[j];
                            dx[r * d + j] = dx[r * d + j] + rstd[r] * (dh - mean_dh - row_h[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, kernel, cols } => {
                let (cin, h, wd) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let cout = self.shape(*w)[0];
                let hw = h * wd;
                let kk = cin * kernel * kernel;
                if let Some(db) = self.grad_buf(grads, *b) {
                    for (c, chunk) in g.chunks(hw).enumerate() {
                        db[c] = db[c] + chunk.iter().copied().sum::<T>();
                    }
                }
                if let Some(dw) = self.grad_buf(grads, *w) {
                    let rhs: &[T] = cols.as_deref().unwrap_or_else(|| self.data(*x));
                    kernels::matmul_into(g, cout, hw, false, rhs, kk, hw, true, dw, T::one());
                }
                if self.needs_grad(*x) {
                    let wv = self.data(*w);
                    if *kernel == 1 {
                        let dx = self.grad_buf(grads, *x).unwrap();
                        kernels::matmul_into(wv, cout, kk, true, g, cout, hw, false, dx, T::one());
                    } else {
                        let mut dcols = vec![T::zero(); kk * hw];
                        kernels::matmul_into(wv, cout, kk, true, g, cout, hw, false, &mut dcols, T::zero());
                        let dx = self.grad_buf(grads, *x).unwrap();
                        kernels::col2im3(&dcols, cin, h, wd, dx);
                    }
                }
            }
            &Op::AvgPool2 { x } => {
                let s = self.shape(x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / 2, w / 2);
                let q = T::lit(0.25);
                if let Some(dx) = self.grad_buf(grads, x) {
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let gv = g[(ch * oh + y) * ow + xx] * q;
                                let i = ch * h * w + 2 * y * w + 2 * xx;
                                for j in [i, i + 1, i + w, i + w + 1] {
                                    dx[j] = dx[j] + gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Bilinear { x, plan } => {
                let s = self.shape(*x);
                let hw = s[1] * s[2];
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (ch, gch) in g.chunks(plan.len()).enumerate() {
                        let plane = &mut dx[ch * hw..(ch + 1) * hw];
                        for (taps, &gv) in plan.iter().zip(gch) {
                            for &(j, wt) in taps {
                                plane[j] = plane[j] + gv * wt;
                            }
                        }
                    }
                }
            }
            &Op::MinMaxNorm { x, state } => {
                if let (Some((imin, imax, range)), Some(dx)) = (state, self.grad_buf(grads, x)) {
                    let y = node.value.data();
                    let inv = T::one() / range;
                    let mut to_min = T::zero();
                    let mut to_max = T::zero();
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        *d = *d + gv * inv;
                        to_min = to_min + gv * (yv - T::one());
                        to_max = to_max - gv * yv;
                    }
                    dx[imin] = dx[imin] + to_min * inv;
                    dx[imax] = dx[imax] + to_max * inv;
                }
            }
            Op::Attention { q, k, v, saved } => self.attention_adjoint(*q, *k, *v, saved, g, grads),
            Op::CrossEntropy { logits, targets, probs } => {
                if let Some(dl) = self.grad_buf(grads, *logits) {
                    let c = probs.len() / targets.len();
                    let s = g[0] / T::lit(targets.len() as f64);
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            dl[r * c + j] = dl[r * c + j] + s * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Mse { pred, target } => {
                let p = self.data(*pred);
                if let Some(dp) = self.grad_buf(grads, *pred) {
                    let s = T::lit(2.0) * g[0] / T::lit(p.len() as f64);
                    for ((d, &pv), &tv) in dp.iter_mut().zip(p).zip(target) {
                        *d = *d + s * (pv - tv);
                    }
                }
            }
            Op::Bce { pred, target } => {
                let p = self.data(*pred);
                if let Some(dp) = self.grad_buf(grads, *pred) {
                    let lo = T::lit(BCE_CLAMP);
                    let hi = T::one() - lo;
                    let s = g[0] / T::lit(p.len() as f64);
                    for ((d, &pv), &tv) in dp.iter_mut().zip(p).zip(target) {
                        if pv > lo && pv < hi {
                            *d = *d + s * (pv - tv) / (pv * (T::one() - pv));
                        }
                    }
                }
            }
        }
    }

    fn attention_adjoint(
        &self,
        q: Var,
        k: Var,
        v: Var,
        saved: &SpanAttention<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let d = self.shape(q)[1];
        let dk = d / saved.heads;
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut dq = self.needs_grad(q).then(|| vec![T::zero(); qd.len()]);
        let mut dkv = self.needs_grad(k).then(|| vec![T::zero(); kd.len()]);
        let mut dv = self.needs_grad(v).then(|| vec![T::zero(); vd.len()]);
        for (&(st, len), per_head) in saved.spans.iter().zip(&saved.probs) {
            for (h, p) in per_head.iter().enumerate() {
                let off = st * d + h * dk;
                if let Some(dv) = dv.as_mut() {
                    // dV = Pᵀ dO
                    T::gemm(
                        len,
                        len,
                        dk,
                        T::one(),
                        p,
                        1,
                        len as isize,
                        &g[off..],
                        d as isize,
                        1,
                        T::one(),
                        &mut dv[off..],
                        d as isize,
                        1,
                    );
                }
                if dq.is_none() && dkv.is_none() {
                    continue;
                }
                // dP = dO Vᵀ
                let mut ds = vec![T::zero(); len * len];
                T::gemm(
                    len,
                    dk,
                    len,
                    T::one(),
                    &g[off..],
                    d as isize,
                    1,
                    &vd[off..],
                    1,
                    d as isize,
                    T::zero(),
                    &mut ds,
                    len as isize,
                    1,
                );
                // dS = P ∘ (dP − rowsum(dP ∘ P)), folded with the logit scale
                for (ds_row, p_row) in ds.chunks_mut(len).zip(p.chunks(len)) {
                    let dot: T = ds_row.iter().zip(p_row).map(|(&a, &b)| a * b).sum();
                    for (x, &pv) in ds_row.iter_mut().zip(p_row) {
                        *x = pv * (*x - dot) * saved.scale;
                    }
                }
                if let Some(dq) = dq.as_mut() {
                    T::gemm(
                        len,
                        len,
                        dk,
                        T::one(),
                        &ds,
                        len as isize,
                        1,
                        &kd[off..],
                        d as isize,
                        1,
                        T::one(),
                        &mut dq[off..],
                        d as isize,
                        1,
                    );
                }
                if let Some(dkv) = dkv.as_mut() {
                    T::gemm(
                        len,
                        len,
                        dk,
                        T::one(),
                        &ds,
                        1,
                        len as isize,
                        &qd[off..],
                        d as isize,
                        1,
                        T::one(),
                        &mut dkv[off..],
                        d as isize,
                        1,
                    );
                }
            }
        }
        for (var, delta) in [(q, dq), (k, dkv), (v, dv)] {
            if let (Some(delta), Some(buf)) = (delta, self.grad_buf(grads, var)) {
                buf.iter_mut().zip(&delta).for_each(|(b, &x)| *b = *b + x);
            }
        }
    }
}
