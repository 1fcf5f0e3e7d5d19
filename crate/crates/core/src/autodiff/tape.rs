//! Operation tape and reverse-mode sweep.

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{gemm, MatView, Real};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    /// rhs shape is a suffix of lhs shape and is repeated over the leading axes
    AddBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batched: bool,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Variance {
        x: Var,
        axis: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Relu(Var),
    Windows {
        x: Var,
        starts: Vec<usize>,
    },
    OverlapMean {
        x: Var,
        starts: Vec<usize>,
        counts: Vec<usize>,
    },
    Sum(Var),
    PearsonLoss {
        pred: Var,
        /// d(loss)/d(pred), computed in the forward pass
        dpred: Vec<T>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    tracked: bool,
}

/// Records executed operations so gradients can be propagated in reverse.
///
/// A tape is a single-threaded unit of work; [`Tape::backward`] consumes it.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    warnings: Vec<String>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// (outer, axis length, inner) sizes for iterating one axis of a shape.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` (shape `shape`) into the axis order `axes`.
fn permute_buf<T: Copy>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let nd = out_shape.len();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..src.len() {
        out.push(src[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Messages about degenerate numerics met during the forward pass.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Copies a recorded value out as a standalone tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("recorded shapes are consistent")
    }

    /// Records a tensor as an input. Gradients flow to it iff it requires grad.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) == self.shape(b) {
            Ok(())
        } else {
            Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            })
        }
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let value: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(self.shape(a).to_vec(), value, op, tracked)
    }

    /// Element-wise sum. `b` may also have a shape equal to a suffix of `a`'s,
    /// in which case it is repeated over the leading axes (bias addition).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) == self.shape(b) {
            return Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y));
        }
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb {
            let bv = self.value(b);
            let m = bv.len();
            let value: Vec<T> = self
                .value(a)
                .iter()
                .enumerate()
                .map(|(i, &x)| x + bv[i % m])
                .collect();
            let tracked = self.tracked(a) || self.tracked(b);
            return Ok(self.push(sa.to_vec(), value, Op::AddBroadcast(a, b), tracked));
        }
        Err(Error::Shape {
            op: "add",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).iter().map(|&x| x * s).collect();
        let tracked = self.tracked(a);
        self.push(self.shape(a).to_vec(), value, Op::Scale(a, s), tracked)
    }

    /// `a @ b`. `a` is `[.., m, k]`; `b` is either a shared `[k, n]` matrix or
    /// a batch `[.., k, n]` with the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T`, transposing the last two axes of `b` without a copy.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::Shape {
            op: if trans_b { "matmul_nt" } else { "matmul" },
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(err());
        }
        let batched = sb.len() > 2;
        if batched && (sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(err());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let b_view = if trans_b {
            MatView::transposed(n, k)
        } else {
            MatView::row_major(k, n)
        };
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        if batched {
            for i in 0..batch {
                gemm(
                    &av[i * m * k..(i + 1) * m * k],
                    MatView::row_major(m, k),
                    &bv[i * k * n..(i + 1) * k * n],
                    b_view,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        } else {
            gemm(
                av,
                MatView::row_major(batch * m, k),
                bv,
                b_view,
                T::zero(),
                &mut out,
            );
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(
            out_shape,
            out,
            Op::MatMul {
                a,
                b,
                trans_b,
                batched,
            },
            tracked,
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = axes.len() == shape.len()
            && axes
                .iter()
                .all(|&a| a < shape.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(Error::Shape {
                op: "permute",
                lhs: shape,
                rhs: axes.to_vec(),
            });
        }
        let value = permute_buf(self.value(x), &shape, axes);
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        let tracked = self.tracked(x);
        Ok(self.push(out_shape, value, Op::Permute(x, axes.to_vec()), tracked))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape(x).to_vec(),
                rhs: vec![],
            });
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.value(x).to_vec();
        let tracked = self.tracked(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), tracked))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape {
                op: "concat",
                lhs: base,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let n = self.shape(x)[axis];
                value.extend_from_slice(&self.value(x)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let tracked = xs.iter().any(|&x| self.tracked(x));
        Ok(self.push(out_shape, value, Op::Concat(xs.to_vec(), axis), tracked))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Shape {
                op: "narrow",
                lhs: shape,
                rhs: vec![axis, start, len],
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            value.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let tracked = self.tracked(x);
        Ok(self.push(out_shape, value, Op::Narrow { x, axis, start }, tracked))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis < self.shape(x).len() {
            Ok(())
        } else {
            Err(Error::Shape {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: vec![axis],
            })
        }
    }

    fn axis_means(&self, x: Var, axis: usize) -> Vec<T> {
        let (outer, n, inner) = split_axis(self.shape(x), axis);
        let v = self.value(x);
        let inv = T::one() / T::lit(n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let row = &v[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        out.iter_mut().for_each(|m| *m *= inv);
        out
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean", x, axis)?;
        let value = self.axis_means(x, axis);
        let shape = reduced_shape(self.shape(x), axis);
        let tracked = self.tracked(x);
        Ok(self.push(shape, value, Op::Mean { x, axis }, tracked))
    }

    /// Population variance over `axis`, which is removed from the shape.
    pub fn variance(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("variance", x, axis)?;
        let means = self.axis_means(x, axis);
        let (outer, n, inner) = split_axis(self.shape(x), axis);
        let v = self.value(x);
        let inv = T::one() / T::lit(n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                for j in 0..inner {
                    let d = v[(o * n + i) * inner + j] - means[o * inner + j];
                    out[o * inner + j] += d * d;
                }
            }
        }
        out.iter_mut().for_each(|s| *s *= inv);
        let shape = reduced_shape(self.shape(x), axis);
        let tracked = self.tracked(x);
        Ok(self.push(shape, out, Op::Variance { x, axis }, tracked))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let (outer, n, inner) = split_axis(self.shape(x), axis);
        let v = self.value(x);
        let mut out = vec![T::zero(); v.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let mut mx = T::neg_infinity();
                for i in 0..n {
                    mx = mx.max(v[at(i)]);
                }
                let mut total = T::zero();
                for i in 0..n {
                    let e = (v[at(i)] - mx).exp();
                    out[at(i)] = e;
                    total += e;
                }
                for i in 0..n {
                    out[at(i)] /= total;
                }
            }
        }
        let tracked = self.tracked(x);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::Softmax { x, axis },
            tracked,
        ))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// the learned `gain` and `bias` (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("tensors have at least one axis");
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let rows = self.value(x).len() / d;
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let inv_d = T::one() / T::lit(d as f64);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks_exact(d) {
            let mu = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (i, &v) in row.iter().enumerate() {
                let h = (v - mu) * rs;
                xhat.push(h);
                out.push(h * g[i] + b[i]);
            }
        }
        let tracked = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            tracked,
        ))
    }

    /// Inverted dropout: with `rng` present each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Without an rng (evaluation) this is the identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        let rng = match rng {
            Some(r) if rate > 0.0 => r,
            _ => return Ok(x),
        };
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let value = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let tracked = self.tracked(x);
        Ok(self.push(
            self.shape(x).to_vec(),
            value,
            Op::Dropout { x, mask },
            tracked,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        let tracked = self.tracked(x);
        self.push(self.shape(x).to_vec(), value, Op::Relu(x), tracked)
    }

    /// `x @ w + b` with `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Stacks the windows `x[s..s + window]` of a `[T, d]` sequence into `[n, window, d]`.
    pub fn windows(&mut self, x: Var, starts: &[usize], window: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let bad = shape.len() != 2 || window == 0 || starts.iter().any(|&s| s + window > shape[0]);
        if bad || starts.is_empty() {
            return Err(Error::Shape {
                op: "windows",
                lhs: shape,
                rhs: vec![window],
            });
        }
        let d = shape[1];
        let src = self.value(x);
        let mut value = Vec::with_capacity(starts.len() * window * d);
        for &s in starts {
            value.extend_from_slice(&src[s * d..(s + window) * d]);
        }
        let tracked = self.tracked(x);
        Ok(self.push(
            vec![starts.len(), window, d],
            value,
            Op::Windows {
                x,
                starts: starts.to_vec(),
            },
            tracked,
        ))
    }

    /// Averages overlapping window features `[n, window, d]` back onto a
    /// `[len, d]` sequence: each time point is the arithmetic mean over the
    /// windows covering it, summed in window order.
    pub fn overlap_mean(&mut self, x: Var, starts: &[usize], len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3
            || shape[0] != starts.len()
            || starts.iter().any(|&s| s + shape[1] > len)
        {
            return Err(Error::Shape {
                op: "overlap_mean",
                lhs: shape,
                rhs: vec![starts.len(), len],
            });
        }
        let (w, d) = (shape[1], shape[2]);
        let mut counts = vec![0usize; len];
        for &s in starts {
            counts[s..s + w].iter_mut().for_each(|c| *c += 1);
        }
        if let Some(t) = counts.iter().position(|&c| c == 0) {
            return Err(Error::invalid(format!(
                "time point {t} is not covered by any window"
            )));
        }
        let src = self.value(x);
        let mut out = vec![T::zero(); len * d];
        for (wi, &s) in starts.iter().enumerate() {
            for r in 0..w {
                let row = &src[(wi * w + r) * d..(wi * w + r + 1) * d];
                for (o, &v) in out[(s + r) * d..(s + r + 1) * d].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        for (t, &c) in counts.iter().enumerate() {
            let c = T::lit(c as f64);
            out[t * d..(t + 1) * d].iter_mut().for_each(|v| *v /= c);
        }
        let tracked = self.tracked(x);
        Ok(self.push(
            vec![len, d],
            out,
            Op::OverlapMean {
                x,
                starts: starts.to_vec(),
                counts,
            },
            tracked,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().copied().sum();
        let tracked = self.tracked(x);
        self.push(vec![1], vec![total], Op::Sum(x), tracked)
    }

    /// `1 - r` with `r` the Pearson correlation between `pred` and the
    /// constant `target`. A (near-)constant prediction yields loss 1 with zero
    /// gradient and records a warning instead of dividing by zero.
    pub fn pearson_loss(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let p = self.value(pred);
        let n = p.len();
        if n != target.len() {
            return Err(Error::Shape {
                op: "pearson_loss",
                lhs: self.shape(pred).to_vec(),
                rhs: vec![target.len()],
            });
        }
        if n < 3 {
            return Err(Error::invalid(format!(
                "correlation needs at least 3 points, got {n}"
            )));
        }
        let nn = T::lit(n as f64);
        let pm = p.iter().copied().sum::<T>() / nn;
        let tm = target.iter().copied().sum::<T>() / nn;
        let pc: Vec<T> = p.iter().map(|&v| v - pm).collect();
        let tc: Vec<T> = target.iter().map(|&v| v - tm).collect();
        let spp = pc.iter().map(|&v| v * v).sum::<T>();
        let stt = tc.iter().map(|&v| v * v).sum::<T>();
        let spt = pc.iter().zip(&tc).map(|(&a, &b)| a * b).sum::<T>();
        let sd_t = (stt / nn).sqrt();
        if sd_t.as_f64() <= 1e-12 || !sd_t.is_finite() {
            return Err(Error::Degenerate("target series is constant".into()));
        }
        let sd_p = (spp / nn).sqrt();
        if !sd_p.is_finite() || !spt.is_finite() {
            return Err(Error::NonFinite(
                "prediction entering the correlation loss".into(),
            ));
        }
        let (loss, dpred) = if sd_p.as_f64() < 1e-12 {
            self.warnings.push(
                "constant prediction: correlation loss saturated at 1 with zero gradient".into(),
            );
            (T::one(), vec![T::zero(); n])
        } else {
            // sqrt of the product keeps hand-sized cases exact; the split
            // form only guards against overflow.
            let denom = match (spp * stt).sqrt() {
                d if d.is_finite() && d > T::zero() => d,
                _ => spp.sqrt() * stt.sqrt(),
            };
            let r = spt / denom;
            let a = T::one() / denom;
            let b = r / spp;
            let dpred = pc
                .iter()
                .zip(&tc)
                .map(|(&pv, &tv)| -(tv * a - pv * b))
                .collect();
            (T::one() - r, dpred)
        };
        let tracked = self.tracked(pred);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::PearsonLoss { pred, dpred },
            tracked,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape and returns the
    /// gradient of every tracked value; untouched tracked leaves get zeros.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::Shape {
                op: "backward (loss must be scalar)",
                lhs: self.shape(loss).to_vec(),
                rhs: vec![1],
            });
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            propagate(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in nodes.iter().enumerate() {
            if node.tracked && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![T::zero(); node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or an error if it did not participate.
    pub fn wrt(&self, v: Var) -> Result<&[T]> {
        self.get(v).ok_or_else(|| {
            Error::invalid("no gradient recorded for this value (not a tracked leaf?)")
        })
    }

    /// Adds the gradient of `v` into `t`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<T>) -> Result<()> {
        t.accumulate_grad(self.wrt(v)?)
    }
}

fn slot<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.tracked {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
}

fn propagate<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let value_of = |v: Var| -> &[T] { &nodes[v.0].value };
    let shape_of = |v: Var| -> &[usize] { &nodes[v.0].shape };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
        }
        Op::AddBroadcast(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                let m = gb.len();
                for chunk in g.chunks_exact(m) {
                    gb.iter_mut().zip(chunk).for_each(|(x, &y)| *x += y);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (value_of(*a), value_of(*b));
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((x, &gy), &bv) in ga.iter_mut().zip(g).zip(vb) {
                    *x += gy * bv;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((x, &gy), &av) in gb.iter_mut().zip(g).zip(va) {
                    *x += gy * av;
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *s);
            }
        }
        Op::MatMul {
            a,
            b,
            trans_b,
            batched,
        } => {
            let sa = shape_of(*a);
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let n = *node.shape.last().expect("matmul output is at least 2-D");
            let batch: usize = sa[..sa.len() - 2].iter().product();
            let (va, vb) = (value_of(*a), value_of(*b));
            // (b as [k, n])^T viewed as [n, k]
            let b_as_nk = if *trans_b {
                MatView::row_major(n, k)
            } else {
                MatView::transposed(k, n)
            };
            if let Some(ga) = slot(nodes, grads, *a) {
                // dA = g @ B^T
                if *batched {
                    for i in 0..batch {
                        gemm(
                            &g[i * m * n..(i + 1) * m * n],
                            MatView::row_major(m, n),
                            &vb[i * k * n..(i + 1) * k * n],
                            b_as_nk,
                            T::one(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                } else {
                    gemm(
                        g,
                        MatView::row_major(batch * m, n),
                        vb,
                        b_as_nk,
                        T::one(),
                        ga,
                    );
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                // dB = A^T @ g, or (g^T @ A) when b was used transposed
                let rows = if *batched { m } else { batch * m };
                let reps = if *batched { batch } else { 1 };
                for i in 0..reps {
                    let ai = &va[i * rows * k..(i + 1) * rows * k];
                    let gi = &g[i * rows * n..(i + 1) * rows * n];
                    let off = if *batched { i * k * n } else { 0 };
                    let out = &mut gb[off..off + k * n];
                    if *trans_b {
                        gemm(
                            gi,
                            MatView::transposed(rows, n),
                            ai,
                            MatView::row_major(rows, k),
                            T::one(),
                            out,
                        );
                    } else {
                        gemm(
                            ai,
                            MatView::transposed(rows, k),
                            gi,
                            MatView::row_major(rows, n),
                            T::one(),
                            out,
                        );
                    }
                }
            }
        }
        Op::Permute(x, axes) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let back = permute_buf(g, &node.shape, &inverse_permutation(axes));
                gx.iter_mut().zip(back).for_each(|(a, b)| *a += b);
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
        }
        Op::Concat(xs, axis) => {
            let (outer, total, inner) = split_axis(&node.shape, *axis);
            let mut offset = 0;
            for &x in xs {
                let n = shape_of(x)[*axis];
                if let Some(gx) = slot(nodes, grads, x) {
                    for o in 0..outer {
                        let src =
                            &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                        let dst = &mut gx[o * n * inner..(o + 1) * n * inner];
                        dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                    }
                }
                offset += n;
            }
        }
        Op::Narrow { x, axis, start } => {
            let (outer, n, inner) = split_axis(shape_of(*x), *axis);
            let len = node.shape[*axis];
            if let Some(gx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    let dst = &mut gx[(o * n + start) * inner..(o * n + start + len) * inner];
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                }
            }
        }
        Op::Mean { x, axis } => {
            let (outer, n, inner) = split_axis(shape_of(*x), *axis);
            let inv = T::one() / T::lit(n as f64);
            if let Some(gx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    for i in 0..n {
                        for j in 0..inner {
                            gx[(o * n + i) * inner + j] += g[o * inner + j] * inv;
                        }
                    }
                }
            }
        }
        Op::Variance { x, axis } => {
            let (outer, n, inner) = split_axis(shape_of(*x), *axis);
            let xv = value_of(*x);
            let inv = T::one() / T::lit(n as f64);
            let two = T::lit(2.0);
            if let Some(gx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    for j in 0..inner {
                        let mut mu = T::zero();
                        for i in 0..n {
                            mu += xv[(o * n + i) * inner + j];
                        }
                        mu *= inv;
                        for i in 0..n {
                            let idx = (o * n + i) * inner + j;
                            gx[idx] += g[o * inner + j] * two * (xv[idx] - mu) * inv;
                        }
                    }
                }
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, n, inner) = split_axis(&node.shape, *axis);
            let y = &node.value;
            if let Some(gx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * n + i) * inner + j;
                        let dot: T = (0..n).map(|i| g[at(i)] * y[at(i)]).sum();
                        for i in 0..n {
                            gx[at(i)] += y[at(i)] * (g[at(i)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = *node.shape.last().expect("layer_norm input has an axis");
            let gv = value_of(*gain);
            if let Some(gg) = slot(nodes, grads, *gain) {
                for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for i in 0..d {
                        gg[i] += grow[i] * hrow[i];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                for grow in g.chunks_exact(d) {
                    gb.iter_mut().zip(grow).for_each(|(a, &b)| *a += b);
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let inv_d = T::one() / T::lit(d as f64);
                for (r, (grow, hrow)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for i in 0..d {
                        let dh = grow[i] * gv[i];
                        m1 += dh;
                        m2 += dh * hrow[i];
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    let dst = &mut gx[r * d..(r + 1) * d];
                    for i in 0..d {
                        let dh = grow[i] * gv[i];
                        dst[i] += rstd[r] * (dh - m1 - hrow[i] * m2);
                    }
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((a, &gy), &m) in gx.iter_mut().zip(g).zip(mask) {
                    *a += gy * m;
                }
            }
        }
        Op::Relu(x) => {
            let xv = value_of(*x);
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((a, &gy), &v) in gx.iter_mut().zip(g).zip(xv) {
                    if v > T::zero() {
                        *a += gy;
                    }
                }
            }
        }
        Op::Windows { x, starts } => {
            let (w, d) = (node.shape[1], node.shape[2]);
            if let Some(gx) = slot(nodes, grads, *x) {
                for (wi, &s) in starts.iter().enumerate() {
                    let src = &g[wi * w * d..(wi + 1) * w * d];
                    let dst = &mut gx[s * d..(s + w) * d];
                    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                }
            }
        }
        Op::OverlapMean { x, starts, counts } => {
            let sx = shape_of(*x);
            let (w, d) = (sx[1], sx[2]);
            if let Some(gx) = slot(nodes, grads, *x) {
                for (wi, &s) in starts.iter().enumerate() {
                    for r in 0..w {
                        let c = T::lit(counts[s + r] as f64);
                        let src = &g[(s + r) * d..(s + r + 1) * d];
                        let dst = &mut gx[(wi * w + r) * d..(wi * w + r + 1) * d];
                        dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b / c);
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
        }
        Op::PearsonLoss { pred, dpred } => {
            if let Some(gp) = slot(nodes, grads, *pred) {
                gp.iter_mut().zip(dpred).for_each(|(a, &b)| *a += g[0] * b);
            }
        }
    }
}
