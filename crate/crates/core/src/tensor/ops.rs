use super::{gemm, MatMut, MatRef, Scalar, Tensor};
use crate::error::{DeptError, Result};

/// Recorded operation: the inputs plus whatever the backward pass needs.
pub(crate) enum Op<T: Scalar> {
    /// `a[..., q] · b[q, t]`, or `a[..., q] · b[t, q]ᵀ` when `trans_b`.
    MatMul { a: Tensor<T>, b: Tensor<T>, trans_b: bool },
    /// `x + y` with `y` repeated over the leading dimensions of `x`.
    Add { x: Tensor<T>, y: Tensor<T> },
    Mul { a: Tensor<T>, b: Tensor<T> },
    Scale { x: Tensor<T>, factor: T },
    Sum { x: Tensor<T> },
    Reshape { x: Tensor<T> },
    /// Elementwise map; `deriv(input, output)` is the local derivative.
    Map { x: Tensor<T>, deriv: fn(T, T) -> T },
    Softmax { x: Tensor<T> },
    LayerNorm {
        x: Tensor<T>,
        gamma: Tensor<T>,
        beta: Tensor<T>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    IndexRows { table: Tensor<T>, ids: Vec<usize> },
    PrependRows { prompt: Tensor<T>, x: Tensor<T> },
    SliceRows { x: Tensor<T>, start: usize },
    Attention {
        q: Tensor<T>,
        k: Tensor<T>,
        v: Tensor<T>,
        heads: usize,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Tensor<T>,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
}

impl<T: Scalar> Op<T> {
    pub(crate) fn parents(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::Add { x, y } => vec![x, y],
            Op::Mul { a, b } => vec![a, b],
            Op::Scale { x, .. }
            | Op::Sum { x }
            | Op::Reshape { x }
            | Op::Map { x, .. }
            | Op::Softmax { x }
            | Op::SliceRows { x, .. } => vec![x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::IndexRows { table, .. } => vec![table],
            Op::PrependRows { prompt, x } => vec![prompt, x],
            Op::Attention { q, k, v, .. } => vec![q, k, v],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("tensors have rank >= 1")
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    let inner = c * (x + T::of(0.044715) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_deriv<T: Scalar>(x: T, _y: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    let a = T::of(0.044715);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

impl<T: Scalar> Tensor<T> {
    /// Matrix product. The left operand may carry leading batch dimensions,
    /// which are flattened into rows: `[..., q] · [q, t] -> [..., t]`.
    pub fn matmul(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.matmul_impl(b, false)
    }

    /// `self · bᵀ` for `b` of shape `[t, q]`: `[..., q] -> [..., t]`.
    pub fn matmul_t(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.matmul_impl(b, true)
    }

    fn matmul_impl(&self, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
        let name = if trans_b { "matmul_t" } else { "matmul" };
        if b.rank() != 2 {
            return Err(DeptError::shape(name, self.shape(), b.shape()));
        }
        let q = last_dim(self.shape());
        let (bq, t) = if trans_b {
            (b.shape()[1], b.shape()[0])
        } else {
            (b.shape()[0], b.shape()[1])
        };
        if q != bq {
            return Err(DeptError::shape(name, self.shape(), b.shape()));
        }
        let p = self.numel() / q;
        let mut out = vec![T::zero(); p * t];
        {
            let av = self.values();
            let bv = b.values();
            let a_ref = MatRef::row_major(&av, p, q);
            let b_ref = if trans_b {
                MatRef::row_major(&bv, t, q).t()
            } else {
                MatRef::row_major(&bv, q, t)
            };
            gemm(a_ref, b_ref, T::zero(), MatMut::row_major(&mut out, p, t));
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = t;
        Ok(Tensor::from_op(
            out,
            shape,
            Op::MatMul {
                a: self.clone(),
                b: b.clone(),
                trans_b,
            },
        ))
    }

    /// Elementwise sum. `y` may match `x` exactly or match its trailing
    /// dimensions (a bias row, or a per-position block shared over a batch).
    pub fn add(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let xs = self.shape();
        let ys = y.shape();
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(DeptError::shape("add", xs, ys));
        }
        let block = y.numel();
        let mut out = self.to_vec();
        {
            let yv = y.values();
            for chunk in out.chunks_mut(block) {
                for (o, &v) in chunk.iter_mut().zip(yv.iter()) {
                    *o += v;
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            xs.to_vec(),
            Op::Add {
                x: self.clone(),
                y: y.clone(),
            },
        ))
    }

    pub fn mul(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != b.shape() {
            return Err(DeptError::shape("mul", self.shape(), b.shape()));
        }
        let out = {
            let av = self.values();
            let bv = b.values();
            av.iter().zip(bv.iter()).map(|(&x, &y)| x * y).collect()
        };
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Mul {
                a: self.clone(),
                b: b.clone(),
            },
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor<T> {
        let f = T::of(factor);
        let out = self.values().iter().map(|&v| v * f).collect();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Scale {
                x: self.clone(),
                factor: f,
            },
        )
    }

    pub fn sum(&self) -> Tensor<T> {
        let s = self.values().iter().copied().sum();
        Tensor::from_op(vec![s], vec![1], Op::Sum { x: self.clone() })
    }

    pub fn mean(&self) -> Tensor<T> {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.contains(&0) {
            return Err(DeptError::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            Op::Reshape { x: self.clone() },
        ))
    }

    /// Elementwise `f`, with `deriv(input, output)` as its derivative.
    pub fn map(&self, f: fn(T) -> T, deriv: fn(T, T) -> T) -> Tensor<T> {
        let out = self.values().iter().map(|&v| f(v)).collect();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Map {
                x: self.clone(),
                deriv,
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor<T> {
        self.map(gelu, gelu_deriv)
    }

    /// Softmax over the last axis, stabilised by subtracting the row max.
    pub fn softmax(&self) -> Tensor<T> {
        let n = last_dim(self.shape());
        let mut out = self.to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        Tensor::from_op(out, self.shape().to_vec(), Op::Softmax { x: self.clone() })
    }

    /// Normalise each row of the last axis to zero mean and unit (biased)
    /// variance, then apply `gamma` and `beta`.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let d = last_dim(self.shape());
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(DeptError::shape("layer_norm", self.shape(), gamma.shape()));
        }
        if eps <= 0.0 {
            return Err(DeptError::Contract("layer_norm eps must be > 0".into()));
        }
        let eps = T::of(eps);
        let dn = T::of(d as f64);
        let rows = self.numel() / d;
        let mut xhat = vec![T::zero(); self.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); self.numel()];
        {
            let xv = self.values();
            let gv = gamma.values();
            let bv = beta.values();
            for r in 0..rows {
                let row = &xv[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<T>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                let rs = T::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let h = (row[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * gv[j] + bv[j];
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                rstd,
            },
        ))
    }

    /// Gather rows of `self` viewed as `[rows, last_dim]`. The backward pass
    /// scatter-adds into the source rows.
    pub fn index_rows(&self, ids: &[usize]) -> Result<Tensor<T>> {
        let d = last_dim(self.shape());
        let rows = self.numel() / d;
        if ids.is_empty() {
            return Err(DeptError::Degenerate("index_rows with no ids".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        {
            let tv = self.values();
            for &id in ids {
                if id >= rows {
                    return Err(DeptError::Index {
                        index: id,
                        bound: rows,
                    });
                }
                out.extend_from_slice(&tv[id * d..(id + 1) * d]);
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![ids.len(), d],
            Op::IndexRows {
                table: self.clone(),
                ids: ids.to_vec(),
            },
        ))
    }

    /// Row lookup into an embedding table `[V, d]`.
    pub fn embedding_lookup(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
        if table.rank() != 2 {
            return Err(DeptError::shape("embedding_lookup", table.shape(), &[ids.len()]));
        }
        table.index_rows(ids)
    }

    /// `[m, d]` prompt prepended to every sequence of `x: [B, n, d]`.
    pub fn prepend_rows(prompt: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let ps = prompt.shape();
        let xs = x.shape();
        if ps.len() != 2 || xs.len() != 3 || ps[1] != xs[2] {
            return Err(DeptError::shape("prepend_rows", ps, xs));
        }
        let (m, d) = (ps[0], ps[1]);
        let (batch, n) = (xs[0], xs[1]);
        let mut out = Vec::with_capacity(batch * (m + n) * d);
        {
            let pv = prompt.values();
            let xv = x.values();
            for b in 0..batch {
                out.extend_from_slice(&pv);
                out.extend_from_slice(&xv[b * n * d..(b + 1) * n * d]);
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![batch, m + n, d],
            Op::PrependRows {
                prompt: prompt.clone(),
                x: x.clone(),
            },
        ))
    }

    /// Rows `start..start+len` of a `[R, d]` matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        if self.rank() != 2 || len == 0 || start + len > self.shape()[0] {
            return Err(DeptError::shape("slice_rows", self.shape(), &[start, len]));
        }
        let d = self.shape()[1];
        let out = self.values()[start * d..(start + len) * d].to_vec();
        Ok(Tensor::from_op(
            out,
            vec![len, d],
            Op::SliceRows {
                x: self.clone(),
                start,
            },
        ))
    }

    /// Causal multi-head scaled dot-product attention over `[B, n, D]`
    /// projections. `key_mask` (length `B·n`, true = attendable) hides
    /// padding; a query with no attendable key produces zeros.
    pub fn attention(
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        heads: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Tensor<T>> {
        let s = q.shape();
        if s.len() != 3 || k.shape() != s || v.shape() != s {
            return Err(DeptError::shape("attention", s, k.shape()));
        }
        let (batch, n, dm) = (s[0], s[1], s[2]);
        if heads == 0 || dm % heads != 0 {
            return Err(DeptError::Contract(format!(
                "model width {dm} not divisible by {heads} heads"
            )));
        }
        if let Some(mask) = key_mask {
            if mask.len() != batch * n {
                return Err(DeptError::shape("attention mask", s, &[mask.len()]));
            }
        }
        let dh = dm / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); batch * heads * n * n];
        let mut out = vec![T::zero(); batch * n * dm];
        {
            let qv = q.values();
            let kv = k.values();
            let vv = v.values();
            let mut scores = vec![T::zero(); n * n];
            for b in 0..batch {
                let base = b * n * dm;
                for h in 0..heads {
                    let off = base + h * dh;
                    let qh = MatRef { data: &qv[..], offset: off, rows: n, cols: dh, rs: dm, cs: 1 };
                    let kh = MatRef { data: &kv[..], offset: off, rows: n, cols: dh, rs: dm, cs: 1 };
                    gemm(qh, kh.t(), T::zero(), MatMut::row_major(&mut scores, n, n));
                    let p = &mut probs[(b * heads + h) * n * n..(b * heads + h + 1) * n * n];
                    for i in 0..n {
                        let row = &scores[i * n..(i + 1) * n];
                        let prow = &mut p[i * n..(i + 1) * n];
                        let valid = |j: usize| key_mask.is_none_or(|m| m[b * n + j]);
                        let mut max = T::neg_infinity();
                        for j in 0..=i {
                            if valid(j) && row[j] * scale > max {
                                max = row[j] * scale;
                            }
                        }
                        if max == T::neg_infinity() {
                            continue;
                        }
                        let mut total = T::zero();
                        for j in 0..=i {
                            if valid(j) {
                                let e = (row[j] * scale - max).exp();
                                prow[j] = e;
                                total += e;
                            }
                        }
                        for pj in prow[..=i].iter_mut() {
                            *pj = *pj / total;
                        }
                    }
                    let ph = MatRef::row_major(&p[..], n, n);
                    let vh = MatRef { data: &vv[..], offset: off, rows: n, cols: dh, rs: dm, cs: 1 };
                    let oh = MatMut { data: &mut out[..], offset: off, rows: n, cols: dh, rs: dm, cs: 1 };
                    gemm(ph, vh, T::zero(), oh);
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            s.to_vec(),
            Op::Attention {
                q: q.clone(),
                k: k.clone(),
                v: v.clone(),
                heads,
                probs,
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits: [N, V]`, over the rows where `mask` is true.
    pub fn cross_entropy(logits: &Tensor<T>, targets: &[usize], mask: &[bool]) -> Result<Tensor<T>> {
        if logits.rank() != 2 {
            return Err(DeptError::shape("cross_entropy", logits.shape(), &[targets.len()]));
        }
        let (rows, vocab) = (logits.shape()[0], logits.shape()[1]);
        if targets.len() != rows || mask.len() != rows {
            return Err(DeptError::shape("cross_entropy", logits.shape(), &[targets.len(), mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(DeptError::Degenerate("every position is masked".into()));
        }
        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = T::zero();
        {
            let lv = logits.values();
            for r in 0..rows {
                if !mask[r] {
                    continue;
                }
                let t = targets[r];
                if t >= vocab {
                    return Err(DeptError::Index { index: t, bound: vocab });
                }
                let row = &lv[r * vocab..(r + 1) * vocab];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
                let lse = max + sum.ln();
                total += lse - row[t];
                for (p, &x) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                    *p = (x - lse).exp();
                }
            }
        }
        let loss = total / T::of(count as f64);
        Ok(Tensor::from_op(
            vec![loss],
            vec![1],
            Op::CrossEntropy {
                logits: logits.clone(),
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        ))
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}
