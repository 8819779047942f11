use std::collections::{HashMap, HashSet};

use super::ops::Op;
use super::{gemm, MatMut, MatRef, Scalar, Tensor};
use crate::error::{DeptError, Result};

impl<T: Scalar> Tensor<T> {
    /// Reverse-mode pass from a single-element tensor. Gradients are added
    /// to the `grad` field of every gradient-tracking tensor in the graph;
    /// calling twice without zeroing accumulates.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(DeptError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = topo_order(self);
        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            if let Some(op) = node.op() {
                let out = node.values();
                backward_op(op, node.shape(), &out, &g, &mut |parent, pg| {
                    if !parent.requires_grad() {
                        return;
                    }
                    match grads.get_mut(&parent.id()) {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(pg) {
                                *a += v;
                            }
                        }
                        None => {
                            grads.insert(parent.id(), pg);
                        }
                    }
                });
            }
            node.accumulate_grad(g);
        }
        Ok(())
    }
}

/// Gradient-tracking nodes reachable from `root`, parents before children.
fn topo_order<T: Scalar>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack: Vec<(Tensor<T>, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !seen.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        if let Some(op) = node.op() {
            for p in op.parents().into_iter().rev() {
                if p.requires_grad() && !seen.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

fn backward_op<T: Scalar>(
    op: &Op<T>,
    out_shape: &[usize],
    out: &[T],
    g: &[T],
    emit: &mut dyn FnMut(&Tensor<T>, Vec<T>),
) {
    match op {
        Op::MatMul { a, b, trans_b } => {
            let q = *a.shape().last().unwrap();
            let p = a.numel() / q;
            let t = *out_shape.last().unwrap();
            let gref = MatRef::row_major(g, p, t);
            if a.requires_grad() {
                let bv = b.values();
                // dA = G · Yᵀ, with Y = B or Bᵀ.
                let y_t = if *trans_b {
                    MatRef::row_major(&bv, t, q)
                } else {
                    MatRef::row_major(&bv, q, t).t()
                };
                let mut da = vec![T::zero(); p * q];
                gemm(gref, y_t, T::zero(), MatMut::row_major(&mut da, p, q));
                emit(a, da);
            }
            if b.requires_grad() {
                let av = a.values();
                let xref = MatRef::row_major(&av, p, q);
                let mut db = vec![T::zero(); q * t];
                if *trans_b {
                    // dB = Gᵀ · X, shape [t, q].
                    gemm(gref.t(), xref, T::zero(), MatMut::row_major(&mut db, t, q));
                } else {
                    // dB = Xᵀ · G, shape [q, t].
                    gemm(xref.t(), gref, T::zero(), MatMut::row_major(&mut db, q, t));
                }
                emit(b, db);
            }
        }
        Op::Add { x, y } => {
            if y.requires_grad() {
                let block = y.numel();
                let mut dy = vec![T::zero(); block];
                for chunk in g.chunks(block) {
                    for (d, &v) in dy.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                emit(y, dy);
            }
            if x.requires_grad() {
                emit(x, g.to_vec());
            }
        }
        Op::Mul { a, b } => {
            if a.requires_grad() {
                let bv = b.values();
                emit(a, g.iter().zip(bv.iter()).map(|(&gi, &bi)| gi * bi).collect());
            }
            if b.requires_grad() {
                let av = a.values();
                emit(b, g.iter().zip(av.iter()).map(|(&gi, &ai)| gi * ai).collect());
            }
        }
        Op::Scale { x, factor } => emit(x, g.iter().map(|&v| v * *factor).collect()),
        Op::Sum { x } => emit(x, vec![g[0]; x.numel()]),
        Op::Reshape { x } => emit(x, g.to_vec()),
        Op::Map { x, deriv } => {
            let xv = x.values();
            let dx = g
                .iter()
                .zip(xv.iter().zip(out))
                .map(|(&gi, (&xi, &yi))| gi * deriv(xi, yi))
                .collect();
            emit(x, dx);
        }
        Op::Softmax { x } => {
            let n = *out_shape.last().unwrap();
            let mut dx = vec![T::zero(); g.len()];
            for ((dr, gr), pr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                let dot: T = gr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    dr[j] = pr[j] * (gr[j] - dot);
                }
            }
            emit(x, dx);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = gamma.numel();
            let rows = rstd.len();
            if gamma.requires_grad() || beta.requires_grad() {
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        let gi = g[r * d + j];
                        dg[j] += gi * xhat[r * d + j];
                        db[j] += gi;
                    }
                }
                if gamma.requires_grad() {
                    emit(gamma, dg);
                }
                if beta.requires_grad() {
                    emit(beta, db);
                }
            }
            if x.requires_grad() {
                let gv = gamma.values();
                let dn = T::of(d as f64);
                let mut dx = vec![T::zero(); g.len()];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..rows {
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..d {
                        let dh = g[r * d + j] * gv[j];
                        dxhat[j] = dh;
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[r * d + j];
                    }
                    mean_dh = mean_dh / dn;
                    mean_dh_h = mean_dh_h / dn;
                    for j in 0..d {
                        dx[r * d + j] = rstd[r] * (dxhat[j] - mean_dh - xhat[r * d + j] * mean_dh_h);
                    }
                }
                emit(x, dx);
            }
        }
        Op::IndexRows { table, ids } => {
            let d = *table.shape().last().unwrap();
            let mut dt = vec![T::zero(); table.numel()];
            for (i, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    dt[id * d + j] += g[i * d + j];
                }
            }
            emit(table, dt);
        }
        Op::PrependRows { prompt, x } => {
            let (m, d) = (prompt.shape()[0], prompt.shape()[1]);
            let (batch, n) = (x.shape()[0], x.shape()[1]);
            let stride = (m + n) * d;
            if prompt.requires_grad() {
                let mut dp = vec![T::zero(); m * d];
                for b in 0..batch {
                    for (acc, &v) in dp.iter_mut().zip(&g[b * stride..b * stride + m * d]) {
                        *acc += v;
                    }
                }
                emit(prompt, dp);
            }
            if x.requires_grad() {
                let mut dx = Vec::with_capacity(x.numel());
                for b in 0..batch {
                    dx.extend_from_slice(&g[b * stride + m * d..(b + 1) * stride]);
                }
                emit(x, dx);
            }
        }
        Op::SliceRows { x, start } => {
            let d = x.shape()[1];
            let mut dx = vec![T::zero(); x.numel()];
            dx[start * d..start * d + g.len()].copy_from_slice(g);
            emit(x, dx);
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            probs,
        } => attention_backward(q, k, v, *heads, probs, g, emit),
        Op::CrossEntropy {
            logits,
            targets,
            mask,
            probs,
            count,
        } => {
            let vocab = logits.shape()[1];
            let scale = g[0] / T::of(*count as f64);
            let mut dl = vec![T::zero(); logits.numel()];
            for (r, &keep) in mask.iter().enumerate() {
                if !keep {
                    continue;
                }
                for j in 0..vocab {
                    dl[r * vocab + j] = probs[r * vocab + j] * scale;
                }
                dl[r * vocab + targets[r]] -= scale;
            }
            emit(logits, dl);
        }
    }
}

fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    probs: &[T],
    g: &[T],
    emit: &mut dyn FnMut(&Tensor<T>, Vec<T>),
) {
    let s = q.shape();
    let (batch, n, dm) = (s[0], s[1], s[2]);
    let dh = dm / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut dq = vec![T::zero(); q.numel()];
    let mut dk = vec![T::zero(); k.numel()];
    let mut dv = vec![T::zero(); v.numel()];
    let mut dp = vec![T::zero(); n * n];
    {
        let qv = q.values();
        let kv = k.values();
        let vv = v.values();
        for b in 0..batch {
            for h in 0..heads {
                let off = b * n * dm + h * dh;
                let head = |data| MatRef { data, offset: off, rows: n, cols: dh, rs: dm, cs: 1 };
                let head_mut = |data| MatMut { data, offset: off, rows: n, cols: dh, rs: dm, cs: 1 };
                let p = &probs[(b * heads + h) * n * n..(b * heads + h + 1) * n * n];
                let pref = MatRef::row_major(p, n, n);
                let gref = head(g);
                // dV = Pᵀ · dO
                gemm(pref.t(), gref, T::zero(), head_mut(&mut dv[..]));
                // dP = dO · Vᵀ
                gemm(gref, head(&vv[..]).t(), T::zero(), MatMut::row_major(&mut dp, n, n));
                // dS = P ⊙ (dP − rowsum(P ⊙ dP)), folded with the score scale.
                for i in 0..n {
                    let pr = &p[i * n..(i + 1) * n];
                    let dr = &mut dp[i * n..(i + 1) * n];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                let ds = MatRef::row_major(&dp[..], n, n);
                // dQ = dS · K, dK = dSᵀ · Q
                gemm(ds, head(&kv[..]), T::zero(), head_mut(&mut dq[..]));
                gemm(ds.t(), head(&qv[..]), T::zero(), head_mut(&mut dk[..]));
            }
        }
    }
    // Parents may alias (self-attention on one tensor); emit each separately
    // so contributions add up.
    if q.requires_grad() {
        emit(q, dq);
    }
    if k.requires_grad() {
        emit(k, dk);
    }
    if v.requires_grad() {
        emit(v, dv);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient_and_accumulation() {
        let x = Tensor::<f64>::param(vec![3.0], &[1]).unwrap();
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![12.0]);
    }

    #[test]
    fn frozen_leaf_gets_no_grad() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let c = Tensor::<f64>::new(vec![3.0, 4.0], &[2]).unwrap();
        x.mul(&c).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, 4.0]);
        assert!(c.grad().is_none());
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(x.mul(&x).unwrap().backward(), Err(DeptError::Contract(_))));
    }

    #[test]
    fn duplicate_ids_scatter_add() {
        let table = Tensor::<f64>::param(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]).unwrap();
        let rows = Tensor::embedding_lookup(&table, &[1, 1]).unwrap();
        let w = Tensor::<f64>::new(vec![1.0, 10.0, 100.0, 1000.0], &[2, 2]).unwrap();
        rows.mul(&w).unwrap().sum().backward().unwrap();
        // Row 1 receives both gradient rows: [1+100, 10+1000].
        assert_eq!(table.grad().unwrap(), vec![0.0, 0.0, 101.0, 1010.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_backward_closed_form() {
        let a = Tensor::<f64>::param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::<f64>::param(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]).unwrap();
        a.matmul(&b).unwrap().sum().backward().unwrap();
        // dA = 1·Bᵀ (row sums of B), dB = Aᵀ·1 (column sums of A).
        assert_eq!(a.grad().unwrap(), vec![11.0, 15.0, 11.0, 15.0]);
        assert_eq!(b.grad().unwrap(), vec![4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn intermediate_tensors_receive_grads() {
        let x = Tensor::<f64>::param(vec![2.0], &[1]).unwrap();
        let y = x.scale(3.0);
        y.mul(&y).unwrap().sum().backward().unwrap();
        assert_eq!(y.grad().unwrap(), vec![12.0]);
        assert_eq!(x.grad().unwrap(), vec![36.0]);
    }
}
