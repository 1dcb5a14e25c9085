//! Reverse-mode gradient propagation.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::ops::{gelu_grad, permute_data, Op};
use super::Tensor;

/// Gradients keyed by tensor id, as returned by [`Tensor::backward`]. Only
/// tensors with `requires_grad` appear here.
pub struct Gradients<S: Scalar> {
    map: HashMap<u64, Vec<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, t: &Tensor<S>) -> Option<&[S]> {
        self.map.get(&t.id()).map(|v| v.as_slice())
    }

    pub fn contains(&self, t: &Tensor<S>) -> bool {
        self.map.contains_key(&t.id())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Topological order over the recorded graph: inputs before outputs.
fn topo_order<S: Scalar>(root: &Tensor<S>) -> Vec<Tensor<S>> {
    let mut visited: HashSet<u64> = HashSet::new();
    let mut order = Vec::new();
    let mut stack: Vec<(Tensor<S>, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        if let Some(op) = node.op() {
            for parent in op.parents() {
                if parent.tracked() && !visited.contains(&parent.id()) {
                    stack.push((parent.clone(), false));
                }
            }
        }
    }
    order
}

fn add_into<S: Scalar>(acc: &mut Vec<S>, g: &[S]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

struct GradBuf<S: Scalar> {
    map: HashMap<u64, Vec<S>>,
}

impl<S: Scalar> GradBuf<S> {
    fn push(&mut self, t: &Tensor<S>, g: Vec<S>) {
        if !t.tracked() {
            return;
        }
        match self.map.get_mut(&t.id()) {
            Some(acc) => add_into(acc, &g),
            None => {
                self.map.insert(t.id(), g);
            }
        }
    }
}

impl<S: Scalar> Tensor<S> {
    /// Propagate gradients of this scalar back through the recorded graph.
    ///
    /// Every reachable tensor with `requires_grad` ends up with its full
    /// chain-rule gradient both in its `grad` slot and in the returned map;
    /// frozen tensors are left untouched.
    pub fn backward(&self) -> Result<Gradients<S>> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar root, got shape {:?}",
                self.shape()
            )));
        }
        let order = topo_order(self);
        let mut buf = GradBuf {
            map: HashMap::new(),
        };
        buf.map.insert(self.id(), vec![S::one()]);
        let mut result: HashMap<u64, Vec<S>> = HashMap::new();

        for node in order.iter().rev() {
            let Some(g) = buf.map.remove(&node.id()) else {
                continue;
            };
            if node.requires_grad() {
                node.accumulate_grad(&g);
                match result.get_mut(&node.id()) {
                    Some(acc) => add_into(acc, &g),
                    None => {
                        result.insert(node.id(), g.clone());
                    }
                }
            }
            let Some(op) = node.op() else { continue };
            backprop_op(op, node, &g, &mut buf);
        }

        Ok(Gradients { map: result })
    }
}

fn backprop_op<S: Scalar>(op: &Op<S>, node: &Tensor<S>, g: &[S], buf: &mut GradBuf<S>) {
    match op {
        Op::Add(a, b) => {
            buf.push(a, g.to_vec());
            buf.push(b, g.to_vec());
        }
        Op::Sub(a, b) => {
            buf.push(a, g.to_vec());
            buf.push(b, g.iter().map(|&v| -v).collect());
        }
        Op::Mul(a, b) => {
            if a.tracked() {
                let bd = b.data();
                buf.push(a, g.iter().zip(bd.iter()).map(|(&x, &y)| x * y).collect());
            }
            if b.tracked() {
                let ad = a.data();
                buf.push(b, g.iter().zip(ad.iter()).map(|(&x, &y)| x * y).collect());
            }
        }
        Op::Scale(x, c) => {
            buf.push(x, g.iter().map(|&v| v * *c).collect());
        }
        Op::BroadcastAdd(x, y) => {
            buf.push(x, g.to_vec());
            if y.tracked() {
                let ny = y.numel();
                let mut dy = vec![S::zero(); ny];
                for (i, &v) in g.iter().enumerate() {
                    dy[i % ny] += v;
                }
                buf.push(y, dy);
            }
        }
        Op::Matmul(a, b) => {
            let r = a.rank();
            let (m, k) = (a.shape()[r - 2], a.shape()[r - 1]);
            let n = b.shape()[r - 1];
            let batch: usize = a.shape()[..r - 2].iter().product();
            if a.tracked() {
                // dA[i, k] = sum_j G[i, j] * B[k, j]
                let bd = b.data();
                let mut da = vec![S::zero(); a.numel()];
                for bi in 0..batch {
                    let gb = &g[bi * m * n..(bi + 1) * m * n];
                    let bb = &bd[bi * k * n..(bi + 1) * k * n];
                    let dab = &mut da[bi * m * k..(bi + 1) * m * k];
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = S::zero();
                            let g_row = &gb[i * n..(i + 1) * n];
                            let b_row = &bb[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                acc += g_row[j] * b_row[j];
                            }
                            dab[i * k + kk] = acc;
                        }
                    }
                }
                buf.push(a, da);
            }
            if b.tracked() {
                // dB[k, j] = sum_i A[i, k] * G[i, j]
                let ad = a.data();
                let mut db = vec![S::zero(); b.numel()];
                for bi in 0..batch {
                    let gb = &g[bi * m * n..(bi + 1) * m * n];
                    let ab = &ad[bi * m * k..(bi + 1) * m * k];
                    let dbb = &mut db[bi * k * n..(bi + 1) * k * n];
                    for i in 0..m {
                        let a_row = &ab[i * k..(i + 1) * k];
                        let g_row = &gb[i * n..(i + 1) * n];
                        for (kk, &a_ik) in a_row.iter().enumerate() {
                            let db_row = &mut dbb[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                db_row[j] += a_ik * g_row[j];
                            }
                        }
                    }
                }
                buf.push(b, db);
            }
        }
        Op::Permute { x, perm } => {
            let mut inverse = vec![0usize; perm.len()];
            for (d, &p) in perm.iter().enumerate() {
                inverse[p] = d;
            }
            let (_, dx) = permute_data(g, node.shape(), &inverse);
            buf.push(x, dx);
        }
        Op::Reshape(x) => {
            buf.push(x, g.to_vec());
        }
        Op::Narrow { x, axis, start } => {
            let shape = x.shape();
            let outer: usize = shape[..*axis].iter().product();
            let mid = shape[*axis];
            let inner: usize = shape[*axis + 1..].iter().product();
            let len = node.shape()[*axis];
            let mut dx = vec![S::zero(); x.numel()];
            for o in 0..outer {
                let dst = (o * mid + start) * inner;
                let src = o * len * inner;
                dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            buf.push(x, dx);
        }
        Op::GatherPositions { x, positions } => {
            let (l, d) = (x.shape()[1], x.shape()[2]);
            let mut dx = vec![S::zero(); x.numel()];
            for (bi, &p) in positions.iter().enumerate() {
                let dst = (bi * l + p) * d;
                add_into_slice(&mut dx[dst..dst + d], &g[bi * d..(bi + 1) * d]);
            }
            buf.push(x, dx);
        }
        Op::Gelu(x) => {
            let xd = x.data();
            buf.push(
                x,
                g.iter()
                    .zip(xd.iter())
                    .map(|(&gv, &xv)| gv * gelu_grad(xv))
                    .collect(),
            );
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = *x.shape().last().expect("layer_norm input has rank >= 1");
            let rows = x.numel() / d;
            let gd = gamma.data();
            let dn = S::from_f64(d as f64);
            if gamma.tracked() {
                let mut dgamma = vec![S::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        dgamma[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
                buf.push(gamma, dgamma);
            }
            if beta.tracked() {
                let mut dbeta = vec![S::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        dbeta[j] += g[r * d + j];
                    }
                }
                buf.push(beta, dbeta);
            }
            if x.tracked() {
                let mut dx = vec![S::zero(); x.numel()];
                for r in 0..rows {
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    for j in 0..d {
                        let dy = g[r * d + j] * gd[j];
                        m1 += dy;
                        m2 += dy * xhat[r * d + j];
                    }
                    m1 = m1 / dn;
                    m2 = m2 / dn;
                    for j in 0..d {
                        let dy = g[r * d + j] * gd[j];
                        dx[r * d + j] = (dy - m1 - xhat[r * d + j] * m2) * rstd[r];
                    }
                }
                buf.push(x, dx);
            }
        }
        Op::Embedding { table, ids } => {
            if table.tracked() {
                let d = table.shape()[1];
                let mut dt = vec![S::zero(); table.numel()];
                for (i, &id) in ids.iter().enumerate() {
                    add_into_slice(&mut dt[id * d..(id + 1) * d], &g[i * d..(i + 1) * d]);
                }
                buf.push(table, dt);
            }
        }
        Op::SoftmaxTemp { z, t } => {
            let y = node.data();
            let d = *node.shape().last().expect("softmax input has rank >= 1");
            let rows = y.len() / d;
            let mut dz = vec![S::zero(); y.len()];
            for r in 0..rows {
                let mut dot = S::zero();
                for j in 0..d {
                    dot += g[r * d + j] * y[r * d + j];
                }
                for j in 0..d {
                    dz[r * d + j] = y[r * d + j] * (g[r * d + j] - dot) / *t;
                }
            }
            buf.push(z, dz);
        }
        Op::LogSoftmax(z) => {
            let y = node.data();
            let d = *node.shape().last().expect("log_softmax input has rank >= 1");
            let rows = y.len() / d;
            let mut dz = vec![S::zero(); y.len()];
            for r in 0..rows {
                let mut gsum = S::zero();
                for j in 0..d {
                    gsum += g[r * d + j];
                }
                for j in 0..d {
                    dz[r * d + j] = g[r * d + j] - y[r * d + j].exp() * gsum;
                }
            }
            buf.push(z, dz);
        }
        Op::CausalMask(x) => {
            buf.push(x, g.to_vec());
        }
        Op::Dropout { x, mask } => {
            buf.push(
                x,
                g.iter().zip(mask.iter()).map(|(&gv, &m)| gv * m).collect(),
            );
        }
        Op::Mse(a, b) => {
            let g0 = g[0];
            let c = S::from_f64(2.0 / a.numel() as f64) * g0;
            let ad = a.data();
            let bd = b.data();
            if a.tracked() {
                buf.push(
                    a,
                    ad.iter()
                        .zip(bd.iter())
                        .map(|(&x, &y)| c * (x - y))
                        .collect(),
                );
            }
            if b.tracked() {
                buf.push(
                    b,
                    ad.iter()
                        .zip(bd.iter())
                        .map(|(&x, &y)| -c * (x - y))
                        .collect(),
                );
            }
        }
        Op::KlDiv { p, q, eps } => {
            let g0 = g[0];
            let d = *p.shape().last().expect("kl_div input has rank >= 1");
            let rows = p.numel() / d;
            let rn = S::from_f64(rows as f64);
            let pd = p.data();
            let qd = q.data();
            if q.tracked() {
                let mut dq = vec![S::zero(); q.numel()];
                for i in 0..dq.len() {
                    // Clamped entries sit on the flat part of max(q, eps).
                    if qd[i] >= *eps {
                        dq[i] = -g0 * pd[i] / qd[i] / rn;
                    }
                }
                buf.push(q, dq);
            }
            if p.tracked() {
                let mut dp = vec![S::zero(); p.numel()];
                for i in 0..dp.len() {
                    let pi = pd[i].max(*eps);
                    let qi = qd[i].max(*eps);
                    dp[i] = g0 * ((pi / qi).ln() + S::one()) / rn;
                }
                buf.push(p, dp);
            }
        }
        Op::CrossEntropy { logits, labels } => {
            if logits.tracked() {
                let g0 = g[0];
                let v = logits.shape()[1];
                let n = labels.len();
                let nn = S::from_f64(n as f64);
                let z = logits.data();
                let mut dz = vec![S::zero(); logits.numel()];
                for (i, &label) in labels.iter().enumerate() {
                    let row = &z[i * v..(i + 1) * v];
                    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                    let mut sum = S::zero();
                    for j in 0..v {
                        let e = (row[j] - max).exp();
                        dz[i * v + j] = e;
                        sum += e;
                    }
                    for j in 0..v {
                        let smax = dz[i * v + j] / sum;
                        let hot = if j == label { S::one() } else { S::zero() };
                        dz[i * v + j] = g0 * (smax - hot) / nn;
                    }
                }
                buf.push(logits, dz);
            }
        }
        Op::Sum(x) => {
            buf.push(x, vec![g[0]; x.numel()]);
        }
        Op::Mean(x) => {
            let c = g[0] / S::from_f64(x.numel() as f64);
            buf.push(x, vec![c; x.numel()]);
        }
    }
}

fn add_into_slice<S: Scalar>(acc: &mut [S], g: &[S]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}
