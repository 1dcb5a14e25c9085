//! Forward implementations of every differentiable op, plus the op record
//! consumed by the backward pass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{numel_of, Tensor};

/// Additive constant used to blank out future positions before a softmax.
const MASK_NEG: f64 = -1e9;

/// Default epsilon clamp inside logarithms.
pub const KL_EPS: f64 = 1e-9;

pub(crate) enum Op<S: Scalar> {
    Add(Tensor<S>, Tensor<S>),
    Sub(Tensor<S>, Tensor<S>),
    Mul(Tensor<S>, Tensor<S>),
    Scale(Tensor<S>, S),
    BroadcastAdd(Tensor<S>, Tensor<S>),
    Matmul(Tensor<S>, Tensor<S>),
    Permute { x: Tensor<S>, perm: Vec<usize> },
    Reshape(Tensor<S>),
    Narrow { x: Tensor<S>, axis: usize, start: usize },
    GatherPositions { x: Tensor<S>, positions: Vec<usize> },
    Gelu(Tensor<S>),
    LayerNorm { x: Tensor<S>, gamma: Tensor<S>, beta: Tensor<S>, xhat: Vec<S>, rstd: Vec<S> },
    Embedding { table: Tensor<S>, ids: Vec<usize> },
    SoftmaxTemp { z: Tensor<S>, t: S },
    LogSoftmax(Tensor<S>),
    CausalMask(Tensor<S>),
    Dropout { x: Tensor<S>, mask: Vec<S> },
    Mse(Tensor<S>, Tensor<S>),
    KlDiv { p: Tensor<S>, q: Tensor<S>, eps: S },
    CrossEntropy { logits: Tensor<S>, labels: Vec<usize> },
    Sum(Tensor<S>),
    Mean(Tensor<S>),
}

impl<S: Scalar> Op<S> {
    pub(crate) fn parents(&self) -> Vec<&Tensor<S>> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Mse(a, b) => vec![a, b],
            Op::BroadcastAdd(x, y) => vec![x, y],
            Op::Matmul(a, b) => vec![a, b],
            Op::Scale(x, _)
            | Op::Permute { x, .. }
            | Op::Reshape(x)
            | Op::Narrow { x, .. }
            | Op::GatherPositions { x, .. }
            | Op::Gelu(x)
            | Op::CausalMask(x)
            | Op::Dropout { x, .. }
            | Op::LogSoftmax(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Embedding { table, .. } => vec![table],
            Op::SoftmaxTemp { z, .. } => vec![z],
            Op::KlDiv { p, q, .. } => vec![p, q],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

fn build<S: Scalar>(shape: Vec<usize>, data: Vec<S>, op: Op<S>) -> Tensor<S> {
    let tracked = op.parents().iter().any(|p| p.tracked());
    Tensor::make(shape, data, if tracked { Some(op) } else { None })
}

fn check_same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dim {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn matmul_2d<S: Scalar>(
    a: &[S],
    b: &[S],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [S],
) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                out_row[j] += a_ik * b_row[j];
            }
        }
    }
}

pub(crate) fn permute_data<S: Scalar>(
    data: &[S],
    shape: &[usize],
    perm: &[usize],
) -> (Vec<usize>, Vec<S>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let mut out = vec![S::zero(); data.len()];
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut in_flat = 0;
        for d in 0..rank {
            in_flat += idx[d] * in_strides[perm[d]];
        }
        *slot = data[in_flat];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        check_same_shape("add", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(build(
            self.shape().to_vec(),
            data,
            Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        check_same_shape("sub", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(build(
            self.shape().to_vec(),
            data,
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        check_same_shape("mul", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(build(
            self.shape().to_vec(),
            data,
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor<S> {
        let c = S::from_f64(factor);
        let data = self.data().iter().map(|&a| a * c).collect();
        build(self.shape().to_vec(), data, Op::Scale(self.clone(), c))
    }

    /// Add `other` to `self`, broadcasting `other` over the leading axes.
    /// `other.shape()` must be a suffix of `self.shape()`; typical uses are
    /// a bias [d] over [b, l, d] or a positional table [l, d] over [b, l, d].
    pub fn broadcast_add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (xs, ys) = (self.shape(), other.shape());
        if ys.len() > xs.len() || &xs[xs.len() - ys.len()..] != ys {
            return Err(Error::Dim {
                op: "broadcast_add",
                lhs: xs.to_vec(),
                rhs: ys.to_vec(),
            });
        }
        let y = other.data();
        let ny = y.len().max(1);
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a + y[i % ny])
            .collect();
        Ok(build(
            xs.to_vec(),
            data,
            Op::BroadcastAdd(self.clone(), other.clone()),
        ))
    }

    /// Matrix product over the trailing two axes. Inputs of rank > 2 are
    /// treated as stacks of matrices; batch axes must agree exactly.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (xs, ys) = (self.shape(), other.shape());
        let mismatch = || Error::Dim {
            op: "matmul",
            lhs: xs.to_vec(),
            rhs: ys.to_vec(),
        };
        if xs.len() < 2 || ys.len() != xs.len() {
            return Err(mismatch());
        }
        let r = xs.len();
        if xs[..r - 2] != ys[..r - 2] || xs[r - 1] != ys[r - 2] {
            return Err(mismatch());
        }
        let (m, k, n) = (xs[r - 2], xs[r - 1], ys[r - 1]);
        let batch: usize = xs[..r - 2].iter().product();
        let mut out_shape = xs[..r - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let mut data = vec![S::zero(); batch * m * n];
        {
            let a = self.data();
            let b = other.data();
            for bi in 0..batch {
                matmul_2d(
                    &a[bi * m * k..(bi + 1) * m * k],
                    &b[bi * k * n..(bi + 1) * k * n],
                    m,
                    k,
                    n,
                    &mut data[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        Ok(build(
            out_shape,
            data,
            Op::Matmul(self.clone(), other.clone()),
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<S>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Param(format!(
                "permute: {:?} is not a permutation of {} axes",
                perm, rank
            )));
        }
        let (out_shape, data) = permute_data(&self.data(), self.shape(), perm);
        Ok(build(
            out_shape,
            data,
            Op::Permute {
                x: self.clone(),
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swap two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<S>> {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(Error::Param(format!(
                "transpose: axes ({a}, {b}) out of range for rank {}",
                self.rank()
            )));
        }
        perm.swap(a, b);
        self.permute(&perm)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        if numel_of(shape) != self.numel() {
            return Err(Error::Dim {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(build(
            shape.to_vec(),
            self.to_vec(),
            Op::Reshape(self.clone()),
        ))
    }

    /// Contiguous slice of length `len` starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<S>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::Param(format!(
                "narrow: axis {axis} range {start}..{} invalid for shape {:?}",
                start + len,
                shape
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![S::zero(); outer * len * inner];
        {
            let x = self.data();
            for o in 0..outer {
                let src = (o * mid + start) * inner;
                let dst = o * len * inner;
                data[dst..dst + len * inner].copy_from_slice(&x[src..src + len * inner]);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Ok(build(
            out_shape,
            data,
            Op::Narrow {
                x: self.clone(),
                axis,
                start,
            },
        ))
    }

    /// From a [b, l, d] tensor, pick one sequence position per batch row,
    /// producing [b, d]. Used for pooled classifier heads.
    pub fn gather_positions(&self, positions: &[usize]) -> Result<Tensor<S>> {
        let shape = self.shape();
        if shape.len() != 3 {
            return Err(Error::Param(format!(
                "gather_positions: expected rank 3, got shape {:?}",
                shape
            )));
        }
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        if positions.len() != b {
            return Err(Error::Param(format!(
                "gather_positions: {} positions for batch {b}",
                positions.len()
            )));
        }
        if let Some(&bad) = positions.iter().find(|&&p| p >= l) {
            return Err(Error::Index(format!(
                "gather_positions: position {bad} out of range for length {l}"
            )));
        }
        let mut data = vec![S::zero(); b * d];
        {
            let x = self.data();
            for (bi, &p) in positions.iter().enumerate() {
                data[bi * d..(bi + 1) * d].copy_from_slice(&x[(bi * l + p) * d..(bi * l + p) * d + d]);
            }
        }
        Ok(build(
            vec![b, d],
            data,
            Op::GatherPositions {
                x: self.clone(),
                positions: positions.to_vec(),
            },
        ))
    }

    /// GeLU with the tanh approximation:
    /// 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3))).
    pub fn gelu(&self) -> Tensor<S> {
        let data = self.data().iter().map(|&x| gelu_forward(x)).collect();
        build(self.shape().to_vec(), data, Op::Gelu(self.clone()))
    }

    /// Layer normalization over the last axis with learnable gain and shift.
    pub fn layer_norm(&self, gamma: &Tensor<S>, beta: &Tensor<S>, eps: f64) -> Result<Tensor<S>> {
        let shape = self.shape();
        let d = *shape.last().ok_or_else(|| {
            Error::Param("layer_norm: rank-0 input".to_string())
        })?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::Dim {
                op: "layer_norm",
                lhs: shape.to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let rows = self.numel() / d;
        let eps = S::from_f64(eps);
        let mut out = vec![S::zero(); self.numel()];
        let mut xhat = vec![S::zero(); self.numel()];
        let mut rstd = vec![S::zero(); rows];
        {
            let x = self.data();
            let g = gamma.data();
            let bta = beta.data();
            let dn = S::from_f64(d as f64);
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<S>() / dn;
                let var = row
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<S>()
                    / dn;
                let rs = S::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let xh = (row[j] - mean) * rs;
                    xhat[r * d + j] = xh;
                    out[r * d + j] = g[j] * xh + bta[j];
                }
            }
        }
        Ok(build(
            shape.to_vec(),
            out,
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                rstd,
            },
        ))
    }

    /// Row lookup into an embedding table [v, d]. `prefix` is the leading
    /// shape of the id array, so the result is [..prefix, d]. The gradient
    /// scatter-adds rows back into the table.
    pub fn embedding(&self, ids: &[u32], prefix: &[usize]) -> Result<Tensor<S>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::Param(format!(
                "embedding: table must be rank 2, got {:?}",
                shape
            )));
        }
        let (v, d) = (shape[0], shape[1]);
        if numel_of(prefix) != ids.len() {
            return Err(Error::Param(format!(
                "embedding: {} ids do not fill prefix {:?}",
                ids.len(),
                prefix
            )));
        }
        let mut resolved = Vec::with_capacity(ids.len());
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(Error::Index(format!(
                    "embedding: token id {id} out of range for vocab {v}"
                )));
            }
            resolved.push(id);
        }
        let mut data = vec![S::zero(); ids.len() * d];
        {
            let table = self.data();
            for (i, &id) in resolved.iter().enumerate() {
                data[i * d..(i + 1) * d].copy_from_slice(&table[id * d..(id + 1) * d]);
            }
        }
        let mut out_shape = prefix.to_vec();
        out_shape.push(d);
        Ok(build(
            out_shape,
            data,
            Op::Embedding {
                table: self.clone(),
                ids: resolved,
            },
        ))
    }

    /// Temperature softmax along the last axis, stabilized by max
    /// subtraction: out_i = exp(z_i / t) / sum_j exp(z_j / t).
    pub fn softmax_temp(&self, t: f64) -> Result<Tensor<S>> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::Param(format!(
                "softmax_temp: temperature must be positive and finite, got {t}"
            )));
        }
        let d = *self
            .shape()
            .last()
            .ok_or_else(|| Error::Param("softmax_temp: rank-0 input".to_string()))?;
        let ts = S::from_f64(t);
        let rows = self.numel() / d;
        let mut out = vec![S::zero(); self.numel()];
        {
            let z = self.data();
            for r in 0..rows {
                let row = &z[r * d..(r + 1) * d];
                let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                let mut sum = S::zero();
                for j in 0..d {
                    let e = ((row[j] - max) / ts).exp();
                    out[r * d + j] = e;
                    sum += e;
                }
                for j in 0..d {
                    out[r * d + j] = out[r * d + j] / sum;
                }
            }
        }
        Ok(build(
            self.shape().to_vec(),
            out,
            Op::SoftmaxTemp {
                z: self.clone(),
                t: ts,
            },
        ))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&self) -> Result<Tensor<S>> {
        let d = *self
            .shape()
            .last()
            .ok_or_else(|| Error::Param("log_softmax: rank-0 input".to_string()))?;
        let rows = self.numel() / d;
        let mut out = vec![S::zero(); self.numel()];
        {
            let z = self.data();
            for r in 0..rows {
                let row = &z[r * d..(r + 1) * d];
                let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                let lse = row
                    .iter()
                    .map(|&v| (v - max).exp())
                    .sum::<S>()
                    .ln()
                    + max;
                for j in 0..d {
                    out[r * d + j] = row[j] - lse;
                }
            }
        }
        Ok(build(
            self.shape().to_vec(),
            out,
            Op::LogSoftmax(self.clone()),
        ))
    }

    /// Add a large negative constant to entries above the main diagonal of
    /// the trailing [l, l] axes, so a following softmax zeroes attention to
    /// future positions.
    pub fn apply_causal_mask(&self) -> Result<Tensor<S>> {
        let shape = self.shape();
        if shape.len() < 2 || shape[shape.len() - 1] != shape[shape.len() - 2] {
            return Err(Error::Param(format!(
                "apply_causal_mask: trailing axes must be square, got {:?}",
                shape
            )));
        }
        let l = shape[shape.len() - 1];
        let neg = S::from_f64(MASK_NEG);
        let mut data = self.to_vec();
        for block in data.chunks_mut(l * l) {
            for i in 0..l {
                for j in (i + 1)..l {
                    block[i * l + j] += neg;
                }
            }
        }
        Ok(build(
            shape.to_vec(),
            data,
            Op::CausalMask(self.clone()),
        ))
    }

    /// Inverted dropout. Keeps each element with probability 1 - rate and
    /// rescales by 1 / (1 - rate); a rate of 0 never draws from the rng.
    pub fn dropout(&self, rate: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<S>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Param(format!(
                "dropout: rate must be in [0, 1), got {rate}"
            )));
        }
        if rate == 0.0 {
            return Ok(self.scale(1.0));
        }
        let keep = S::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<S> = (0..self.numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = self
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&a, &m)| a * m)
            .collect();
        Ok(build(
            self.shape().to_vec(),
            data,
            Op::Dropout {
                x: self.clone(),
                mask,
            },
        ))
    }

    /// Mean over all elements of the squared difference.
    pub fn mse(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        check_same_shape("mse", self, other)?;
        let n = S::from_f64(self.numel() as f64);
        let val = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<S>()
            / n;
        Ok(build(
            Vec::new(),
            vec![val],
            Op::Mse(self.clone(), other.clone()),
        ))
    }

    /// KL(p || q) along the last axis, averaged over rows. Both inputs must
    /// be row-stochastic; q entries below `eps` are clamped inside the log.
    pub fn kl_div_eps(&self, q: &Tensor<S>, eps: f64) -> Result<Tensor<S>> {
        check_same_shape("kl_div", self, q)?;
        let d = *self
            .shape()
            .last()
            .ok_or_else(|| Error::Param("kl_div: rank-0 input".to_string()))?;
        let rows = self.numel() / d;
        let epss = S::from_f64(eps);
        let tol = S::from_f64(1e-6);
        let mut total = S::zero();
        {
            let p = self.data();
            let qd = q.data();
            for (name, t) in [("p", &*p), ("q", &*qd)] {
                for r in 0..rows {
                    let row = &t[r * d..(r + 1) * d];
                    if let Some(&bad) = row.iter().find(|&&v| v < S::zero()) {
                        return Err(Error::Validation(format!(
                            "kl_div: negative entry {bad} in {name} row {r}"
                        )));
                    }
                    let sum = row.iter().copied().sum::<S>();
                    if (sum - S::one()).abs() > tol {
                        return Err(Error::Validation(format!(
                            "kl_div: {name} row {r} sums to {sum}, not 1"
                        )));
                    }
                }
            }
            for r in 0..rows {
                for j in 0..d {
                    let pi = p[r * d + j];
                    if pi > S::zero() {
                        let qi = qd[r * d + j].max(epss);
                        total += pi * (pi / qi).ln();
                    }
                }
            }
        }
        let val = total / S::from_f64(rows as f64);
        Ok(build(
            Vec::new(),
            vec![val],
            Op::KlDiv {
                p: self.clone(),
                q: q.clone(),
                eps: epss,
            },
        ))
    }

    pub fn kl_div(&self, q: &Tensor<S>) -> Result<Tensor<S>> {
        self.kl_div_eps(q, KL_EPS)
    }

    /// Mean negative log-softmax probability of the true class over [n, v]
    /// logits.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor<S>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::Param(format!(
                "cross_entropy: expected [n, v] logits, got {:?}",
                shape
            )));
        }
        let (n, v) = (shape[0], shape[1]);
        if labels.len() != n {
            return Err(Error::Param(format!(
                "cross_entropy: {} labels for {} rows",
                labels.len(),
                n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= v) {
            return Err(Error::Index(format!(
                "cross_entropy: label {bad} out of range for {v} classes"
            )));
        }
        let mut total = S::zero();
        {
            let z = self.data();
            for (i, &label) in labels.iter().enumerate() {
                let row = &z[i * v..(i + 1) * v];
                let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                let lse = row
                    .iter()
                    .map(|&x| (x - max).exp())
                    .sum::<S>()
                    .ln()
                    + max;
                total += lse - row[label];
            }
        }
        let val = total / S::from_f64(n as f64);
        Ok(build(
            Vec::new(),
            vec![val],
            Op::CrossEntropy {
                logits: self.clone(),
                labels: labels.to_vec(),
            },
        ))
    }

    pub fn sum(&self) -> Tensor<S> {
        let val = self.data().iter().copied().sum::<S>();
        build(Vec::new(), vec![val], Op::Sum(self.clone()))
    }

    pub fn mean_all(&self) -> Tensor<S> {
        let val =
            self.data().iter().copied().sum::<S>() / S::from_f64(self.numel() as f64);
        build(Vec::new(), vec![val], Op::Mean(self.clone()))
    }
}

pub(crate) fn gelu_forward<S: Scalar>(x: S) -> S {
    let sqrt_2_over_pi = S::from_f64(0.797_884_560_802_865_4);
    let a = S::from_f64(0.044_715);
    let half = S::from_f64(0.5);
    let u = sqrt_2_over_pi * (x + a * x * x * x);
    half * x * (S::one() + u.tanh())
}

pub(crate) fn gelu_grad<S: Scalar>(x: S) -> S {
    let sqrt_2_over_pi = S::from_f64(0.797_884_560_802_865_4);
    let a = S::from_f64(0.044_715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = sqrt_2_over_pi * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * sqrt_2_over_pi * (S::one() + three * a * x * x)
}
