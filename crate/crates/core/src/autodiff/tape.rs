//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends a node holding its forward value and whatever it
//! needs for the backward pass. Nodes are appended in evaluation order, so the
//! tape is already topologically sorted and [`Tape::backward`] walks it once in
//! reverse.

use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether batch normalization uses batch statistics or running estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormMode<'a> {
    Train,
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics of a training-mode batch-norm call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, for running-estimate updates.
    pub var: Vec<f64>,
}

pub const BATCH_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sqrt(Var),
    Sum(Var),
    MeanPool {
        x: Var,
        axes: Vec<bool>,
        count: usize,
    },
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    BiasAdd {
        x: Var,
        bias: Var,
        axis: usize,
    },
    BroadcastRows(Var),
    TemporalConv {
        x: Var,
        weight: Var,
        bias: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Gather {
        x: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A record of primitive applications, differentiable in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zeros when no path from the loss reaches it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.shape(v).to_vec();
        match self.get(v) {
            Some(g) => Tensor {
                shape,
                data: g.to_vec(),
            },
            None => Tensor::zeros(&shape),
        }
    }
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

/// `out[b] += a[b] · b[b]` for `[m × k] · [k × n]` blocks.
fn gemm_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// `out += a · bᵀ` with `a: [m × n]`, `b: [k × n]`, `out: [m × k]`.
fn gemm_nt_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out += aᵀ · b` with `a: [m × k]`, `b: [m × n]`, `out: [k × n]`.
fn gemm_tn_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    /// Sign of every rectifier input on the tape, in recording order. Two
    /// evaluations with equal patterns lie in the same linear piece of every
    /// rectifier.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                out.extend(self.data(a).iter().map(|&x| x > 0.0));
            }
        }
        out
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, parents: &[Var]) -> Result<Var> {
        if value.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericFault { op });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if value.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericFault { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: &Tensor) -> Result<Var> {
        self.leaf(value.clone(), true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, kind: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        self.push(op, value, kind, &[a, b])
    }

    fn map(&mut self, op: &'static str, a: Var, f: impl Fn(f64) -> f64, kind: Op) -> Result<Var> {
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.data(a).iter().map(|&x| f(x)).collect(),
        };
        self.push(op, value, kind, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map("scale", a, |x| s * x, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map("add_scalar", a, |x| x + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.data(a).iter().any(|&x| x <= 0.0) {
            return Err(Error::NumericFault { op: "sqrt" });
        }
        self.map("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean over `axes`; the reduced axes are dropped from the shape.
    pub fn mean_pool(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut reduce = vec![false; shape.len()];
        for &ax in axes {
            if ax >= shape.len() {
                return Err(Error::shape("mean_pool", &shape, axes));
            }
            reduce[ax] = true;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduce)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        let count: usize = shape
            .iter()
            .zip(&reduce)
            .filter(|(_, &r)| r)
            .map(|(&d, _)| d)
            .product();
        let mut out = vec![0.0; numel(&out_shape)];
        let src = self.data(a);
        for_each_reduced_index(&shape, &reduce, |i, o| out[o] += src[i]);
        let inv = 1.0 / count as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        let value = Tensor {
            shape: out_shape,
            data: out,
        };
        self.push(
            "mean_pool",
            value,
            Op::MeanPool {
                x: a,
                axes: reduce,
                count,
            },
            &[a],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).numel() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: self.data(a).to_vec(),
        };
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("transpose", &shape, &[2]));
        }
        let (m, n) = (shape[0], shape[1]);
        let src = self.data(a);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        self.push("transpose", Tensor { shape: vec![n, m], data }, Op::Transpose(a), &[a])
    }

    /// `[m × k] · [k × n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(&mut out, self.data(a), self.data(b), m, k, n);
        self.push("matmul", Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), &[a, b])
    }

    /// `[B × m × k] · [B × k × n]`, one product per batch entry.
    pub fn batched_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("batched_matmul", sa, sb));
        }
        let (bn, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bn * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..bn {
            gemm_acc(
                &mut out[i * m * n..(i + 1) * m * n],
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor {
            shape: vec![bn, m, n],
            data: out,
        };
        self.push("batched_matmul", value, Op::BatchMatMul(a, b), &[a, b])
    }

    /// Adds `bias[j]` to every entry whose index along `axis` is `j`.
    pub fn bias_add(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.shape(bias) != [shape[axis]] {
            return Err(Error::shape("bias_add", &shape, self.shape(bias)));
        }
        let (outer, mid, inner) = split_at_axis(&shape, axis);
        let mut data = self.data(x).to_vec();
        let b = self.data(bias);
        for o in 0..outer {
            for (j, &bj) in b.iter().enumerate() {
                let start = (o * mid + j) * inner;
                data[start..start + inner].iter_mut().for_each(|v| *v += bj);
            }
        }
        self.push("bias_add", Tensor { shape, data }, Op::BiasAdd { x, bias, axis }, &[x, bias])
    }

    /// `[D] → [rows × D]` by repetition.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 1 {
            return Err(Error::shape("broadcast_rows", &shape, &[rows]));
        }
        let src = self.data(x);
        let mut data = Vec::with_capacity(rows * shape[0]);
        for _ in 0..rows {
            data.extend_from_slice(src);
        }
        let value = Tensor {
            shape: vec![rows, shape[0]],
            data,
        };
        self.push("broadcast_rows", value, Op::BroadcastRows(x), &[x])
    }

    /// Convolution along the frame axis of `x: [B, Cin, T, V]`, independently
    /// per joint, with `weight: [Cout, Cin, K]` (odd `K`), symmetric zero
    /// padding and stride 1.
    pub fn temporal_conv1d(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(weight).to_vec();
        if sx.len() != 4 || sw.len() != 3 || sw[1] != sx[1] || sw[2] % 2 == 0 {
            return Err(Error::shape("temporal_conv1d", &sx, &sw));
        }
        let (bn, cin, t_n, v_n) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kernel) = (sw[0], sw[2]);
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape("temporal_conv1d", &sw, self.shape(b)));
            }
        }
        let pad = kernel / 2;
        let plane = t_n * v_n;
        let mut out = vec![0.0; bn * cout * plane];
        let (xd, wd) = (self.data(x), self.data(weight));
        for b in 0..bn {
            for o in 0..cout {
                let dst = &mut out[(b * cout + o) * plane..(b * cout + o + 1) * plane];
                if let Some(bv) = bias {
                    let bo = self.data(bv)[o];
                    dst.iter_mut().for_each(|v| *v = bo);
                }
                for c in 0..cin {
                    let src = &xd[(b * cin + c) * plane..(b * cin + c + 1) * plane];
                    for k in 0..kernel {
                        let w = wd[(o * cin + c) * kernel + k];
                        if w == 0.0 {
                            continue;
                        }
                        let Some((t0, t1, s0)) = conv_range(t_n, k, pad) else {
                            continue;
                        };
                        let d = &mut dst[t0 * v_n..t1 * v_n];
                        let s = &src[s0 * v_n..(s0 + t1 - t0) * v_n];
                        for (dv, &sv) in d.iter_mut().zip(s) {
                            *dv += w * sv;
                        }
                    }
                }
            }
        }
        let value = Tensor {
            shape: vec![bn, cout, t_n, v_n],
            data: out,
        };
        let mut parents = vec![x, weight];
        parents.extend(bias);
        self.push("temporal_conv1d", value, Op::TemporalConv { x, weight, bias }, &parents)
    }

    /// Per-channel normalization of `x: [N, C, ...]` over every axis but 1,
    /// followed by the affine map `gamma · x̂ + beta`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(gamma) != [shape[1]] || self.shape(beta) != [shape[1]] {
            return Err(Error::shape("batch_norm", &shape, self.shape(gamma)));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner = numel(&shape[2..]);
        let count = n * inner;
        let xd = self.data(x);
        let (mean, var, stats) = match mode {
            NormMode::Train => {
                if n < 2 {
                    return Err(Error::InvalidInput(format!(
                        "batch norm in training mode needs a batch of at least 2, got {n}"
                    )));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        let start = (b * c + ch) * inner;
                        s += xd[start..start + inner].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut ss = 0.0;
                    for b in 0..n {
                        let start = (b * c + ch) * inner;
                        ss += xd[start..start + inner].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = ss / count as f64;
                }
                let unbiased = var
                    .iter()
                    .map(|v| v * count as f64 / (count as f64 - 1.0).max(1.0))
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", &shape, &[mean.len(), var.len()]));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let (g, bt) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let start = (b * c + ch) * inner;
                for i in start..start + inner {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let train = stats.is_some();
        let var_out = self.push(
            "batch_norm",
            Tensor { shape, data: out },
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        )?;
        Ok((var_out, stats))
    }

    /// Selects `indices` along `axis`.
    pub fn gather(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || indices.iter().any(|&i| i >= shape[axis]) {
            return Err(Error::shape("gather", &shape, indices));
        }
        let (outer, mid, inner) = split_at_axis(&shape, axis);
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let start = (o * mid + i) * inner;
                data.extend_from_slice(&src[start..start + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        let value = Tensor {
            shape: out_shape,
            data,
        };
        let kind = Op::Gather {
            x,
            axis,
            indices: indices.to_vec(),
        };
        self.push("gather", value, kind, &[x])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`, with
    /// `logits: [N × K]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || labels.iter().any(|&l| l >= shape[1]) {
            return Err(Error::shape("softmax_cross_entropy", &shape, &[labels.len()]));
        }
        let (n, k) = (shape[0], shape[1]);
        let z = self.data(logits);
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &z[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - m).exp() / s;
            }
            loss += s.ln() + m - row[labels[i]];
        }
        let kind = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push("softmax_cross_entropy", Tensor::scalar(loss / n as f64), kind, &[logits])
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let len = |v: Var| self.nodes[v.0].value.numel();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &p in [a, b].into_iter() {
                    if self.needs(p) {
                        let dst = accumulate(&mut grads[p.0], len(p));
                        dst.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    let dst = accumulate(&mut grads[a.0], len(*a));
                    dst.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
                if self.needs(*b) {
                    let dst = accumulate(&mut grads[b.0], len(*b));
                    dst.iter_mut().zip(g).for_each(|(d, &x)| *d -= x);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                if self.needs(*a) {
                    let dst = accumulate(&mut grads[a.0], av.len());
                    for i in 0..g.len() {
                        dst[i] += g[i] * bv[i];
                    }
                }
                if self.needs(*b) {
                    let dst = accumulate(&mut grads[b.0], bv.len());
                    for i in 0..g.len() {
                        dst[i] += g[i] * av[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                if self.needs(*a) {
                    let dst = accumulate(&mut grads[a.0], av.len());
                    for i in 0..g.len() {
                        dst[i] += g[i] / bv[i];
                    }
                }
                if self.needs(*b) {
                    let dst = accumulate(&mut grads[b.0], bv.len());
                    for i in 0..g.len() {
                        dst[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }
            Op::Scale(a, s) => {
                let dst = accumulate(&mut grads[a.0], g.len());
                dst.iter_mut().zip(g).for_each(|(d, &x)| *d += s * x);
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let dst = accumulate(&mut grads[a.0], g.len());
                dst.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
            Op::Relu(a) => {
                let av = self.data(*a);
                let dst = accumulate(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        dst[i] += g[i];
                    }
                }
            }
            Op::Sqrt(a) => {
                let out = &node.value.data;
                let dst = accumulate(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    dst[i] += g[i] * 0.5 / out[i];
                }
            }
            Op::Sum(a) => {
                let dst = accumulate(&mut grads[a.0], len(*a));
                dst.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::MeanPool { x, axes, count } => {
                let shape = self.shape(*x);
                let inv = 1.0 / *count as f64;
                let dst = accumulate(&mut grads[x.0], len(*x));
                for_each_reduced_index(shape, axes, |i, o| dst[i] += g[o] * inv);
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let dst = accumulate(&mut grads[a.0], m * n);
                for i in 0..m {
                    for j in 0..n {
                        dst[i * n + j] += g[j * m + i];
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let bv = self.data(*b);
                    gemm_nt_acc(accumulate(&mut grads[a.0], m * k), g, bv, m, n, k);
                }
                if self.needs(*b) {
                    let av = self.data(*a);
                    gemm_tn_acc(accumulate(&mut grads[b.0], k * n), av, g, m, k, n);
                }
            }
            Op::BatchMatMul(a, b) => {
                let sa = self.shape(*a);
                let (bn, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.shape(*b)[2];
                let (av, bv) = (self.data(*a), self.data(*b));
                if self.needs(*a) {
                    let dst = accumulate(&mut grads[a.0], bn * m * k);
                    for i in 0..bn {
                        gemm_nt_acc(
                            &mut dst[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &bv[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if self.needs(*b) {
                    let dst = accumulate(&mut grads[b.0], bn * k * n);
                    for i in 0..bn {
                        gemm_tn_acc(
                            &mut dst[i * k * n..(i + 1) * k * n],
                            &av[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::BiasAdd { x, bias, axis } => {
                if self.needs(*x) {
                    let dst = accumulate(&mut grads[x.0], g.len());
                    dst.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if self.needs(*bias) {
                    let (outer, mid, inner) = split_at_axis(self.shape(*x), *axis);
                    let dst = accumulate(&mut grads[bias.0], mid);
                    for o in 0..outer {
                        for (j, d) in dst.iter_mut().enumerate() {
                            let start = (o * mid + j) * inner;
                            *d += g[start..start + inner].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::BroadcastRows(x) => {
                let d = len(*x);
                let dst = accumulate(&mut grads[x.0], d);
                for row in g.chunks_exact(d) {
                    dst.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                }
            }
            Op::TemporalConv { x, weight, bias } => {
                self.conv_backward(*x, *weight, *bias, g, grads);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = self.shape(*x);
                let (n, c) = (shape[0], shape[1]);
                let inner = numel(&shape[2..]);
                let count = (n * inner) as f64;
                let gam = self.data(*gamma);
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let start = (b * c + ch) * inner;
                        for i in start..start + inner {
                            sum_dy[ch] += g[i];
                            sum_dy_xhat[ch] += g[i] * xhat[i];
                        }
                    }
                }
                if self.needs(*gamma) {
                    let dst = accumulate(&mut grads[gamma.0], c);
                    dst.iter_mut().zip(&sum_dy_xhat).for_each(|(d, v)| *d += v);
                }
                if self.needs(*beta) {
                    let dst = accumulate(&mut grads[beta.0], c);
                    dst.iter_mut().zip(&sum_dy).for_each(|(d, v)| *d += v);
                }
                if self.needs(*x) {
                    let dst = accumulate(&mut grads[x.0], g.len());
                    for b in 0..n {
                        for ch in 0..c {
                            let start = (b * c + ch) * inner;
                            let k = gam[ch] * inv_std[ch];
                            for i in start..start + inner {
                                dst[i] += if *train {
                                    k * (g[i] - sum_dy[ch] / count - xhat[i] * sum_dy_xhat[ch] / count)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                }
            }
            Op::Gather { x, axis, indices } => {
                let (outer, mid, inner) = split_at_axis(self.shape(*x), *axis);
                let dst = accumulate(&mut grads[x.0], outer * mid * inner);
                let mut src = 0;
                for o in 0..outer {
                    for &i in indices {
                        let start = (o * mid + i) * inner;
                        for d in &mut dst[start..start + inner] {
                            *d += g[src];
                            src += 1;
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n.max(1);
                let scale = g[0] / n as f64;
                let dst = accumulate(&mut grads[logits.0], probs.len());
                for i in 0..n {
                    for j in 0..k {
                        let target = if labels[i] == j { 1.0 } else { 0.0 };
                        dst[i * k + j] += scale * (probs[i * k + j] - target);
                    }
                }
            }
        }
    }

    fn conv_backward(&self, x: Var, weight: Var, bias: Option<Var>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let sx = self.shape(x);
        let (bn, cin, t_n, v_n) = (sx[0], sx[1], sx[2], sx[3]);
        let sw = self.shape(weight);
        let (cout, kernel) = (sw[0], sw[2]);
        let pad = kernel / 2;
        let plane = t_n * v_n;
        let (xd, wd) = (self.data(x), self.data(weight));
        if let Some(bv) = bias.filter(|b| self.needs(*b)) {
            let dst = accumulate(&mut grads[bv.0], cout);
            for b in 0..bn {
                for (o, d) in dst.iter_mut().enumerate() {
                    let start = (b * cout + o) * plane;
                    *d += g[start..start + plane].iter().sum::<f64>();
                }
            }
        }
        if self.needs(weight) {
            let dst = accumulate(&mut grads[weight.0], cout * cin * kernel);
            for b in 0..bn {
                for o in 0..cout {
                    let go = &g[(b * cout + o) * plane..(b * cout + o + 1) * plane];
                    for c in 0..cin {
                        let src = &xd[(b * cin + c) * plane..(b * cin + c + 1) * plane];
                        for k in 0..kernel {
                            let Some((t0, t1, s0)) = conv_range(t_n, k, pad) else {
                                continue;
                            };
                            let d = &go[t0 * v_n..t1 * v_n];
                            let s = &src[s0 * v_n..(s0 + t1 - t0) * v_n];
                            dst[(o * cin + c) * kernel + k] +=
                                d.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
        }
        if self.needs(x) {
            let dst = accumulate(&mut grads[x.0], bn * cin * plane);
            for b in 0..bn {
                for o in 0..cout {
                    let go = &g[(b * cout + o) * plane..(b * cout + o + 1) * plane];
                    for c in 0..cin {
                        let dx = &mut dst[(b * cin + c) * plane..(b * cin + c + 1) * plane];
                        for k in 0..kernel {
                            let w = wd[(o * cin + c) * kernel + k];
                            if w == 0.0 {
                                continue;
                            }
                            let Some((t0, t1, s0)) = conv_range(t_n, k, pad) else {
                                continue;
                            };
                            let d = &go[t0 * v_n..t1 * v_n];
                            let s = &mut dx[s0 * v_n..(s0 + t1 - t0) * v_n];
                            for (sv, &dv) in s.iter_mut().zip(d) {
                                *sv += w * dv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output frames `t0..t1` read input frames starting at `s0` for kernel tap `k`.
fn conv_range(t_n: usize, k: usize, pad: usize) -> Option<(usize, usize, usize)> {
    // input frame = t + k - pad must lie in 0..t_n
    let t0 = pad.saturating_sub(k);
    let t1 = (t_n + pad).saturating_sub(k).min(t_n);
    if t0 >= t1 {
        return None;
    }
    Some((t0, t1, t0 + k - pad))
}

/// Calls `f(input_index, output_index)` for every element of `shape`, where
/// the output drops the axes flagged in `reduce`.
fn for_each_reduced_index(shape: &[usize], reduce: &[bool], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    let mut out_stride = vec![0usize; rank];
    let mut acc = 1;
    for ax in (0..rank).rev() {
        if !reduce[ax] {
            out_stride[ax] = acc;
            acc *= shape[ax];
        }
    }
    // Fast path: reduce a contiguous suffix of axes.
    if let Some(first) = reduce.iter().position(|&r| r) {
        if reduce[first..].iter().all(|&r| r) {
            let inner = numel(&shape[first..]);
            let outer = numel(&shape[..first]);
            for o in 0..outer {
                for i in 0..inner {
                    f(o * inner + i, o);
                }
            }
            return;
        }
    }
    let total = numel(shape);
    let mut idx = vec![0usize; rank];
    let mut out = 0usize;
    for i in 0..total {
        f(i, out);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            out += out_stride[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            out -= out_stride[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}
