//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are pushed
//! in evaluation order, so the node list is already topologically sorted and
//! [`Graph::backward`] is a single reverse sweep that visits each node once.
//! Leaves registered with `requires_grad = false` (inputs, frozen weights)
//! prune the sweep: no gradient is materialized for a node unless some leaf
//! beneath it asks for one.

use crate::error::{Error, Result};
use crate::numerics::tensor::{gemm, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, rows: usize, inner: usize, cols: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, r: usize, c: usize, k: usize, trans_b: bool },
    Add { a: Var, b: Var },
    AddBroadcast { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: Real },
    Mask { a: Var, mask: Vec<Real> },
    ScaleRows { x: Var, s: Var },
    Column { x: Var, col: usize, cols: usize },
    Reshape { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<Real>, rstd: Vec<Real> },
    Gelu { a: Var },
    Sum { a: Var },
    Mean { a: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add { .. } => "add",
            Op::AddBroadcast { .. } => "add_broadcast",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Mask { .. } => "mask",
            Op::ScaleRows { .. } => "scale_rows",
            Op::Column { .. } => "column",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation of one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if one was propagated.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

const SQRT_2_OVER_PI: Real = (std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2) as Real;
const GELU_COEFF: Real = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu_scalar(x: Real) -> Real {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: Real) -> Real {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x)
}

fn softmax_rows(data: &mut [Real], d: usize) {
    for row in data.chunks_mut(d) {
        let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

/// Gathers `src` (with `shape`) into the axis order `axes`.
fn permute_data(src: &[Real], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<Real>) {
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if cfg!(debug_assertions) && !value.is_finite() {
            let inputs_finite = self.inputs_of(&op).iter().all(|v| self.nodes[v.0].value.is_finite());
            debug_assert!(!inputs_finite, "{} produced a non-finite value from finite inputs", op.name());
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match *op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. }
            | Op::BatchMatMul { a, b, .. }
            | Op::Add { a, b }
            | Op::AddBroadcast { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b } => vec![a, b],
            Op::ScaleRows { x, s } => vec![x, s],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Scale { a, .. }
            | Op::Mask { a, .. }
            | Op::Reshape { a }
            | Op::Permute { a, .. }
            | Op::Softmax { a }
            | Op::Gelu { a }
            | Op::Sum { a }
            | Op::Mean { a } => vec![a],
            Op::Column { x, .. } => vec![x],
        }
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Registers a leaf tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// `a · b` where `b` is a matrix and `a` has any rank ≥ 2; the leading
    /// dimensions of `a` are folded into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let inner = sb[0];
        let cols = sb[1];
        let rows = self.value(a).numel() / inner;
        let mut out_shape = sa.to_vec();
        *out_shape.last_mut().unwrap() = cols;
        let mut out = vec![0.0; rows * cols];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, rows, inner, cols, false, false);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul { a, b, rows, inner, cols }, rg))
    }

    /// Batched product over matching leading dimensions: `[.., r, c] · [.., c, k]`,
    /// or `[.., r, c] · [.., k, c]ᵀ` when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let n = sa.len();
        if n < 3 || sb.len() != n || sa[..n - 2] != sb[..n - 2] {
            return Err(Error::shape("batch_matmul", sa, sb));
        }
        let (r, c) = (sa[n - 2], sa[n - 1]);
        let (k, inner) = if trans_b { (sb[n - 2], sb[n - 1]) } else { (sb[n - 1], sb[n - 2]) };
        if inner != c {
            return Err(Error::shape("batch_matmul", sa, sb));
        }
        let batch: usize = sa[..n - 2].iter().product();
        let mut out_shape = sa[..n - 2].to_vec();
        out_shape.extend([r, k]);
        let mut out = vec![0.0; batch * r * k];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                &da[i * r * c..(i + 1) * r * c],
                &db[i * c * k..(i + 1) * c * k],
                &mut out[i * r * k..(i + 1) * r * k],
                r,
                c,
                k,
                false,
                trans_b,
            );
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::BatchMatMul { a, b, batch, r, c, k, trans_b },
            rg,
        ))
    }

    /// Elementwise sum. `b` may also be a trailing-shape tensor that is tiled
    /// across the leading dimensions of `a` (bias or positional table).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let rg = self.any_grad(&[a, b]);
        if sa == sb {
            let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
            let t = Tensor::new(sa.to_vec(), data)?;
            return Ok(self.push(t, Op::Add { a, b }, rg));
        }
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add", sa, sb));
        }
        let tile = self.value(b).numel();
        let bd = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .chunks(tile)
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(t, Op::AddBroadcast { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("sub", sa, sb));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(sa.to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("mul", sa, sb));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(sa.to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: Real) -> Var {
        let t = self.value(a).map(|v| v * factor);
        let rg = self.any_grad(&[a]);
        self.push(t, Op::Scale { a, factor }, rg)
    }

    /// Multiplies by a fixed mask (dropout with the keep-scale folded in).
    pub fn mask(&mut self, a: Var, mask: Vec<Real>) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return Err(Error::shape("mask", self.shape(a), &[mask.len()]));
        }
        let data = self.value(a).data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, Op::Mask { a, mask }, rg))
    }

    /// Scales row `i` of `x` (viewed as `[len(s), rest]`) by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let rows = self.value(s).numel();
        let n = self.value(x).numel();
        if self.shape(s).len() != 1 || !n.is_multiple_of(rows) || self.shape(x)[0] != rows {
            return Err(Error::shape("scale_rows", self.shape(x), self.shape(s)));
        }
        let width = n / rows;
        let sd = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks(width)
            .zip(sd)
            .flat_map(|(row, &f)| row.iter().map(move |v| v * f))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(t, Op::ScaleRows { x, s }, rg))
    }

    /// Column `col` of a matrix, as a vector.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 || col >= sx[1] {
            return Err(Error::shape("column", sx, &[col]));
        }
        let (rows, cols) = (sx[0], sx[1]);
        let data = (0..rows).map(|r| self.value(x).data()[r * cols + col]).collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![rows], data)?, Op::Column { x, col, cols }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self
            .value(a)
            .reshaped(shape)
            .map_err(|_| Error::shape("reshape", self.shape(a), shape))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        let mut seen = vec![false; sa.len()];
        if axes.len() != sa.len() || axes.iter().any(|&ax| ax >= sa.len() || std::mem::replace(&mut seen[ax], true)) {
            return Err(Error::shape("permute", sa, axes));
        }
        let (shape, data) = permute_data(self.value(a).data(), sa, axes);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Permute { a, axes: axes.to_vec() }, rg))
    }

    /// Softmax over the last dimension, max-shifted for stability.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        let d = t.last_dim();
        softmax_rows(t.data_mut(), d);
        let rg = self.any_grad(&[a]);
        self.push(t, Op::Softmax { a }, rg)
    }

    /// Layer normalization over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: Real) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.numel() / d;
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let mean = row.iter().sum::<Real>() / d as Real;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / d as Real;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (i, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[i] + b[i]);
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu_scalar);
        let rg = self.any_grad(&[a]);
        self.push(t, Op::Gelu { a }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(t, Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::scalar(v.sum() / v.numel() as Real);
        let rg = self.any_grad(&[a]);
        self.push(t, Op::Mean { a }, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.propagate(id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn propagate(&self, id: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let d = dy.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, rows, inner, cols } => {
                if self.wants(a) {
                    let mut ga = vec![0.0; rows * inner];
                    gemm(d, self.value(b).data(), &mut ga, rows, cols, inner, false, true);
                    let t = Tensor::new(self.shape(a).to_vec(), ga).unwrap();
                    self.accumulate(grads, a, t);
                }
                if self.wants(b) {
                    let mut gb = vec![0.0; inner * cols];
                    gemm(self.value(a).data(), d, &mut gb, inner, rows, cols, true, false);
                    let t = Tensor::new(self.shape(b).to_vec(), gb).unwrap();
                    self.accumulate(grads, b, t);
                }
            }
            &Op::BatchMatMul { a, b, batch, r, c, k, trans_b } => {
                let (da, db) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let mut ga = vec![0.0; batch * r * c];
                    for i in 0..batch {
                        // dA = dY · Bᵀ, or dY · B when B was used transposed.
                        gemm(
                            &d[i * r * k..(i + 1) * r * k],
                            &db[i * c * k..(i + 1) * c * k],
                            &mut ga[i * r * c..(i + 1) * r * c],
                            r,
                            k,
                            c,
                            false,
                            !trans_b,
                        );
                    }
                    let t = Tensor::new(self.shape(a).to_vec(), ga).unwrap();
                    self.accumulate(grads, a, t);
                }
                if self.wants(b) {
                    let mut gb = vec![0.0; batch * c * k];
                    for i in 0..batch {
                        let a_i = &da[i * r * c..(i + 1) * r * c];
                        let d_i = &d[i * r * k..(i + 1) * r * k];
                        let out = &mut gb[i * c * k..(i + 1) * c * k];
                        if trans_b {
                            // B is k × c: dB = dYᵀ · A
                            gemm(d_i, a_i, out, k, r, c, true, false);
                        } else {
                            // dB = Aᵀ · dY
                            gemm(a_i, d_i, out, c, r, k, true, false);
                        }
                    }
                    let t = Tensor::new(self.shape(b).to_vec(), gb).unwrap();
                    self.accumulate(grads, b, t);
                }
            }
            &Op::Add { a, b } => {
                self.accumulate(grads, a, dy.clone());
                self.accumulate(grads, b, dy.clone());
            }
            &Op::AddBroadcast { a, b } => {
                self.accumulate(grads, a, dy.clone());
                if self.wants(b) {
                    let mut gb = Tensor::zeros(self.shape(b));
                    let tile = gb.numel();
                    for chunk in d.chunks(tile) {
                        for (g, v) in gb.data_mut().iter_mut().zip(chunk) {
                            *g += v;
                        }
                    }
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Sub { a, b } => {
                self.accumulate(grads, a, dy.clone());
                if self.wants(b) {
                    self.accumulate(grads, b, dy.map(|v| -v));
                }
            }
            &Op::Mul { a, b } => {
                if self.wants(a) {
                    let g = d.iter().zip(self.value(b).data()).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, a, Tensor::new(dy.shape().to_vec(), g).unwrap());
                }
                if self.wants(b) {
                    let g = d.iter().zip(self.value(a).data()).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, b, Tensor::new(dy.shape().to_vec(), g).unwrap());
                }
            }
            &Op::Scale { a, factor } => self.accumulate(grads, a, dy.map(|v| v * factor)),
            Op::Mask { a, mask } => {
                let g = d.iter().zip(mask).map(|(g, m)| g * m).collect();
                self.accumulate(grads, *a, Tensor::new(dy.shape().to_vec(), g).unwrap());
            }
            &Op::ScaleRows { x, s } => {
                let sd = self.value(s).data();
                let width = dy.numel() / sd.len();
                if self.wants(x) {
                    let g = d
                        .chunks(width)
                        .zip(sd)
                        .flat_map(|(row, &f)| row.iter().map(move |v| v * f))
                        .collect();
                    self.accumulate(grads, x, Tensor::new(dy.shape().to_vec(), g).unwrap());
                }
                if self.wants(s) {
                    let g = d
                        .chunks(width)
                        .zip(self.value(x).data().chunks(width))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(g, v)| g * v).sum())
                        .collect();
                    self.accumulate(grads, s, Tensor::new(vec![sd.len()], g).unwrap());
                }
            }
            &Op::Column { x, col, cols } => {
                let mut g = Tensor::zeros(self.shape(x));
                for (r, v) in d.iter().enumerate() {
                    g.data_mut()[r * cols + col] = *v;
                }
                self.accumulate(grads, x, g);
            }
            &Op::Reshape { a } => {
                self.accumulate(grads, a, dy.reshaped(self.shape(a)).unwrap());
            }
            Op::Permute { a, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let (shape, data) = permute_data(d, dy.shape(), &inverse);
                self.accumulate(grads, *a, Tensor::new(shape, data).unwrap());
            }
            &Op::Softmax { a } => {
                let y = &node.value;
                let width = y.last_dim();
                let mut g = Vec::with_capacity(y.numel());
                for (yr, dr) in y.data().chunks(width).zip(d.chunks(width)) {
                    let dot: Real = yr.iter().zip(dr).map(|(p, q)| p * q).sum();
                    g.extend(yr.iter().zip(dr).map(|(p, q)| p * (q - dot)));
                }
                self.accumulate(grads, a, Tensor::new(y.shape().to_vec(), g).unwrap());
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let width = self.value(*gamma).numel();
                let gv = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let mut gg = vec![0.0; width];
                    for (dr, hr) in d.chunks(width).zip(xhat.chunks(width)) {
                        for i in 0..width {
                            gg[i] += dr[i] * hr[i];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::new(vec![width], gg).unwrap());
                }
                if self.wants(*beta) {
                    let mut gb = vec![0.0; width];
                    for dr in d.chunks(width) {
                        for i in 0..width {
                            gb[i] += dr[i];
                        }
                    }
                    self.accumulate(grads, *beta, Tensor::new(vec![width], gb).unwrap());
                }
                if self.wants(*x) {
                    let n = width as Real;
                    let mut gx = Vec::with_capacity(d.len());
                    let mut dxhat = vec![0.0; width];
                    for ((dr, hr), &r) in d.chunks(width).zip(xhat.chunks(width)).zip(rstd) {
                        for i in 0..width {
                            dxhat[i] = dr[i] * gv[i];
                        }
                        let mean_d = dxhat.iter().sum::<Real>() / n;
                        let mean_dh = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<Real>() / n;
                        gx.extend((0..width).map(|i| r * (dxhat[i] - mean_d - hr[i] * mean_dh)));
                    }
                    self.accumulate(grads, *x, Tensor::new(dy.shape().to_vec(), gx).unwrap());
                }
            }
            &Op::Gelu { a } => {
                let g = d
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(g, &x)| g * gelu_grad_scalar(x))
                    .collect();
                self.accumulate(grads, a, Tensor::new(dy.shape().to_vec(), g).unwrap());
            }
            &Op::Sum { a } => self.accumulate(grads, a, Tensor::full(self.shape(a), d[0])),
            &Op::Mean { a } => {
                let n = self.value(a).numel() as Real;
                self.accumulate(grads, a, Tensor::full(self.shape(a), d[0] / n));
            }
        }
    }
}
