//! Reverse-mode differentiation over a linear tape.
//!
//! Ops append nodes in topological order (inputs always precede outputs), so
//! `backward` is a single reverse sweep that visits every node exactly once.
//! A graph is confined to one logical execution stream; values handed out of
//! it are plain tensors and safe to move across threads.

use super::ops;
use super::{Element, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`]. Only valid for the graph that minted it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Domain-specific differentiable op plugged into the tape. The forward value
/// is computed by the caller; the graph only needs the backward rule.
pub trait CustomOp<T: Element>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients w.r.t. each input, in input order. `None` marks an input
    /// with no defined gradient path.
    fn backward(&self, grad_out: &Tensor<T>, inputs: &[&Tensor<T>]) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Element> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Matmul(Var, Var),
    MatmulNT(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    Reshape(Var),
    RowAdd(Var, Var),
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Var>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Trilinear {
        vol: Var,
        coords: Var,
    },
    PatchConv3 {
        input: Var,
        weight: Var,
        stride_h: usize,
        stride_w: usize,
    },
    Conv2dSame {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Upsample2 {
        input: Var,
        factor: usize,
    },
    PadReplicateHw(Var),
    CropHw(Var),
    TokensToGrid {
        input: Var,
        gh: usize,
        gw: usize,
    },
    Custom {
        op: Box<dyn CustomOp<T>>,
        inputs: Vec<Var>,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Linear differentiation tape.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ── Forward ops ──────────────────────────────────────────────────

    fn binary_same_shape(
        &mut self,
        a: Var,
        b: Var,
        context: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(TensorError::DimensionMismatch {
                context,
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| -x);
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, rg, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cv = T::from_f64(c);
        let value = self.nodes[a.0].value.map(|x| x * cv);
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, rg, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let cv = T::from_f64(c);
        let value = self.nodes[a.0].value.map(|x| x + cv);
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, rg, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Matmul(a, b)))
    }

    /// a · bᵀ.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul_nt(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::MatmulNT(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let mut s = T::ZERO;
        for &v in self.nodes[a.0].value.data() {
            s += v;
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::scalar(s), rg, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.numel();
        if n == 0 {
            return Err(TensorError::EmptyAxis { context: "mean" });
        }
        let mut s = T::ZERO;
        for &v in self.nodes[a.0].value.data() {
            s += v;
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(
            Tensor::scalar(s / T::from_f64(n as f64)),
            rg,
            Op::MeanAll(a),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.reshape(shape)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, rg, Op::Reshape(a)))
    }

    /// `[n,d] + [d]` broadcast over rows.
    pub fn row_add(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (&self.nodes[x.0].value, &self.nodes[row.0].value);
        let d = *vx.shape().last().unwrap_or(&0);
        if vr.shape() != [d] || d == 0 {
            return Err(TensorError::DimensionMismatch {
                context: "row_add",
                left: vx.shape().to_vec(),
                right: vr.shape().to_vec(),
            });
        }
        let rd = vr.data();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + rd[i % d])
            .collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, row]);
        Ok(self.push(value, rg, Op::RowAdd(x, row)))
    }

    /// Column slice of a `[n,d]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() != 2 || start + len > vx.shape()[1] {
            return Err(TensorError::InvalidArgument {
                context: "slice_cols",
                message: format!(
                    "slice [{start}, {}) out of shape {:?}",
                    start + len,
                    vx.shape()
                ),
            });
        }
        let (n, d) = (vx.shape()[0], vx.shape()[1]);
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&vx.data()[r * d + start..r * d + start + len]);
        }
        let value = Tensor::new(vec![n, len], data)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, rg, Op::SliceCols { x, start, len }))
    }

    /// Column-wise concatenation of `[n,dᵢ]` matrices.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::EmptyAxis {
                context: "concat_cols",
            });
        }
        let n = self.nodes[parts[0].0].value.shape()[0];
        let mut total = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.rank() != 2 || v.shape()[0] != n {
                return Err(TensorError::DimensionMismatch {
                    context: "concat_cols",
                    left: self.nodes[parts[0].0].value.shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            total += v.shape()[1];
        }
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                let v = &self.nodes[p.0].value;
                let d = v.shape()[1];
                data.extend_from_slice(&v.data()[r * d..(r + 1) * d]);
            }
        }
        let value = Tensor::new(vec![n, total], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, rg, Op::ConcatCols(parts.to_vec())))
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (value, mean, rstd) = ops::layernorm_with_stats(
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
            eps,
        )?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            value,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let value = ops::softmax(&self.nodes[x.0].value)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, rg, Op::Softmax(x)))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(ops::gelu_scalar);
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, rg, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(ops::sigmoid_scalar);
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, rg, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| v.tanh());
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, rg, Op::Tanh(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(ops::softplus_scalar);
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, rg, Op::Softplus(x))
    }

    /// Registers gradients w.r.t. both the volume and the coordinates.
    pub fn trilinear(&mut self, vol: Var, coords: Var) -> Result<Var> {
        let value = ops::trilinear_sample(&self.nodes[vol.0].value, &self.nodes[coords.0].value)?;
        let rg = self.any_grad(&[vol, coords]);
        Ok(self.push(value, rg, Op::Trilinear { vol, coords }))
    }

    pub fn patch_conv3(
        &mut self,
        input: Var,
        weight: Var,
        stride_h: usize,
        stride_w: usize,
    ) -> Result<Var> {
        let value = ops::patch_conv3d(
            &self.nodes[input.0].value,
            &self.nodes[weight.0].value,
            stride_h,
            stride_w,
        )?;
        let rg = self.any_grad(&[input, weight]);
        Ok(self.push(
            value,
            rg,
            Op::PatchConv3 {
                input,
                weight,
                stride_h,
                stride_w,
            },
        ))
    }

    pub fn conv2d_same(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let value = ops::conv2d_same(
            &self.nodes[input.0].value,
            &self.nodes[weight.0].value,
            &self.nodes[bias.0].value,
        )?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            value,
            rg,
            Op::Conv2dSame {
                input,
                weight,
                bias,
            },
        ))
    }

    pub fn upsample2(&mut self, input: Var, factor: usize) -> Result<Var> {
        let value = ops::upsample_nearest2(&self.nodes[input.0].value, factor)?;
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(value, rg, Op::Upsample2 { input, factor }))
    }

    pub fn pad_replicate_hw(&mut self, input: Var, th: usize, tw: usize) -> Result<Var> {
        let value = ops::pad_replicate_hw(&self.nodes[input.0].value, th, tw)?;
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(value, rg, Op::PadReplicateHw(input)))
    }

    pub fn crop_hw(&mut self, input: Var, oh: usize, ow: usize) -> Result<Var> {
        let value = ops::crop_hw(&self.nodes[input.0].value, oh, ow)?;
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(value, rg, Op::CropHw(input)))
    }

    /// `[A,E]` tokens to an `[E,gh,gw]` feature grid (anchors row-major).
    pub fn tokens_to_grid(&mut self, input: Var, gh: usize, gw: usize) -> Result<Var> {
        let v = &self.nodes[input.0].value;
        if v.rank() != 2 || v.shape()[0] != gh * gw {
            return Err(TensorError::DimensionMismatch {
                context: "tokens_to_grid",
                left: v.shape().to_vec(),
                right: vec![gh, gw],
            });
        }
        let (a, e) = (v.shape()[0], v.shape()[1]);
        let mut data = vec![T::ZERO; a * e];
        for i in 0..a {
            for j in 0..e {
                data[j * a + i] = v.data()[i * e + j];
            }
        }
        let value = Tensor::new(vec![e, gh, gw], data)?;
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(value, rg, Op::TokensToGrid { input, gh, gw }))
    }

    /// Registers a domain op whose forward value was computed by the caller.
    pub fn custom(&mut self, op: Box<dyn CustomOp<T>>, inputs: &[Var], value: Tensor<T>) -> Var {
        let rg = self.any_grad(inputs);
        self.push(
            value,
            rg,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
        )
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates gradients on every
    /// `requires_grad` node; leaves not on the loss path get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NotScalar {
                context: "backward",
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        for node in &mut self.nodes {
            node.grad = if node.requires_grad {
                Some(Tensor::zeros(node.value.shape()))
            } else {
                None
            };
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::ONE));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.grad.as_ref() else {
                continue;
            };
            backward_step(before, node, g)?;
        }
        Ok(())
    }
}

fn accum<T: Element>(nodes: &mut [Node<T>], v: Var, delta: Tensor<T>) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let grad = node
        .grad
        .get_or_insert_with(|| Tensor::zeros(node.value.shape()));
    debug_assert_eq!(grad.shape(), delta.shape());
    for (g, d) in grad.data_mut().iter_mut().zip(delta.data()) {
        *g += *d;
    }
}

fn val<'a, T: Element>(nodes: &'a [Node<T>], v: Var) -> &'a Tensor<T> {
    &nodes[v.0].value
}

#[allow(clippy::too_many_lines)]
fn backward_step<T: Element>(before: &mut [Node<T>], node: &Node<T>, g: &Tensor<T>) -> Result<()> {
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accum(before, *a, g.clone());
            accum(before, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accum(before, *a, g.clone());
            accum(before, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let da = elementwise(g, val(before, *b), |gv, bv| gv * bv);
            let db = elementwise(g, val(before, *a), |gv, av| gv * av);
            accum(before, *a, da);
            accum(before, *b, db);
        }
        Op::Div(a, b) => {
            let bv = val(before, *b);
            let av = val(before, *a);
            let da = elementwise(g, bv, |gv, b| gv / b);
            let db = Tensor::new(
                g.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(av.data().iter().zip(bv.data()))
                    .map(|(&gv, (&a, &b))| -gv * a / (b * b))
                    .collect(),
            )?;
            accum(before, *a, da);
            accum(before, *b, db);
        }
        Op::Neg(a) => accum(before, *a, g.map(|v| -v)),
        Op::Scale(a, c) => {
            let cv = T::from_f64(*c);
            accum(before, *a, g.map(|v| v * cv));
        }
        Op::AddScalar(a) => accum(before, *a, g.clone()),
        Op::Matmul(a, b) => {
            let da = ops::matmul_nt(g, val(before, *b))?;
            let db = ops::matmul_tn(val(before, *a), g)?;
            accum(before, *a, da);
            accum(before, *b, db);
        }
        Op::MatmulNT(a, b) => {
            let da = ops::matmul(g, val(before, *b))?;
            let db = ops::matmul_tn(g, val(before, *a))?;
            accum(before, *a, da);
            accum(before, *b, db);
        }
        Op::SumAll(a) => {
            let gv = g.data()[0];
            accum(before, *a, Tensor::full(val(before, *a).shape(), gv));
        }
        Op::MeanAll(a) => {
            let n = val(before, *a).numel();
            let gv = g.data()[0] * T::from_f64(1.0 / n as f64);
            accum(before, *a, Tensor::full(val(before, *a).shape(), gv));
        }
        Op::Reshape(a) => {
            accum(before, *a, g.reshape(val(before, *a).shape())?);
        }
        Op::RowAdd(x, row) => {
            let d = val(before, *row).numel();
            let mut drow = vec![T::ZERO; d];
            for (i, &gv) in g.data().iter().enumerate() {
                drow[i % d] += gv;
            }
            accum(before, *x, g.clone());
            accum(before, *row, Tensor::new(vec![d], drow)?);
        }
        Op::SliceCols { x, start, len } => {
            let vx = val(before, *x);
            let (n, d) = (vx.shape()[0], vx.shape()[1]);
            let mut dx = Tensor::zeros(vx.shape());
            for r in 0..n {
                for j in 0..*len {
                    dx.data_mut()[r * d + start + j] = g.data()[r * len + j];
                }
            }
            accum(before, *x, dx);
        }
        Op::ConcatCols(parts) => {
            let n = g.shape()[0];
            let total = g.shape()[1];
            let mut offset = 0;
            for &p in parts {
                let d = val(before, p).shape()[1];
                let mut dp = Tensor::zeros(val(before, p).shape());
                for r in 0..n {
                    for j in 0..d {
                        dp.data_mut()[r * d + j] = g.data()[r * total + offset + j];
                    }
                }
                accum(before, p, dp);
                offset += d;
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        } => {
            let vx = val(before, *x);
            let vg = val(before, *gamma);
            let d = *vx.shape().last().unwrap();
            let rows = vx.numel() / d;
            let inv_d = T::from_f64(1.0 / d as f64);
            let mut dx = Tensor::zeros(vx.shape());
            let mut dgamma = vec![T::ZERO; d];
            let mut dbeta = vec![T::ZERO; d];
            for r in 0..rows {
                let xrow = &vx.data()[r * d..(r + 1) * d];
                let grow = &g.data()[r * d..(r + 1) * d];
                let (m, rs) = (mean[r], rstd[r]);
                let mut m1 = T::ZERO;
                let mut m2 = T::ZERO;
                for j in 0..d {
                    let xhat = (xrow[j] - m) * rs;
                    let a = grow[j] * vg.data()[j];
                    m1 += a;
                    m2 += a * xhat;
                    dgamma[j] += grow[j] * xhat;
                    dbeta[j] += grow[j];
                }
                m1 = m1 * inv_d;
                m2 = m2 * inv_d;
                for j in 0..d {
                    let xhat = (xrow[j] - m) * rs;
                    let a = grow[j] * vg.data()[j];
                    dx.data_mut()[r * d + j] = rs * (a - m1 - xhat * m2);
                }
            }
            accum(before, *x, dx);
            accum(before, *gamma, Tensor::new(vec![d], dgamma)?);
            accum(before, *beta, Tensor::new(vec![d], dbeta)?);
        }
        Op::Softmax(x) => {
            let y = &node.value;
            let d = *y.shape().last().unwrap();
            let rows = y.numel() / d;
            let mut dx = Tensor::zeros(y.shape());
            for r in 0..rows {
                let yrow = &y.data()[r * d..(r + 1) * d];
                let grow = &g.data()[r * d..(r + 1) * d];
                let mut dot = T::ZERO;
                for j in 0..d {
                    dot += grow[j] * yrow[j];
                }
                for j in 0..d {
                    dx.data_mut()[r * d + j] = yrow[j] * (grow[j] - dot);
                }
            }
            accum(before, *x, dx);
        }
        Op::Gelu(x) => {
            let vx = val(before, *x);
            let dx = elementwise(g, vx, |gv, xv| gv * ops::gelu_prime_scalar(xv));
            accum(before, *x, dx);
        }
        Op::Sigmoid(x) => {
            let y = &node.value;
            let dx = elementwise(g, y, |gv, yv| gv * yv * (T::ONE - yv));
            accum(before, *x, dx);
        }
        Op::Tanh(x) => {
            let y = &node.value;
            let dx = elementwise(g, y, |gv, yv| gv * (T::ONE - yv * yv));
            accum(before, *x, dx);
        }
        Op::Softplus(x) => {
            let vx = val(before, *x);
            let dx = elementwise(g, vx, |gv, xv| gv * ops::sigmoid_scalar(xv));
            accum(before, *x, dx);
        }
        Op::Trilinear { vol, coords } => {
            let (dvol, dcoords) = trilinear_backward(val(before, *vol), val(before, *coords), g)?;
            accum(before, *vol, dvol);
            accum(before, *coords, dcoords);
        }
        Op::PatchConv3 {
            input,
            weight,
            stride_h,
            stride_w,
        } => {
            let (dinput, dweight) = patch_conv3_backward(
                val(before, *input),
                val(before, *weight),
                g,
                *stride_h,
                *stride_w,
            )?;
            accum(before, *input, dinput);
            accum(before, *weight, dweight);
        }
        Op::Conv2dSame {
            input,
            weight,
            bias,
        } => {
            let (dinput, dweight, dbias) =
                conv2d_same_backward(val(before, *input), val(before, *weight), g)?;
            accum(before, *input, dinput);
            accum(before, *weight, dweight);
            accum(before, *bias, dbias);
        }
        Op::Upsample2 { input, factor } => {
            let vi = val(before, *input);
            let (c, h, w) = (vi.shape()[0], vi.shape()[1], vi.shape()[2]);
            let f = *factor;
            let (oh, ow) = (h * f, w * f);
            let mut di = Tensor::zeros(vi.shape());
            for ic in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        di.data_mut()[(ic * h + y / f) * w + x / f] +=
                            g.data()[(ic * oh + y) * ow + x];
                    }
                }
            }
            accum(before, *input, di);
        }
        Op::PadReplicateHw(input) => {
            let vi = val(before, *input);
            let (d, h, w) = (vi.shape()[0], vi.shape()[1], vi.shape()[2]);
            let (th, tw) = (g.shape()[1], g.shape()[2]);
            let mut di = Tensor::zeros(vi.shape());
            for z in 0..d {
                for y in 0..th {
                    let sy = y.min(h - 1);
                    for x in 0..tw {
                        di.data_mut()[(z * h + sy) * w + x.min(w - 1)] +=
                            g.data()[(z * th + y) * tw + x];
                    }
                }
            }
            accum(before, *input, di);
        }
        Op::CropHw(input) => {
            let vi = val(before, *input);
            let (c, h, w) = (vi.shape()[0], vi.shape()[1], vi.shape()[2]);
            let (oh, ow) = (g.shape()[1], g.shape()[2]);
            let mut di = Tensor::zeros(vi.shape());
            for ic in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        di.data_mut()[(ic * h + y) * w + x] = g.data()[(ic * oh + y) * ow + x];
                    }
                }
            }
            accum(before, *input, di);
        }
        Op::TokensToGrid { input, gh, gw } => {
            let a = gh * gw;
            let e = g.shape()[0];
            let mut di = Tensor::zeros(val(before, *input).shape());
            for i in 0..a {
                for j in 0..e {
                    di.data_mut()[i * e + j] = g.data()[j * a + i];
                }
            }
            accum(before, *input, di);
        }
        Op::Custom { op, inputs } => {
            let input_vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(before, v)).collect();
            let grads = op.backward(g, &input_vals);
            debug_assert_eq!(grads.len(), inputs.len());
            for (v, dg) in inputs.iter().zip(grads) {
                if let Some(dg) = dg {
                    accum(before, *v, dg);
                }
            }
        }
    }
    Ok(())
}

fn elementwise<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.numel(), b.numel());
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
    .expect("elementwise shapes verified by caller")
}

fn trilinear_backward<T: Element>(
    vol: &Tensor<T>,
    coords: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let extents = [vol.shape()[0], vol.shape()[1], vol.shape()[2]];
    let (h, w) = (extents[1], extents[2]);
    let n = coords.shape()[0];
    let vd = vol.data();
    let cd = coords.data();
    let mut dvol = Tensor::zeros(vol.shape());
    let mut dcoords = Tensor::zeros(coords.shape());
    for i in 0..n {
        let gv = g.data()[i];
        let cell = ops::trilinear_cell(extents, [cd[3 * i], cd[3 * i + 1], cd[3 * i + 2]]);
        let [fz, fy, fx] = cell.frac;
        let wz = [T::ONE - fz, fz];
        let wy = [T::ONE - fy, fy];
        let wx = [T::ONE - fx, fx];
        let zi = [cell.lo[0], cell.hi[0]];
        let yi = [cell.lo[1], cell.hi[1]];
        let xi = [cell.lo[2], cell.hi[2]];
        let mut dz = T::ZERO;
        let mut dy = T::ZERO;
        let mut dx = T::ZERO;
        for bz in 0..2 {
            for by in 0..2 {
                for bx in 0..2 {
                    let idx = (zi[bz] * h + yi[by]) * w + xi[bx];
                    let v = vd[idx];
                    let sz = if bz == 0 { -T::ONE } else { T::ONE };
                    let sy = if by == 0 { -T::ONE } else { T::ONE };
                    let sx = if bx == 0 { -T::ONE } else { T::ONE };
                    dvol.data_mut()[idx] += gv * wz[bz] * wy[by] * wx[bx];
                    dz += sz * wy[by] * wx[bx] * v;
                    dy += wz[bz] * sy * wx[bx] * v;
                    dx += wz[bz] * wy[by] * sx * v;
                }
            }
        }
        // Subgradient of the clamp: zero along any clamped axis.
        dcoords.data_mut()[3 * i] = if cell.clamped[0] { T::ZERO } else { gv * dz };
        dcoords.data_mut()[3 * i + 1] = if cell.clamped[1] { T::ZERO } else { gv * dy };
        dcoords.data_mut()[3 * i + 2] = if cell.clamped[2] { T::ZERO } else { gv * dx };
    }
    Ok((dvol, dcoords))
}

fn patch_conv3_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    g: &Tensor<T>,
    stride_h: usize,
    stride_w: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (k, kd, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    let ow = (w - kw) / stride_w + 1;
    let anchors = g.shape()[0];
    let mut dinput = Tensor::zeros(input.shape());
    let mut dweight = Tensor::zeros(weight.shape());
    let (id, wd) = (input.data(), weight.data());
    for a in 0..anchors {
        let base_h = (a / ow) * stride_h;
        let base_w = (a % ow) * stride_w;
        for o in 0..k {
            let gv = g.data()[a * k + o];
            if gv == T::ZERO {
                continue;
            }
            for zz in 0..kd {
                for yy in 0..kh {
                    let irow = (zz * h + base_h + yy) * w + base_w;
                    let wrow = ((o * kd + zz) * kh + yy) * kw;
                    for xx in 0..kw {
                        dinput.data_mut()[irow + xx] += gv * wd[wrow + xx];
                        dweight.data_mut()[wrow + xx] += gv * id[irow + xx];
                    }
                }
            }
        }
    }
    Ok((dinput, dweight))
}

fn conv2d_same_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (o, _, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    let (ph, pw) = (kh / 2, kw / 2);
    let mut dinput = Tensor::zeros(input.shape());
    let mut dweight = Tensor::zeros(weight.shape());
    let mut dbias = vec![T::ZERO; o];
    let (id, wd) = (input.data(), weight.data());
    for oc in 0..o {
        for y in 0..h {
            for x in 0..w {
                let gv = g.data()[(oc * h + y) * w + x];
                if gv == T::ZERO {
                    continue;
                }
                dbias[oc] += gv;
                for ic in 0..c {
                    for ky in 0..kh {
                        let iy = y as isize + ky as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = x as isize + kx as isize - pw as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let iidx = (ic * h + iy as usize) * w + ix as usize;
                            let widx = ((oc * c + ic) * kh + ky) * kw + kx;
                            dinput.data_mut()[iidx] += gv * wd[widx];
                            dweight.data_mut()[widx] += gv * id[iidx];
                        }
                    }
                }
            }
        }
    }
    Ok((dinput, dweight, Tensor::new(vec![o], dbias)?))
}
