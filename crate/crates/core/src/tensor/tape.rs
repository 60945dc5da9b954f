//! Reverse-mode differentiation tape.
//!
//! Nodes are recorded in execution order, which is also a topological order,
//! so `backward` just walks the node list from the end. Leaf gradients are
//! accumulated across `backward` calls until [`Tape::zero_grad`] or
//! [`Tape::reset`].

use std::fmt;

use super::kernels::{self, LayerNormSaved};
use super::{Shape, Tensor};
use crate::conv::kernels as ck;
use crate::error::{Result, WauError};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-supplied backward rule for [`Tape::custom`]. Returns one gradient
/// per input, shaped like that input.
pub trait CustomBackward<T>: Send + Sync {
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Tensor<T>>;
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sum(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        rows: usize,
        inner: usize,
        cols: usize,
    },
    MatMulBt {
        a: Var,
        b: Var,
        batch: usize,
        rows: usize,
        inner: usize,
        cols: usize,
    },
    Softmax {
        x: Var,
        cols: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: LayerNormSaved<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        groups: usize,
    },
    Bilinear {
        x: Var,
        factor: usize,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        factor: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat(Var, Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    SegLoss {
        logits: Var,
        dlogits: Tensor<T>,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomBackward<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(WauError::dim(op, format!("{a} vs {b}")));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every recorded node and gradient.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        value.ensure_finite(name, "output")?;
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        value.ensure_finite("leaf", "input")?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.record("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.shape(a), self.shape(b))?;
        let bv = self.value(b).data();
        let data = self.value(a).data().iter().zip(bv).map(|(&x, &y)| x - y).collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        self.record("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let bv = self.value(b).data();
        let data = self.value(a).data().iter().zip(bv).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        self.record("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        self.record("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(T::zero()));
        self.record("relu", out, Op::Relu(a), &[a])
    }

    /// Sum of all elements as a scalar tensor, accumulated left to right.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.record("sum", out, Op::Sum(a), &[a])
    }

    /// Batched matrix product. Both operands are viewed as `N*C` stacked
    /// matrices of `H x W`; `a` is `rows x inner`, `b` is `inner x cols`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.n != sb.n || sa.c != sb.c || sa.w != sb.h {
            return Err(WauError::dim("matmul", format!("{sa} x {sb}")));
        }
        let (batch, rows, inner, cols) = (sa.n * sa.c, sa.h, sa.w, sb.w);
        let data = kernels::matmul_nn(self.value(a).data(), self.value(b).data(), batch, rows, inner, cols);
        let out = Tensor::from_vec(Shape::new(sa.n, sa.c, rows, cols), data)?;
        self.record(
            "matmul",
            out,
            Op::MatMul {
                a,
                b,
                batch,
                rows,
                inner,
                cols,
            },
            &[a, b],
        )
    }

    /// Batched `a * b^T`; `a` is `rows x inner`, `b` is `cols x inner`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.n != sb.n || sa.c != sb.c || sa.w != sb.w {
            return Err(WauError::dim("matmul_bt", format!("{sa} x {sb}^T")));
        }
        let (batch, rows, inner, cols) = (sa.n * sa.c, sa.h, sa.w, sb.h);
        let data = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), batch, rows, inner, cols);
        let out = Tensor::from_vec(Shape::new(sa.n, sa.c, rows, cols), data)?;
        self.record(
            "matmul_bt",
            out,
            Op::MatMulBt {
                a,
                b,
                batch,
                rows,
                inner,
                cols,
            },
            &[a, b],
        )
    }

    /// Softmax along the last (width) axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let data = kernels::softmax_rows(self.value(x).data(), s.w);
        let out = Tensor::from_vec(s, data)?;
        self.record("softmax_rows", out, Op::Softmax { x, cols: s.w }, &[x])
    }

    /// Layer norm over channels; `gamma` and `beta` are `1xCx1x1`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let s = self.shape(x);
        let affine = Shape::new(1, s.c, 1, 1);
        same_shape("layer_norm gamma", self.shape(gamma), affine)?;
        same_shape("layer_norm beta", self.shape(beta), affine)?;
        let (data, saved) = kernels::layer_norm(
            self.value(x).data(),
            s.n,
            s.c,
            s.plane(),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let out = Tensor::from_vec(s, data)?;
        self.record(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                saved,
            },
            &[x, gamma, beta],
        )
    }

    /// "Same"-padded stride-1 convolution. `w` is `C_out x C_in/groups x k x k`
    /// with odd `k`; `b` is `1xC_outx1x1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, groups: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        ck::check_conv(xs, ws, groups)?;
        if let Some(b) = b {
            same_shape("conv2d bias", self.shape(b), Shape::new(1, ws.n, 1, 1))?;
        }
        let bias = b.map(|b| self.value(b).data());
        let data = ck::conv2d_forward(self.value(x).data(), xs, self.value(w).data(), ws, bias, groups);
        let out = Tensor::from_vec(Shape::new(xs.n, ws.n, xs.h, xs.w), data)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.record("conv2d", out, Op::Conv2d { x, w, b, groups }, &parents)
    }

    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(WauError::contract("bilinear_upsample", "factor must be >= 1"));
        }
        let xs = self.shape(x);
        let data = ck::bilinear_forward(self.value(x).data(), xs, factor);
        let out = Tensor::from_vec(Shape::new(xs.n, xs.c, xs.h * factor, xs.w * factor), data)?;
        self.record("bilinear_upsample", out, Op::Bilinear { x, factor }, &[x])
    }

    /// Transposed convolution with kernel `2n`, stride `n`, output exactly
    /// `n` times the input. `w` is `C_in x C_out x 2n x 2n`.
    pub fn conv_transpose_upsample(&mut self, x: Var, w: Var, b: Option<Var>, factor: usize) -> Result<Var> {
        if factor < 2 {
            return Err(WauError::contract(
                "transposed_conv_upsample",
                format!("factor must be >= 2, got {factor}"),
            ));
        }
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.n != xs.c || ws.h != 2 * factor || ws.w != 2 * factor {
            return Err(WauError::dim(
                "transposed_conv_upsample",
                format!("input {xs} incompatible with kernel {ws} for factor {factor}"),
            ));
        }
        if let Some(b) = b {
            same_shape("transposed_conv bias", self.shape(b), Shape::new(1, ws.c, 1, 1))?;
        }
        let bias = b.map(|b| self.value(b).data());
        let data = ck::conv_transpose_forward(self.value(x).data(), xs, self.value(w).data(), ws, bias, factor);
        let out = Tensor::from_vec(Shape::new(xs.n, ws.c, xs.h * factor, xs.w * factor), data)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.record("transposed_conv_upsample", out, Op::ConvTranspose { x, w, b, factor }, &parents)
    }

    /// 2x2 max pooling with stride 2; ties resolve to the first element in
    /// raster order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if !xs.h.is_multiple_of(2) || !xs.w.is_multiple_of(2) {
            return Err(WauError::dim("max_pool2", format!("{xs} has odd spatial dims")));
        }
        let (data, argmax) = ck::max_pool2_forward(self.value(x).data(), xs);
        let out = Tensor::from_vec(Shape::new(xs.n, xs.c, xs.h / 2, xs.w / 2), data)?;
        self.record("max_pool2", out, Op::MaxPool2 { x, argmax }, &[x])
    }

    /// Concatenate along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
            return Err(WauError::dim("concat_channels", format!("{sa} vs {sb}")));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let (la, lb) = (sa.c * sa.plane(), sb.c * sb.plane());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for n in 0..sa.n {
            data.extend_from_slice(&av[n * la..(n + 1) * la]);
            data.extend_from_slice(&bv[n * lb..(n + 1) * lb]);
        }
        let out = Tensor::from_vec(Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w), data)?;
        self.record("concat_channels", out, Op::Concat(a, b), &[a, b])
    }

    /// `out[i] = x[index[i]]` reshaped to `shape`. Gradients scatter-add back.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Shape) -> Result<Var> {
        if index.len() != shape.numel() {
            return Err(WauError::dim(
                "gather",
                format!("{} indices for output {shape}", index.len()),
            ));
        }
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(WauError::dim("gather", format!("index {bad} out of range {}", src.len())));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::from_vec(shape, data)?;
        self.record("gather", out, Op::Gather { x, index }, &[x])
    }

    /// Segmentation loss: mean pixel cross-entropy plus `1 - mean soft Dice`
    /// over foreground classes `1..C`. `labels` holds one class per pixel in
    /// `N x H x W` order.
    pub fn seg_loss(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, dlogits) = crate::toyseg::loss::seg_loss_forward(self.value(logits), labels)?;
        self.record("seg_loss", Tensor::scalar(loss), Op::SegLoss { logits, dlogits }, &[logits])
    }

    /// Record an op whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        output: Tensor<T>,
        rule: Box<dyn CustomBackward<T>>,
    ) -> Result<Var> {
        self.record(
            name,
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            inputs,
        )
    }

    /// Reverse sweep from a scalar `loss`. Gradients of every node that
    /// requires them are added to the tape's gradient buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != Shape::scalar() {
            return Err(WauError::contract(
                "backward",
                format!("loss must be a scalar, got {}", self.shape(loss)),
            ));
        }
        let mut work: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        work[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = work[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            g.ensure_finite("backward", "gradient")?;
            for (parent, pg) in self.vjp(i, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut work[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            match &mut self.grads[i] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn vjp(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    out.push((*a, Tensor::from_vec(av.shape(), d)?));
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    out.push((*b, Tensor::from_vec(bv.shape(), d)?));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.map(|v| v * *s))),
            Op::Relu(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*a, Tensor::from_vec(self.shape(*a), d)?));
            }
            Op::Sum(a) => out.push((*a, Tensor::full(self.shape(*a), g.item()))),
            &Op::MatMul {
                a,
                b,
                batch,
                rows,
                inner,
                cols,
            } => {
                if self.wants(a) {
                    let d = kernels::matmul_nt(g.data(), self.value(b).data(), batch, rows, cols, inner);
                    out.push((a, Tensor::from_vec(self.shape(a), d)?));
                }
                if self.wants(b) {
                    let d = kernels::matmul_tn(self.value(a).data(), g.data(), batch, rows, inner, cols);
                    out.push((b, Tensor::from_vec(self.shape(b), d)?));
                }
            }
            &Op::MatMulBt {
                a,
                b,
                batch,
                rows,
                inner,
                cols,
            } => {
                if self.wants(a) {
                    let d = kernels::matmul_nn(g.data(), self.value(b).data(), batch, rows, cols, inner);
                    out.push((a, Tensor::from_vec(self.shape(a), d)?));
                }
                if self.wants(b) {
                    let d = kernels::matmul_tn(g.data(), self.value(a).data(), batch, rows, cols, inner);
                    out.push((b, Tensor::from_vec(self.shape(b), d)?));
                }
            }
            &Op::Softmax { x, cols } => {
                let d = kernels::softmax_rows_backward(node.value.data(), g.data(), cols);
                out.push((x, Tensor::from_vec(self.shape(x), d)?));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                saved,
            } => {
                let s = self.shape(*x);
                let (dx, dg, db) = kernels::layer_norm_backward(
                    g.data(),
                    saved,
                    s.n,
                    s.c,
                    s.plane(),
                    self.value(*gamma).data(),
                );
                let affine = Shape::new(1, s.c, 1, 1);
                out.push((*x, Tensor::from_vec(s, dx)?));
                out.push((*gamma, Tensor::from_vec(affine, dg)?));
                out.push((*beta, Tensor::from_vec(affine, db)?));
            }
            &Op::Conv2d { x, w, b, groups } => {
                let (xs, ws) = (self.shape(x), self.shape(w));
                if self.wants(x) {
                    let d = ck::conv2d_backward_input(g.data(), self.value(w).data(), ws, xs, groups);
                    out.push((x, Tensor::from_vec(xs, d)?));
                }
                if self.wants(w) {
                    let d = ck::conv2d_backward_weight(g.data(), self.value(x).data(), xs, ws, groups);
                    out.push((w, Tensor::from_vec(ws, d)?));
                }
                if let Some(b) = b {
                    let d = ck::bias_backward(g.data(), xs.n, ws.n, xs.plane());
                    out.push((b, Tensor::from_vec(self.shape(b), d)?));
                }
            }
            &Op::Bilinear { x, factor } => {
                let d = ck::bilinear_backward(g.data(), self.shape(x), factor);
                out.push((x, Tensor::from_vec(self.shape(x), d)?));
            }
            &Op::ConvTranspose { x, w, b, factor } => {
                let (xs, ws) = (self.shape(x), self.shape(w));
                if self.wants(x) {
                    let d = ck::conv_transpose_backward_input(g.data(), self.value(w).data(), ws, xs, factor);
                    out.push((x, Tensor::from_vec(xs, d)?));
                }
                if self.wants(w) {
                    let d = ck::conv_transpose_backward_weight(g.data(), self.value(x).data(), xs, ws, factor);
                    out.push((w, Tensor::from_vec(ws, d)?));
                }
                if let Some(b) = b {
                    let os = g.shape();
                    let d = ck::bias_backward(g.data(), os.n, os.c, os.plane());
                    out.push((b, Tensor::from_vec(self.shape(b), d)?));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut d = vec![T::zero(); self.value(*x).numel()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src] = d[src] + gv;
                }
                out.push((*x, Tensor::from_vec(self.shape(*x), d)?));
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (la, lb) = (sa.c * sa.plane(), sb.c * sb.plane());
                let mut da = Vec::with_capacity(sa.numel());
                let mut db = Vec::with_capacity(sb.numel());
                for chunk in g.data().chunks(la + lb) {
                    da.extend_from_slice(&chunk[..la]);
                    db.extend_from_slice(&chunk[la..]);
                }
                out.push((*a, Tensor::from_vec(sa, da)?));
                out.push((*b, Tensor::from_vec(sb, db)?));
            }
            Op::Gather { x, index } => {
                let mut d = vec![T::zero(); self.value(*x).numel()];
                for (&src, &gv) in index.iter().zip(g.data()) {
                    d[src] = d[src] + gv;
                }
                out.push((*x, Tensor::from_vec(self.shape(*x), d)?));
            }
            Op::SegLoss { logits, dlogits } => {
                let s = g.item();
                out.push((*logits, dlogits.map(|v| v * s)));
            }
            Op::Custom { inputs, rule } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = rule.backward(&vals, &node.value, g);
                if grads.len() != inputs.len() {
                    return Err(WauError::contract(
                        "custom backward",
                        format!("{} gradients for {} inputs", grads.len(), inputs.len()),
                    ));
                }
                for (v, gv) in inputs.iter().zip(grads) {
                    same_shape("custom backward", gv.shape(), self.shape(*v))?;
                    out.push((*v, gv));
                }
            }
        }
        Ok(out)
    }
}
