//! Reverse-mode automatic differentiation on an eager tape.
//!
//! Every operation records a node holding its forward value and the ids of
//! its parents. [`Tape::grad`] walks the recorded nodes in reverse and builds
//! the vector-Jacobian products *as further tape operations*, so a computed
//! gradient is itself a differentiable tape value. Second-order terms (for
//! example the parameter gradient of a gradient-norm penalty) fall out of
//! calling `grad` on a value built from an earlier `grad` result.
//!
//! Node construction order is deterministic, all reductions run in a fixed
//! order, and independent tapes are safe to use from independent threads.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::{expect_axis, expect_rank, expect_same_shape, Tensor};

/// Handle to a tape node.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) u32);

impl Var {
    fn ix(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Arc<Tensor<T>>),
    SumAll(Var),
    BcastScalar(Var),
    SumLast(Var),
    RepeatLast(Var),
    MulOuterLast(Var, Var),
    SumToLast(Var),
    BcastFromLast(Var),
    Sin(Var),
    Cos(Var),
    Sigmoid(Var),
    Softplus(Var),
    SqrtEps(Var),
    RsqrtEps(Var),
    LeakyRelu {
        x: Var,
        bias: Option<Var>,
        mask: Arc<Tensor<T>>,
    },
    Conv2d {
        x: Var,
        k: Var,
        stride: usize,
        pad: usize,
    },
    Conv2dInputGrad {
        g: Var,
        k: Var,
        stride: usize,
        pad: usize,
    },
    Conv2dKernelGrad {
        x: Var,
        g: Var,
        stride: usize,
        pad: usize,
    },
    BatchConv2d {
        x: Var,
        k: Var,
        stride: usize,
        pad: usize,
    },
    BatchConv2dInputGrad {
        g: Var,
        k: Var,
        stride: usize,
        pad: usize,
    },
    BatchConv2dKernelGrad {
        x: Var,
        g: Var,
        stride: usize,
        pad: usize,
    },
    Matmul(Var, Var),
    MatmulGx(Var, Var),
    MatmulGw(Var, Var),
    Fold(Var, usize),
    Unfold(Var, usize),
    Reshape(Var),
    NnUpsample(Var, usize),
    SumPool(Var, usize),
    ConcatLast(Var, Var),
    SliceLast { x: Var, lo: usize },
    EmbedLast { x: Var, lo: usize },
    RepeatBatch(Var),
    SumBatch(Var),
    GroupMeanBcast(Var, usize),
    MeanHwc(Var),
    BcastN(Var, [usize; 3]),
    OuterScaleKernel(Var, Var),
    OskVjpKernel(Var, Var),
    OskVjpS(Var, Var),
    SumKkci(Var),
    BcastKkci(Var),
    ScaleKernelPerOut(Var, Var),
    SwapKernelAxes34(Var),
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub requires_grad: bool,
    pub op: Op<T>,
}

/// Eager computation tape.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    macs: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), macs: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiplies executed by convolution and matrix-multiply kernels since
    /// the last [`Tape::reset_mac_count`].
    pub fn mac_count(&self) -> u64 {
        self.macs
    }

    pub fn reset_mac_count(&mut self) {
        self.macs = 0;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.ix()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.ix()].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.ix()].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        let id = self.nodes.len();
        assert!(id < u32::MAX as usize, "tape exceeded {} nodes", u32::MAX);
        self.nodes.push(Node { value, requires_grad, op });
        Var(id as u32)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.ix()].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies a value out of the graph as a non-differentiable leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.ix()].value.clone();
        self.leaf(value, false)
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        expect_same_shape("add", self.shape(a), self.shape(b))?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(value, self.rg(a) || self.rg(b), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        expect_same_shape("sub", self.shape(a), self.shape(b))?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(value, self.rg(a) || self.rg(b), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        expect_same_shape("mul", self.shape(a), self.shape(b))?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(value, self.rg(a) || self.rg(b), Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        expect_same_shape("div", self.shape(a), self.shape(b))?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x / y);
        Ok(self.push(value, self.rg(a) || self.rg(b), Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cv = T::from_f64(c);
        let value = self.value(a).map(|x| x * cv);
        self.push(value, self.rg(a), Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let cv = T::from_f64(c);
        let value = self.value(a).map(|x| x + cv);
        self.push(value, self.rg(a), Op::AddScalar(a))
    }

    /// Elementwise product with a constant tensor outside the graph.
    pub fn mul_const(&mut self, a: Var, c: Arc<Tensor<T>>) -> Result<Var> {
        expect_same_shape("mul_const", self.shape(a), c.shape())?;
        let value = zip_map(self.value(a), &c, |x, y| x * y);
        Ok(self.push(value, self.rg(a), Op::MulConst(a, c)))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.sin());
        self.push(value, self.rg(a), Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.cos());
        self.push(value, self.rg(a), Op::Cos(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid_stable);
        self.push(value, self.rg(a), Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus_stable);
        self.push(value, self.rg(a), Op::Softplus(a))
    }

    /// `sqrt(x + eps)` elementwise.
    pub fn sqrt_eps(&mut self, a: Var, eps: f64) -> Var {
        let e = T::from_f64(eps);
        let value = self.value(a).map(|x| (x + e).sqrt());
        self.push(value, self.rg(a), Op::SqrtEps(a))
    }

    /// `1 / sqrt(x + eps)` elementwise.
    pub fn rsqrt_eps(&mut self, a: Var, eps: f64) -> Var {
        let e = T::from_f64(eps);
        let value = self.value(a).map(|x| T::ONE / (x + e).sqrt());
        self.push(value, self.rg(a), Op::RsqrtEps(a))
    }

    /// Leaky ReLU with optional per-channel bias added first and a fixed
    /// output gain: `y = gain * leaky_relu(x + bias, slope)`.
    pub fn leaky_relu(&mut self, x: Var, bias: Option<Var>, slope: f64, gain: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::invalid("leaky_relu", "rank-0 input"))?;
        if let Some(b) = bias {
            expect_rank("leaky_relu bias", self.shape(b), 1)?;
            expect_axis("leaky_relu bias", self.shape(b), 0, c)?;
        }
        let sl = T::from_f64(slope);
        let gn = T::from_f64(gain);
        let xd = self.value(x).data();
        let bd = bias.map(|b| self.value(b).data());
        let n = xd.len();
        let mut mask = vec![T::ZERO; n];
        let mut out = vec![T::ZERO; n];
        for i in 0..n {
            let pre = match bd {
                Some(b) => xd[i] + b[i % c],
                None => xd[i],
            };
            let m = if pre >= T::ZERO { gn } else { gn * sl };
            mask[i] = m;
            out[i] = pre * m;
        }
        let mask = Arc::new(Tensor::from_vec(&shape, mask)?);
        let value = Tensor::from_vec(&shape, out)?;
        let rg = self.rg(x) || bias.map_or(false, |b| self.rg(b));
        Ok(self.push(value, rg, Op::LeakyRelu { x, bias, mask }))
    }

    // ---- reductions and broadcasts ---------------------------------------

    /// Sum of every element, producing a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut acc = T::ZERO;
        for &v in self.value(a).data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc), self.rg(a), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Broadcast of a rank-0 tensor to an arbitrary shape.
    pub fn bcast_scalar(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        expect_rank("bcast_scalar", self.shape(a), 0)?;
        let v = self.value(a).item();
        let value = Tensor::filled(shape, v);
        Ok(self.push(value, self.rg(a), Op::BcastScalar(a)))
    }

    /// Sum over the last axis: `[..., C] -> [...]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(Error::invalid("sum_last", "rank-0 input"));
        }
        let c = shape[shape.len() - 1];
        let lead = &shape[..shape.len() - 1];
        let mut out = Tensor::zeros(lead);
        let src = self.value(a).data();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            let mut acc = T::ZERO;
            for &v in &src[i * c..(i + 1) * c] {
                acc += v;
            }
            *o = acc;
        }
        Ok(self.push(out, self.rg(a), Op::SumLast(a)))
    }

    /// Repeat along a new last axis: `[...] -> [..., c]`.
    pub fn repeat_last(&mut self, a: Var, c: usize) -> Var {
        let mut shape = self.shape(a).to_vec();
        shape.push(c);
        let src = self.value(a).data();
        let mut out = Tensor::zeros(&shape);
        for (i, chunk) in out.data_mut().chunks_exact_mut(c).enumerate() {
            chunk.fill(src[i]);
        }
        self.push(out, self.rg(a), Op::RepeatLast(a))
    }

    /// `y[..., c] = a[..., c] * v[...]` where `v` has the leading shape of `a`.
    pub fn mul_outer_last(&mut self, a: Var, v: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(Error::invalid("mul_outer_last", "rank-0 input"));
        }
        let c = shape[shape.len() - 1];
        expect_same_shape("mul_outer_last", &shape[..shape.len() - 1], self.shape(v))?;
        let vd = self.value(v).data();
        let ad = self.value(a).data();
        let mut out = vec![T::ZERO; ad.len()];
        for (i, chunk) in out.chunks_exact_mut(c).enumerate() {
            let s = vd[i];
            for (o, &x) in chunk.iter_mut().zip(&ad[i * c..(i + 1) * c]) {
                *o = x * s;
            }
        }
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(value, self.rg(a) || self.rg(v), Op::MulOuterLast(a, v)))
    }

    /// Sum over all leading axes: `[..., C] -> [C]`.
    pub fn sum_to_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(Error::invalid("sum_to_last", "rank-0 input"));
        }
        let c = shape[shape.len() - 1];
        let mut out = Tensor::zeros(&[c]);
        let src = self.value(a).data();
        let od = out.data_mut();
        for chunk in src.chunks_exact(c) {
            for (o, &v) in od.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        Ok(self.push(out, self.rg(a), Op::SumToLast(a)))
    }

    /// Broadcast a `[C]` vector over leading axes to `shape` (last axis `C`).
    pub fn bcast_from_last(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        expect_rank("bcast_from_last", self.shape(a), 1)?;
        let c = self.shape(a)[0];
        expect_axis("bcast_from_last", shape, shape.len() - 1, c)?;
        let src = self.value(a).data().to_vec();
        let mut out = Tensor::zeros(shape);
        for chunk in out.data_mut().chunks_exact_mut(c) {
            chunk.copy_from_slice(&src);
        }
        Ok(self.push(out, self.rg(a), Op::BcastFromLast(a)))
    }

    // ---- convolution and matmul ------------------------------------------

    /// Direct cross-correlation. `x: [N,H,W,Ci]`, `k: [kh,kw,Ci,Co]`,
    /// output `[N,H',W',Co]` with `H' = (H + 2 pad - kh) / stride + 1`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        expect_rank("conv2d input", self.shape(x), 4)?;
        expect_rank("conv2d kernel", self.shape(k), 4)?;
        let ks = self.shape(k);
        if ks[0] != ks[1] {
            return Err(Error::invalid("conv2d", format!("non-square kernel {:?}", ks)));
        }
        expect_axis("conv2d", self.shape(x), 3, ks[2])?;
        let (value, macs) = kernels::conv2d_fwd(self.value(x), self.value(k), stride, pad);
        self.macs += macs;
        Ok(self.push(value, self.rg(x) || self.rg(k), Op::Conv2d { x, k, stride, pad }))
    }

    /// Adjoint of [`Tape::conv2d`] in its input slot. With stride 2 this is
    /// the stride-2 transposed convolution: `g: [N,h,w,Co]`, `k: [kh,kw,Ci,Co]`
    /// -> `[N, H, W, Ci]` where `(H, W)` is the conv input extent.
    pub fn conv2d_input_grad(&mut self, g: Var, k: Var, stride: usize, pad: usize, in_hw: (usize, usize)) -> Result<Var> {
        expect_rank("conv2d_input_grad", self.shape(g), 4)?;
        expect_rank("conv2d_input_grad kernel", self.shape(k), 4)?;
        let ks = self.shape(k);
        expect_axis("conv2d_input_grad", self.shape(g), 3, ks[3])?;
        let kk = ks[0];
        let expect_h = kernels::conv_out_extent(in_hw.0, kk, stride, pad);
        let expect_w = kernels::conv_out_extent(in_hw.1, kk, stride, pad);
        if self.shape(g)[1] != expect_h || self.shape(g)[2] != expect_w {
            return Err(Error::invalid(
                "conv2d_input_grad",
                format!("grad extent {:?} inconsistent with input {:?}", &self.shape(g)[1..3], in_hw),
            ));
        }
        let (value, macs) = kernels::conv2d_input_grad(self.value(g), self.value(k), stride, pad, in_hw);
        self.macs += macs;
        Ok(self.push(value, self.rg(g) || self.rg(k), Op::Conv2dInputGrad { g, k, stride, pad }))
    }

    /// Stride-2 transposed convolution with 3x3 kernels, doubling the
    /// spatial extent. Defined as the exact adjoint of stride-2 `conv2d`
    /// with the same kernel.
    pub fn transposed_conv2d(&mut self, x: Var, k: Var) -> Result<Var> {
        let ks = self.shape(k);
        if ks.len() != 4 || ks[0] != 3 || ks[1] != 3 {
            return Err(Error::invalid(
                "transposed_conv2d",
                format!("expected 3x3 kernel, got {:?}", ks),
            ));
        }
        let s = self.shape(x);
        let hw = (s[1] * 2, s[2] * 2);
        self.conv2d_input_grad(x, k, 2, 1, hw)
    }

    pub fn conv2d_kernel_grad(&mut self, x: Var, g: Var, stride: usize, pad: usize, ksize: usize) -> Result<Var> {
        expect_rank("conv2d_kernel_grad", self.shape(x), 4)?;
        expect_rank("conv2d_kernel_grad grad", self.shape(g), 4)?;
        let (value, macs) = kernels::conv2d_kernel_grad(self.value(x), self.value(g), stride, pad, ksize);
        self.macs += macs;
        Ok(self.push(value, self.rg(x) || self.rg(g), Op::Conv2dKernelGrad { x, g, stride, pad }))
    }

    /// Convolution with one kernel per batch sample: `k: [N,kh,kw,Ci,Co]`.
    pub fn batch_conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        expect_rank("batch_conv2d input", self.shape(x), 4)?;
        expect_rank("batch_conv2d kernel", self.shape(k), 5)?;
        let ks = self.shape(k);
        expect_axis("batch_conv2d", self.shape(x), 0, ks[0])?;
        expect_axis("batch_conv2d", self.shape(x), 3, ks[3])?;
        let (value, macs) = kernels::conv2d_fwd_batched(self.value(x), self.value(k), stride, pad);
        self.macs += macs;
        Ok(self.push(value, self.rg(x) || self.rg(k), Op::BatchConv2d { x, k, stride, pad }))
    }

    pub fn batch_conv2d_input_grad(&mut self, g: Var, k: Var, stride: usize, pad: usize, in_hw: (usize, usize)) -> Result<Var> {
        expect_rank("batch_conv2d_input_grad", self.shape(g), 4)?;
        expect_rank("batch_conv2d_input_grad kernel", self.shape(k), 5)?;
        let (value, macs) = kernels::conv2d_input_grad_batched(self.value(g), self.value(k), stride, pad, in_hw);
        self.macs += macs;
        Ok(self.push(value, self.rg(g) || self.rg(k), Op::BatchConv2dInputGrad { g, k, stride, pad }))
    }

    pub fn batch_conv2d_kernel_grad(&mut self, x: Var, g: Var, stride: usize, pad: usize, ksize: usize) -> Result<Var> {
        let (value, macs) = kernels::conv2d_kernel_grad_batched(self.value(x), self.value(g), stride, pad, ksize);
        self.macs += macs;
        Ok(self.push(value, self.rg(x) || self.rg(g), Op::BatchConv2dKernelGrad { x, g, stride, pad }))
    }

    /// Matrix product over the last axis: `x: [..., Ci]`, `w: [Ci, Co]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        expect_rank("matmul weight", self.shape(w), 2)?;
        let xs = self.shape(x).to_vec();
        if xs.is_empty() {
            return Err(Error::invalid("matmul", "rank-0 input"));
        }
        let ci = xs[xs.len() - 1];
        expect_axis("matmul", self.shape(w), 0, ci)?;
        let co = self.shape(w)[1];
        let m = self.value(x).numel() / ci;
        let (flat, macs) = kernels::matmul(self.value(x), self.value(w), m, ci, co);
        self.macs += macs;
        let mut out_shape = xs[..xs.len() - 1].to_vec();
        out_shape.push(co);
        let value = flat.reshaped(&out_shape)?;
        Ok(self.push(value, self.rg(x) || self.rg(w), Op::Matmul(x, w)))
    }

    fn matmul_gx(&mut self, g: Var, w: Var, x_shape: &[usize]) -> Result<Var> {
        let ws = self.shape(w);
        let (ci, co) = (ws[0], ws[1]);
        let m = self.value(g).numel() / co;
        let (flat, macs) = kernels::matmul_gx(self.value(g), self.value(w), m, ci, co);
        self.macs += macs;
        let value = flat.reshaped(x_shape)?;
        Ok(self.push(value, self.rg(g) || self.rg(w), Op::MatmulGx(g, w)))
    }

    fn matmul_gw(&mut self, x: Var, g: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ci = xs[xs.len() - 1];
        let gs = self.shape(g);
        let co = gs[gs.len() - 1];
        let m = self.value(x).numel() / ci;
        let (value, macs) = kernels::matmul_gw(self.value(x), self.value(g), m, ci, co);
        self.macs += macs;
        Ok(self.push(value, self.rg(x) || self.rg(g), Op::MatmulGw(x, g)))
    }

    /// Linear layer `y = x w + b` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            None => Ok(y),
            Some(b) => {
                let shape = self.shape(y).to_vec();
                let bb = self.bcast_from_last(b, &shape)?;
                self.add(y, bb)
            }
        }
    }

    // ---- shape movement --------------------------------------------------

    /// Space-to-depth: `[N,H,W,C] -> [N,H/k,W/k,C k^2]` with patch offsets
    /// major in the packed channel axis:
    /// `out[n,y,x,(dy k + dx) C + c] = in[n, y k + dy, x k + dx, c]`.
    pub fn fold(&mut self, x: Var, k: usize) -> Result<Var> {
        let value = fold_tensor(self.value(x), k)?;
        Ok(self.push(value, self.rg(x), Op::Fold(x, k)))
    }

    /// Depth-to-space, the exact inverse of [`Tape::fold`].
    pub fn unfold(&mut self, x: Var, k: usize) -> Result<Var> {
        let value = unfold_tensor(self.value(x), k)?;
        Ok(self.push(value, self.rg(x), Op::Unfold(x, k)))
    }

    /// Reinterprets the row-major data under a new shape of equal size.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, self.rg(x), Op::Reshape(x)))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn nn_upsample(&mut self, x: Var, f: usize) -> Result<Var> {
        expect_rank("nn_upsample", self.shape(x), 4)?;
        if f == 0 {
            return Err(Error::invalid("nn_upsample", "zero factor"));
        }
        let s = self.shape(x).to_vec();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let mut out = Tensor::zeros(&[n, h * f, w * f, c]);
        let src = self.value(x).data();
        let dst = out.data_mut();
        let (ho, wo) = (h * f, w * f);
        for ni in 0..n {
            for y in 0..ho {
                for x_ in 0..wo {
                    let si = ((ni * h + y / f) * w + x_ / f) * c;
                    let di = ((ni * ho + y) * wo + x_) * c;
                    dst[di..di + c].copy_from_slice(&src[si..si + c]);
                }
            }
        }
        Ok(self.push(out, self.rg(x), Op::NnUpsample(x, f)))
    }

    /// Sum over non-overlapping `f x f` blocks, the adjoint of
    /// [`Tape::nn_upsample`].
    pub fn sum_pool(&mut self, x: Var, f: usize) -> Result<Var> {
        expect_rank("sum_pool", self.shape(x), 4)?;
        let s = self.shape(x).to_vec();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::invalid(
                "sum_pool",
                format!("extent {}x{} not divisible by factor {}", h, w, f),
            ));
        }
        let (ho, wo) = (h / f, w / f);
        let mut out = Tensor::zeros(&[n, ho, wo, c]);
        let src = self.value(x).data();
        let dst = out.data_mut();
        for ni in 0..n {
            for y in 0..h {
                for x_ in 0..w {
                    let si = ((ni * h + y) * w + x_) * c;
                    let di = ((ni * ho + y / f) * wo + x_ / f) * c;
                    for cc in 0..c {
                        dst[di + cc] += src[si + cc];
                    }
                }
            }
        }
        Ok(self.push(out, self.rg(x), Op::SumPool(x, f)))
    }

    /// Mean over non-overlapping 2x2 blocks.
    pub fn avg_downsample2x(&mut self, x: Var) -> Result<Var> {
        let p = self.sum_pool(x, 2)?;
        Ok(self.scale(p, 0.25))
    }

    /// Concatenation along the channel (last) axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        expect_same_shape("concat_last lead", &sa[..sa.len() - 1], &sb[..sb.len() - 1])?;
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(ca + cb);
        let mut out = Tensor::zeros(&shape);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let dst = out.data_mut();
        let rows = ad.len() / ca;
        for r in 0..rows {
            dst[r * (ca + cb)..r * (ca + cb) + ca].copy_from_slice(&ad[r * ca..(r + 1) * ca]);
            dst[r * (ca + cb) + ca..(r + 1) * (ca + cb)].copy_from_slice(&bd[r * cb..(r + 1) * cb]);
        }
        Ok(self.push(out, self.rg(a) || self.rg(b), Op::ConcatLast(a, b)))
    }

    /// Channel range `[lo, hi)` along the last axis.
    pub fn slice_last(&mut self, x: Var, lo: usize, hi: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = s[s.len() - 1];
        if lo >= hi || hi > c {
            return Err(Error::invalid("slice_last", format!("range {}..{} of {}", lo, hi, c)));
        }
        let cw = hi - lo;
        let mut shape = s[..s.len() - 1].to_vec();
        shape.push(cw);
        let mut out = Tensor::zeros(&shape);
        let src = self.value(x).data();
        let dst = out.data_mut();
        for (r, chunk) in dst.chunks_exact_mut(cw).enumerate() {
            chunk.copy_from_slice(&src[r * c + lo..r * c + hi]);
        }
        Ok(self.push(out, self.rg(x), Op::SliceLast { x, lo }))
    }

    /// Embeds channels into a zero tensor with `total` channels at offset
    /// `lo`; the adjoint of [`Tape::slice_last`].
    pub fn embed_last(&mut self, x: Var, lo: usize, total: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let cw = s[s.len() - 1];
        if lo + cw > total {
            return Err(Error::invalid("embed_last", format!("{}+{} exceeds {}", lo, cw, total)));
        }
        let mut shape = s[..s.len() - 1].to_vec();
        shape.push(total);
        let mut out = Tensor::zeros(&shape);
        let src = self.value(x).data();
        let dst = out.data_mut();
        for (r, chunk) in src.chunks_exact(cw).enumerate() {
            dst[r * total + lo..r * total + lo + cw].copy_from_slice(chunk);
        }
        Ok(self.push(out, self.rg(x), Op::EmbedLast { x, lo }))
    }

    /// Repeats a singleton batch: `[1, ...] -> [n, ...]`.
    pub fn repeat_batch(&mut self, x: Var, n: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        expect_axis("repeat_batch", &s, 0, 1)?;
        let mut shape = s.clone();
        shape[0] = n;
        let src = self.value(x).data();
        let mut out = Tensor::zeros(&shape);
        for chunk in out.data_mut().chunks_exact_mut(src.len()) {
            chunk.copy_from_slice(src);
        }
        Ok(self.push(out, self.rg(x), Op::RepeatBatch(x)))
    }

    /// Sums the batch axis down to a singleton: `[n, ...] -> [1, ...]`.
    pub fn sum_batch(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(Error::invalid("sum_batch", "rank-0 input"));
        }
        let mut shape = s.clone();
        shape[0] = 1;
        let page = self.value(x).numel() / s[0];
        let mut out = Tensor::zeros(&shape);
        let src = self.value(x).data();
        let dst = out.data_mut();
        for chunk in src.chunks_exact(page) {
            for (o, &v) in dst.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        Ok(self.push(out, self.rg(x), Op::SumBatch(x)))
    }

    // ---- grouped statistics ----------------------------------------------

    /// Mean over contiguous batch groups, broadcast back to each member:
    /// `y[n, ...] = mean over the group containing n of x[m, ...]`.
    pub fn group_mean_bcast(&mut self, x: Var, group: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = s[0];
        if group == 0 || n % group != 0 {
            return Err(Error::invalid(
                "group_mean_bcast",
                format!("batch {} not divisible by group {}", n, group),
            ));
        }
        let page = self.value(x).numel() / n;
        let src = self.value(x).data();
        let mut out = Tensor::zeros(&s);
        let dst = out.data_mut();
        let inv = T::from_f64(1.0 / group as f64);
        let mut acc = vec![T::ZERO; page];
        for b in 0..n / group {
            acc.iter_mut().for_each(|v| *v = T::ZERO);
            for m in 0..group {
                let base = (b * group + m) * page;
                for (a, &v) in acc.iter_mut().zip(&src[base..base + page]) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|v| *v *= inv);
            for m in 0..group {
                let base = (b * group + m) * page;
                dst[base..base + page].copy_from_slice(&acc);
            }
        }
        Ok(self.push(out, self.rg(x), Op::GroupMeanBcast(x, group)))
    }

    /// Mean over spatial and channel axes: `[N,H,W,C] -> [N]`.
    pub fn mean_hwc(&mut self, x: Var) -> Result<Var> {
        expect_rank("mean_hwc", self.shape(x), 4)?;
        let s = self.shape(x).to_vec();
        let n = s[0];
        let page = s[1] * s[2] * s[3];
        let inv = T::from_f64(1.0 / page as f64);
        let src = self.value(x).data();
        let mut out = Tensor::zeros(&[n]);
        for (ni, o) in out.data_mut().iter_mut().enumerate() {
            let mut acc = T::ZERO;
            for &v in &src[ni * page..(ni + 1) * page] {
                acc += v;
            }
            *o = acc * inv;
        }
        Ok(self.push(out, self.rg(x), Op::MeanHwc(x)))
    }

    /// Broadcast `[N]` to `[N, h, w, c]`.
    pub fn bcast_n(&mut self, v: Var, hwc: [usize; 3]) -> Result<Var> {
        expect_rank("bcast_n", self.shape(v), 1)?;
        let n = self.shape(v)[0];
        let page = hwc[0] * hwc[1] * hwc[2];
        let src = self.value(v).data();
        let mut out = Tensor::zeros(&[n, hwc[0], hwc[1], hwc[2]]);
        for (ni, chunk) in out.data_mut().chunks_exact_mut(page).enumerate() {
            chunk.fill(src[ni]);
        }
        Ok(self.push(out, self.rg(v), Op::BcastN(v, hwc)))
    }

    // ---- per-sample kernel construction ----------------------------------

    /// Scales a shared kernel by per-sample styles:
    /// `y[n,i,j,c,l] = kernel[i,j,c,l] * s[n,c]`.
    pub fn outer_scale_kernel(&mut self, kernel: Var, s: Var) -> Result<Var> {
        expect_rank("outer_scale_kernel", self.shape(kernel), 4)?;
        expect_rank("outer_scale_kernel styles", self.shape(s), 2)?;
        let ks = self.shape(kernel).to_vec();
        expect_axis("outer_scale_kernel styles", self.shape(s), 1, ks[2])?;
        let n = self.shape(s)[0];
        let (kk, ci, co) = (ks[0] * ks[1], ks[2], ks[3]);
        let kd = self.value(kernel).data();
        let sd = self.value(s).data();
        let mut out = Tensor::zeros(&[n, ks[0], ks[1], ci, co]);
        let dst = out.data_mut();
        for ni in 0..n {
            for p in 0..kk {
                for c in 0..ci {
                    let sv = sd[ni * ci + c];
                    let src_row = &kd[(p * ci + c) * co..(p * ci + c + 1) * co];
                    let drow = &mut dst[((ni * kk + p) * ci + c) * co..((ni * kk + p) * ci + c + 1) * co];
                    for (o, &v) in drow.iter_mut().zip(src_row) {
                        *o = v * sv;
                    }
                }
            }
        }
        Ok(self.push(out, self.rg(kernel) || self.rg(s), Op::OuterScaleKernel(kernel, s)))
    }

    /// Adjoint of [`Tape::outer_scale_kernel`] in the kernel slot:
    /// `y[i,j,c,l] = sum_n u[n,i,j,c,l] * s[n,c]`.
    pub fn osk_vjp_kernel(&mut self, u: Var, s: Var) -> Result<Var> {
        expect_rank("osk_vjp_kernel", self.shape(u), 5)?;
        let us = self.shape(u).to_vec();
        let (n, kk, ci, co) = (us[0], us[1] * us[2], us[3], us[4]);
        let ud = self.value(u).data();
        let sd = self.value(s).data();
        let mut out = Tensor::zeros(&[us[1], us[2], ci, co]);
        let dst = out.data_mut();
        for ni in 0..n {
            for p in 0..kk {
                for c in 0..ci {
                    let sv = sd[ni * ci + c];
                    let urow = &ud[((ni * kk + p) * ci + c) * co..((ni * kk + p) * ci + c + 1) * co];
                    let drow = &mut dst[(p * ci + c) * co..(p * ci + c + 1) * co];
                    for (o, &v) in drow.iter_mut().zip(urow) {
                        *o += v * sv;
                    }
                }
            }
        }
        Ok(self.push(out, self.rg(u) || self.rg(s), Op::OskVjpKernel(u, s)))
    }

    /// Adjoint of [`Tape::outer_scale_kernel`] in the style slot:
    /// `y[n,c] = sum_{i,j,l} u[n,i,j,c,l] * kernel[i,j,c,l]`.
    pub fn osk_vjp_s(&mut self, u: Var, kernel: Var) -> Result<Var> {
        expect_rank("osk_vjp_s", self.shape(u), 5)?;
        let us = self.shape(u).to_vec();
        let (n, kk, ci, co) = (us[0], us[1] * us[2], us[3], us[4]);
        let ud = self.value(u).data();
        let kd = self.value(kernel).data();
        let mut out = Tensor::zeros(&[n, ci]);
        let dst = out.data_mut();
        for ni in 0..n {
            for p in 0..kk {
                for c in 0..ci {
                    let urow = &ud[((ni * kk + p) * ci + c) * co..((ni * kk + p) * ci + c + 1) * co];
                    let krow = &kd[(p * ci + c) * co..(p * ci + c + 1) * co];
                    let mut acc = T::ZERO;
                    for (&a, &b) in urow.iter().zip(krow) {
                        acc += a * b;
                    }
                    dst[ni * ci + c] += acc;
                }
            }
        }
        Ok(self.push(out, self.rg(u) || self.rg(kernel), Op::OskVjpS(u, kernel)))
    }

    /// Per-output-channel reduction of a per-sample kernel:
    /// `y[n,l] = sum_{i,j,c} x[n,i,j,c,l]`.
    pub fn sum_kkci(&mut self, x: Var) -> Result<Var> {
        expect_rank("sum_kkci", self.shape(x), 5)?;
        let s = self.shape(x).to_vec();
        let (n, rows, co) = (s[0], s[1] * s[2] * s[3], s[4]);
        let src = self.value(x).data();
        let mut out = Tensor::zeros(&[n, co]);
        let dst = out.data_mut();
        for ni in 0..n {
            let orow = &mut dst[ni * co..(ni + 1) * co];
            for r in 0..rows {
                let base = (ni * rows + r) * co;
                for (o, &v) in orow.iter_mut().zip(&src[base..base + co]) {
                    *o += v;
                }
            }
        }
        Ok(self.push(out, self.rg(x), Op::SumKkci(x)))
    }

    /// Broadcast `[N, Co]` over kernel taps to `[N, k, k, Ci, Co]`.
    pub fn bcast_kkci(&mut self, v: Var, kkci: [usize; 3]) -> Result<Var> {
        expect_rank("bcast_kkci", self.shape(v), 2)?;
        let (n, co) = (self.shape(v)[0], self.shape(v)[1]);
        let rows = kkci[0] * kkci[1] * kkci[2];
        let src = self.value(v).data();
        let mut out = Tensor::zeros(&[n, kkci[0], kkci[1], kkci[2], co]);
        let dst = out.data_mut();
        for ni in 0..n {
            let srow = &src[ni * co..(ni + 1) * co];
            for r in 0..rows {
                dst[(ni * rows + r) * co..(ni * rows + r + 1) * co].copy_from_slice(srow);
            }
        }
        Ok(self.push(out, self.rg(v), Op::BcastKkci(v)))
    }

    /// Scales each output-channel slice of a per-sample kernel:
    /// `y[n,i,j,c,l] = x[n,i,j,c,l] * r[n,l]`.
    pub fn scale_kernel_per_out(&mut self, x: Var, r: Var) -> Result<Var> {
        expect_rank("scale_kernel_per_out", self.shape(x), 5)?;
        expect_rank("scale_kernel_per_out scales", self.shape(r), 2)?;
        let s = self.shape(x).to_vec();
        let (n, rows, co) = (s[0], s[1] * s[2] * s[3], s[4]);
        expect_axis("scale_kernel_per_out scales", self.shape(r), 1, co)?;
        let src = self.value(x).data();
        let rd = self.value(r).data();
        let mut out = Tensor::zeros(&s);
        let dst = out.data_mut();
        for ni in 0..n {
            let rrow = &rd[ni * co..(ni + 1) * co];
            for row in 0..rows {
                let base = (ni * rows + row) * co;
                for l in 0..co {
                    dst[base + l] = src[base + l] * rrow[l];
                }
            }
        }
        Ok(self.push(out, self.rg(x) || self.rg(r), Op::ScaleKernelPerOut(x, r)))
    }

    /// Swaps the trailing `[Ci, Co]` axes of a per-sample kernel.
    pub fn swap_kernel_axes34(&mut self, x: Var) -> Result<Var> {
        expect_rank("swap_kernel_axes34", self.shape(x), 5)?;
        let s = self.shape(x).to_vec();
        let (pages, ci, co) = (s[0] * s[1] * s[2], s[3], s[4]);
        let src = self.value(x).data();
        let mut out = Tensor::zeros(&[s[0], s[1], s[2], co, ci]);
        let dst = out.data_mut();
        for p in 0..pages {
            let base = p * ci * co;
            for c in 0..ci {
                for l in 0..co {
                    dst[base + l * ci + c] = src[base + c * co + l];
                }
            }
        }
        Ok(self.push(out, self.rg(x), Op::SwapKernelAxes34(x)))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse-mode gradients of a scalar `loss` with respect to `wrt`.
    ///
    /// The vector-Jacobian products are recorded on the tape, so the returned
    /// gradients are differentiable values; entries are `None` when no path
    /// connects the corresponding input to the loss.
    pub fn grad(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Option<Var>>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "grad",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let seed = {
            let t = Tensor::filled(self.shape(loss), T::ONE);
            self.leaf(t, false)
        };
        let upper = loss.ix();
        let mut cot: Vec<Option<Var>> = vec![None; upper + 1];
        cot[upper] = Some(seed);

        for id in (0..=upper).rev() {
            let Some(g) = cot[id] else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            let contribs = self.vjp(Var(id as u32), &op, g)?;
            for (parent, contribution) in contribs {
                if !self.rg(parent) {
                    continue;
                }
                let slot = parent.ix();
                debug_assert!(slot < id, "parent {} not older than node {}", slot, id);
                cot[slot] = Some(match cot[slot] {
                    None => contribution,
                    Some(prev) => self.add(prev, contribution)?,
                });
            }
        }

        Ok(wrt
            .iter()
            .map(|v| if v.ix() <= upper { cot[v.ix()] } else { None })
            .collect())
    }

    /// Builds per-parent cotangent contributions for one node.
    fn vjp(&mut self, y: Var, op: &Op<T>, g: Var) -> Result<Vec<(Var, Var)>> {
        let mut out = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((a, g));
                out.push((b, g));
            }
            Op::Sub(a, b) => {
                out.push((a, g));
                let n = self.neg(g);
                out.push((b, n));
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let c = self.mul(g, b)?;
                    out.push((a, c));
                }
                if self.rg(b) {
                    let c = self.mul(g, a)?;
                    out.push((b, c));
                }
            }
            Op::Div(a, b) => {
                if self.rg(a) {
                    let c = self.div(g, b)?;
                    out.push((a, c));
                }
                if self.rg(b) {
                    let q = self.div(y, b)?;
                    let p = self.mul(g, q)?;
                    let c = self.neg(p);
                    out.push((b, c));
                }
            }
            Op::Scale(a, c) => {
                let s = self.scale(g, c);
                out.push((a, s));
            }
            Op::AddScalar(a) => out.push((a, g)),
            Op::MulConst(a, ref m) => {
                let c = self.mul_const(g, m.clone())?;
                out.push((a, c));
            }
            Op::SumAll(a) => {
                let shape = self.shape(a).to_vec();
                let c = self.bcast_scalar(g, &shape)?;
                out.push((a, c));
            }
            Op::BcastScalar(a) => {
                let c = self.sum_all(g);
                out.push((a, c));
            }
            Op::SumLast(a) => {
                let c_len = *self.shape(a).last().unwrap();
                let c = self.repeat_last(g, c_len);
                out.push((a, c));
            }
            Op::RepeatLast(a) => {
                let c = self.sum_last(g)?;
                out.push((a, c));
            }
            Op::MulOuterLast(a, v) => {
                if self.rg(a) {
                    let c = self.mul_outer_last(g, v)?;
                    out.push((a, c));
                }
                if self.rg(v) {
                    let p = self.mul(g, a)?;
                    let c = self.sum_last(p)?;
                    out.push((v, c));
                }
            }
            Op::SumToLast(a) => {
                let shape = self.shape(a).to_vec();
                let c = self.bcast_from_last(g, &shape)?;
                out.push((a, c));
            }
            Op::BcastFromLast(a) => {
                let c = self.sum_to_last(g)?;
                out.push((a, c));
            }
            Op::Sin(a) => {
                let ca = self.cos(a);
                let c = self.mul(g, ca)?;
                out.push((a, c));
            }
            Op::Cos(a) => {
                let sa = self.sin(a);
                let p = self.mul(g, sa)?;
                let c = self.neg(p);
                out.push((a, c));
            }
            Op::Sigmoid(a) => {
                let ny = self.neg(y);
                let om = self.add_scalar(ny, 1.0);
                let yy = self.mul(y, om)?;
                let c = self.mul(g, yy)?;
                out.push((a, c));
            }
            Op::Softplus(a) => {
                let s = self.sigmoid(a);
                let c = self.mul(g, s)?;
                out.push((a, c));
            }
            Op::SqrtEps(a) => {
                let half = self.scale(g, 0.5);
                let c = self.div(half, y)?;
                out.push((a, c));
            }
            Op::RsqrtEps(a) => {
                let y2 = self.mul(y, y)?;
                let y3 = self.mul(y2, y)?;
                let p = self.mul(g, y3)?;
                let c = self.scale(p, -0.5);
                out.push((a, c));
            }
            Op::LeakyRelu { x, bias, ref mask } => {
                let gx = self.mul_const(g, mask.clone())?;
                out.push((x, gx));
                if let Some(b) = bias {
                    if self.rg(b) {
                        let gb = self.sum_to_last(gx)?;
                        out.push((b, gb));
                    }
                }
            }
            Op::Conv2d { x, k, stride, pad } => {
                if self.rg(x) {
                    let s = self.shape(x);
                    let hw = (s[1], s[2]);
                    let c = self.conv2d_input_grad(g, k, stride, pad, hw)?;
                    out.push((x, c));
                }
                if self.rg(k) {
                    let ksize = self.shape(k)[0];
                    let c = self.conv2d_kernel_grad(x, g, stride, pad, ksize)?;
                    out.push((k, c));
                }
            }
            Op::Conv2dInputGrad { g: b, k, stride, pad } => {
                if self.rg(b) {
                    let c = self.conv2d(g, k, stride, pad)?;
                    out.push((b, c));
                }
                if self.rg(k) {
                    let ksize = self.shape(k)[0];
                    let c = self.conv2d_kernel_grad(g, b, stride, pad, ksize)?;
                    out.push((k, c));
                }
            }
            Op::Conv2dKernelGrad { x, g: b, stride, pad } => {
                if self.rg(x) {
                    let s = self.shape(x);
                    let hw = (s[1], s[2]);
                    let c = self.conv2d_input_grad(b, g, stride, pad, hw)?;
                    out.push((x, c));
                }
                if self.rg(b) {
                    let c = self.conv2d(x, g, stride, pad)?;
                    out.push((b, c));
                }
            }
            Op::BatchConv2d { x, k, stride, pad } => {
                if self.rg(x) {
                    let s = self.shape(x);
                    let hw = (s[1], s[2]);
                    let c = self.batch_conv2d_input_grad(g, k, stride, pad, hw)?;
                    out.push((x, c));
                }
                if self.rg(k) {
                    let ksize = self.shape(k)[1];
                    let c = self.batch_conv2d_kernel_grad(x, g, stride, pad, ksize)?;
                    out.push((k, c));
                }
            }
            Op::BatchConv2dInputGrad { g: b, k, stride, pad } => {
                if self.rg(b) {
                    let c = self.batch_conv2d(g, k, stride, pad)?;
                    out.push((b, c));
                }
                if self.rg(k) {
                    let ksize = self.shape(k)[1];
                    let c = self.batch_conv2d_kernel_grad(g, b, stride, pad, ksize)?;
                    out.push((k, c));
                }
            }
            Op::BatchConv2dKernelGrad { x, g: b, stride, pad } => {
                if self.rg(x) {
                    let s = self.shape(x);
                    let hw = (s[1], s[2]);
                    let c = self.batch_conv2d_input_grad(b, g, stride, pad, hw)?;
                    out.push((x, c));
                }
                if self.rg(b) {
                    let c = self.batch_conv2d(x, g, stride, pad)?;
                    out.push((b, c));
                }
            }
            Op::Matmul(x, w) => {
                if self.rg(x) {
                    let xs = self.shape(x).to_vec();
                    let c = self.matmul_gx(g, w, &xs)?;
                    out.push((x, c));
                }
                if self.rg(w) {
                    let c = self.matmul_gw(x, g)?;
                    out.push((w, c));
                }
            }
            Op::MatmulGx(b, w) => {
                if self.rg(b) {
                    let c = self.matmul(g, w)?;
                    out.push((b, c));
                }
                if self.rg(w) {
                    let c = self.matmul_gw(g, b)?;
                    out.push((w, c));
                }
            }
            Op::MatmulGw(x, b) => {
                if self.rg(x) {
                    let xs = self.shape(x).to_vec();
                    let c = self.matmul_gx(b, g, &xs)?;
                    out.push((x, c));
                }
                if self.rg(b) {
                    let c = self.matmul(x, g)?;
                    out.push((b, c));
                }
            }
            Op::Fold(a, k) => {
                let c = self.unfold(g, k)?;
                out.push((a, c));
            }
            Op::Unfold(a, k) => {
                let c = self.fold(g, k)?;
                out.push((a, c));
            }
            Op::Reshape(a) => {
                let back = self.shape(a).to_vec();
                let c = self.reshape(g, &back)?;
                out.push((a, c));
            }
            Op::NnUpsample(a, f) => {
                let c = self.sum_pool(g, f)?;
                out.push((a, c));
            }
            Op::SumPool(a, f) => {
                let c = self.nn_upsample(g, f)?;
                out.push((a, c));
            }
            Op::ConcatLast(a, b) => {
                let ca = *self.shape(a).last().unwrap();
                let cb = *self.shape(b).last().unwrap();
                if self.rg(a) {
                    let c = self.slice_last(g, 0, ca)?;
                    out.push((a, c));
                }
                if self.rg(b) {
                    let c = self.slice_last(g, ca, ca + cb)?;
                    out.push((b, c));
                }
            }
            Op::SliceLast { x, lo } => {
                let total = *self.shape(x).last().unwrap();
                let c = self.embed_last(g, lo, total)?;
                out.push((x, c));
            }
            Op::EmbedLast { x, lo } => {
                let cw = *self.shape(x).last().unwrap();
                let c = self.slice_last(g, lo, lo + cw)?;
                out.push((x, c));
            }
            Op::RepeatBatch(a) => {
                let c = self.sum_batch(g)?;
                out.push((a, c));
            }
            Op::SumBatch(a) => {
                let n = self.shape(a)[0];
                let c = self.repeat_batch(g, n)?;
                out.push((a, c));
            }
            Op::GroupMeanBcast(a, group) => {
                let c = self.group_mean_bcast(g, group)?;
                out.push((a, c));
            }
            Op::MeanHwc(a) => {
                let s = self.shape(a).to_vec();
                let hwc = [s[1], s[2], s[3]];
                let b = self.bcast_n(g, hwc)?;
                let c = self.scale(b, 1.0 / (s[1] * s[2] * s[3]) as f64);
                out.push((a, c));
            }
            Op::BcastN(v, hwc) => {
                let m = self.mean_hwc(g)?;
                let c = self.scale(m, (hwc[0] * hwc[1] * hwc[2]) as f64);
                out.push((v, c));
            }
            Op::OuterScaleKernel(kern, s) => {
                if self.rg(kern) {
                    let c = self.osk_vjp_kernel(g, s)?;
                    out.push((kern, c));
                }
                if self.rg(s) {
                    let c = self.osk_vjp_s(g, kern)?;
                    out.push((s, c));
                }
            }
            Op::OskVjpKernel(u, s) => {
                if self.rg(u) {
                    let c = self.outer_scale_kernel(g, s)?;
                    out.push((u, c));
                }
                if self.rg(s) {
                    let c = self.osk_vjp_s(u, g)?;
                    out.push((s, c));
                }
            }
            Op::OskVjpS(u, kern) => {
                if self.rg(u) {
                    let c = self.outer_scale_kernel(kern, g)?;
                    out.push((u, c));
                }
                if self.rg(kern) {
                    let c = self.osk_vjp_kernel(u, g)?;
                    out.push((kern, c));
                }
            }
            Op::SumKkci(a) => {
                let s = self.shape(a).to_vec();
                let c = self.bcast_kkci(g, [s[1], s[2], s[3]])?;
                out.push((a, c));
            }
            Op::BcastKkci(v) => {
                let c = self.sum_kkci(g)?;
                out.push((v, c));
            }
            Op::ScaleKernelPerOut(x, r) => {
                if self.rg(x) {
                    let c = self.scale_kernel_per_out(g, r)?;
                    out.push((x, c));
                }
                if self.rg(r) {
                    let p = self.mul(g, x)?;
                    let c = self.sum_kkci(p)?;
                    out.push((r, c));
                }
            }
            Op::SwapKernelAxes34(a) => {
                let c = self.swap_kernel_axes34(g)?;
                out.push((a, c));
            }
        }
        Ok(out)
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape(), data).expect("same-shape zip")
}

fn sigmoid_stable<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

fn softplus_stable<T: Scalar>(x: T) -> T {
    x.max(T::ZERO) + (-x.abs()).exp().ln_1p()
}

/// Space-to-depth on a plain tensor (no tape).
pub fn fold_tensor<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    expect_rank("fold", x.shape(), 4)?;
    let s = x.shape().to_vec();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::invalid(
            "fold",
            format!("spatial extent {}x{} not divisible by k={}", h, w, k),
        ));
    }
    let (ho, wo, co) = (h / k, w / k, c * k * k);
    let mut out = Tensor::zeros(&[n, ho, wo, co]);
    let src = x.data();
    let dst = out.data_mut();
    for ni in 0..n {
        for y in 0..ho {
            for xx in 0..wo {
                let obase = ((ni * ho + y) * wo + xx) * co;
                for dy in 0..k {
                    for dx in 0..k {
                        let sidx = ((ni * h + y * k + dy) * w + xx * k + dx) * c;
                        let didx = obase + (dy * k + dx) * c;
                        dst[didx..didx + c].copy_from_slice(&src[sidx..sidx + c]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Depth-to-space on a plain tensor, the exact inverse of [`fold_tensor`].
pub fn unfold_tensor<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    expect_rank("unfold", x.shape(), 4)?;
    let s = x.shape().to_vec();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    if k == 0 || c % (k * k) != 0 {
        return Err(Error::invalid(
            "unfold",
            format!("channels {} not divisible by k^2={}", c, k * k),
        ));
    }
    let (ho, wo, co) = (h * k, w * k, c / (k * k));
    let mut out = Tensor::zeros(&[n, ho, wo, co]);
    let src = x.data();
    let dst = out.data_mut();
    for ni in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let sbase = ((ni * h + y) * w + xx) * c;
                for dy in 0..k {
                    for dx in 0..k {
                        let sidx = sbase + (dy * k + dx) * co;
                        let didx = ((ni * ho + y * k + dy) * wo + xx * k + dx) * co;
                        dst[didx..didx + co].copy_from_slice(&src[sidx..sidx + co]);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fold_packs_patch_offsets_channel_major() {
        // 2x2 spatial, 1 channel: folded channels follow (dy, dx) order.
        let x = Tensor::from_vec(&[1, 2, 2, 1], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let f = fold_tensor(&x, 2).unwrap();
        assert_eq!(f.shape(), &[1, 1, 1, 4]);
        assert_eq!(f.data(), &[1.0, 2.0, 3.0, 4.0]);

        let x2 = Tensor::from_vec(&[1, 2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let f2 = fold_tensor(&x2, 2).unwrap();
        assert_eq!(f2.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn unfold_inverts_fold_exactly() {
        let x = Tensor::from_fn(&[2, 6, 6, 5], |i| i as f64 * 0.37 - 11.0);
        let f = fold_tensor(&x, 3).unwrap();
        assert_eq!(f.shape(), &[2, 2, 2, 45]);
        let u = unfold_tensor(&f, 3).unwrap();
        assert_eq!(u.shape(), x.shape());
        assert_eq!(u.data(), x.data());
    }

    #[test]
    fn fold_rejects_indivisible_extent() {
        let x: Tensor<f64> = Tensor::zeros(&[1, 5, 5, 2]);
        assert!(fold_tensor(&x, 2).is_err());
        let y: Tensor<f64> = Tensor::zeros(&[1, 2, 2, 3]);
        assert!(unfold_tensor(&y, 2).is_err());
    }

    #[test]
    fn upsample_repeats_and_pool_sums() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1, 2, 1], vec![3.0, 5.0]).unwrap(), false);
        let u = tape.nn_upsample(x, 2).unwrap();
        assert_eq!(tape.value(u).data(), &[3.0, 3.0, 5.0, 5.0, 3.0, 3.0, 5.0, 5.0]);
        let p = tape.sum_pool(u, 2).unwrap();
        assert_eq!(tape.value(p).data(), &[12.0, 20.0]);
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
        let b = tape.leaf(Tensor::from_vec(&[2, 1], vec![9.0, 8.0]).unwrap(), false);
        let c = tape.concat_last(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let back = tape.slice_last(c, 2, 3).unwrap();
        assert_eq!(tape.value(back).data(), &[9.0, 8.0]);
    }

    #[test]
    fn swap_kernel_axes_is_an_involution() {
        let mut tape: Tape<f64> = Tape::new();
        let k = tape.leaf(Tensor::from_fn(&[2, 3, 3, 4, 5], |i| i as f64), false);
        let s = tape.swap_kernel_axes34(k).unwrap();
        assert_eq!(tape.shape(s), &[2, 3, 3, 5, 4]);
        let s2 = tape.swap_kernel_axes34(s).unwrap();
        assert_eq!(tape.value(s2).data(), tape.value(k).data());
    }

    #[test]
    fn group_mean_broadcast_averages_within_groups() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec(&[4, 1, 1, 1], vec![1.0, 3.0, 10.0, 30.0]).unwrap(),
            false,
        );
        let m = tape.group_mean_bcast(x, 2).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0, 2.0, 20.0, 20.0]);
    }

    #[test]
    fn mac_counter_accumulates_and_resets() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 4, 4, 2]), false);
        let k = tape.leaf(Tensor::zeros(&[3, 3, 2, 5]), false);
        tape.conv2d(x, k, 1, 1).unwrap();
        assert_eq!(tape.mac_count(), 4 * 4 * 9 * 2 * 5);
        let a = tape.leaf(Tensor::zeros(&[7, 2]), false);
        let w = tape.leaf(Tensor::zeros(&[2, 3]), false);
        tape.matmul(a, w).unwrap();
        assert_eq!(tape.mac_count(), 4 * 4 * 9 * 2 * 5 + 7 * 2 * 3);
        tape.reset_mac_count();
        assert_eq!(tape.mac_count(), 0);
    }

    #[test]
    fn elementwise_ops_only_touch_matching_shapes() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[3, 2]), false);
        assert!(tape.add(a, b).is_err());
        assert!(tape.mul(a, b).is_err());
    }

    #[test]
    fn leaky_relu_applies_gain_slope_and_bias() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, -1.0]).unwrap(), false);
        let b = tape.leaf(Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap(), false);
        let y = tape.leaky_relu(x, Some(b), 0.25, 2.0).unwrap();
        // pre = [1.5, -1.5]; negative branch scaled by slope then gain.
        assert_eq!(tape.value(y).data(), &[3.0, -0.75]);
    }
}
