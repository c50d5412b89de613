use std::sync::atomic::{AtomicU64, Ordering};

use super::{Real, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Elementwise primitives accepted by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp<T> {
    Add,
    Sub,
    Mul,
    Relu,
    /// Multiply by a scalar constant.
    Scale(T),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output extent of a sliding window: `floor((input + 2·pad − kernel) / stride) + 1`.
pub fn window_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Relu(usize),
    Scale(usize, T),
    Sum(usize),
    Reshape(usize),
    Watch(usize),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
        batch: usize,
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeometry,
        // im2col buffers, kept only when the kernel needs a gradient
        cols: Vec<T>,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: usize,
        spatial: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
        classes: usize,
    },
    GatherSum {
        x: usize,
        index: Vec<usize>,
        classes: usize,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Wengert list recording primitive operations for reverse-mode differentiation.
///
/// Records are appended in execution order, so every record's parents precede
/// it and a single reverse sweep visits each record once. A tape is single-use:
/// after [`Tape::backward`] no further operations can be recorded.
pub struct Tape<T: Real = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    grad_enabled: bool,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn ensure_finite<T: Real>(data: &[T], op: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

fn grad_slot<T: Real>(grads: &mut [Option<Vec<T>>], index: usize, len: usize) -> &mut [T] {
    grads[index].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            consumed: false,
        }
    }

    /// A tape on which leaves never require gradients. Only [`Tape::watch`]
    /// points collect gradients, which is what saliency extraction needs.
    pub fn without_param_grads() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::State("variable was recorded on a different tape".into()));
        }
        if v.index >= self.nodes.len() {
            return Err(Error::State(format!("variable {} was never recorded", v.index)));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn recording(&self) -> Result<()> {
        if self.consumed {
            Err(Error::State("tape already ran backward; record a new forward pass".into()))
        } else {
            Ok(())
        }
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.index(v)?].value)
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.nodes[self.index(v)?].requires_grad)
    }

    /// Register an input. It participates in differentiation when the tensor
    /// is flagged `requires_grad` and the tape has parameter gradients enabled.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Result<Var> {
        self.recording()?;
        let rg = tensor.requires_grad() && self.grad_enabled;
        let value = Tensor::from_parts(tensor.shape().to_vec(), tensor.data().to_vec());
        Ok(self.push(value, Op::Leaf, rg))
    }

    /// Identity that always collects a gradient, even on tapes without
    /// parameter gradients. Gradient still flows through to `x`.
    pub fn watch(&mut self, x: Var) -> Result<Var> {
        self.recording()?;
        let xi = self.index(x)?;
        let value = self.nodes[xi].value.clone();
        Ok(self.push(value, Op::Watch(xi), true))
    }

    pub fn elementwise(&mut self, op: ElementwiseOp<T>, a: Var, b: Option<Var>) -> Result<Var> {
        match (op, b) {
            (ElementwiseOp::Add, Some(b)) => self.add(a, b),
            (ElementwiseOp::Sub, Some(b)) => self.sub(a, b),
            (ElementwiseOp::Mul, Some(b)) => self.mul(a, b),
            (ElementwiseOp::Relu, None) => self.relu(a),
            (ElementwiseOp::Scale(s), None) => self.scale(a, s),
            (op, b) => Err(Error::contract(format!(
                "{op:?} called with {} operand(s)",
                if b.is_some() { 2 } else { 1 }
            ))),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: impl FnOnce(usize, usize) -> Op<T>,
    ) -> Result<Var> {
        self.recording()?;
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch {
                op: name,
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let data: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        ensure_finite(&data, name)?;
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.nodes[ai].requires_grad || self.nodes[bi].requires_grad;
        Ok(self.push(value, op(ai, bi), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, name: &str, a: Var, f: impl Fn(T) -> T, op: impl FnOnce(usize) -> Op<T>) -> Result<Var> {
        self.recording()?;
        let ai = self.index(a)?;
        let av = &self.nodes[ai].value;
        let data: Vec<T> = av.data().iter().map(|&x| f(x)).collect();
        ensure_finite(&data, name)?;
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.nodes[ai].requires_grad;
        Ok(self.push(value, op(ai), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        self.unary("scale", a, |x| x * factor, |i| Op::Scale(i, factor))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.recording()?;
        let ai = self.index(a)?;
        let total: T = self.nodes[ai].value.data().iter().copied().sum();
        ensure_finite(&[total], "sum")?;
        let rg = self.nodes[ai].requires_grad;
        Ok(self.push(Tensor::scalar(total), Op::Sum(ai), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.recording()?;
        let ai = self.index(a)?;
        let value = self.nodes[ai].value.reshape(shape.to_vec())?;
        let rg = self.nodes[ai].requires_grad;
        Ok(self.push(value, Op::Reshape(ai), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.recording()?;
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), av.data(), (k as isize, 1), bv.data(), (n as isize, 1), T::zero(), &mut out, (n as isize, 1));
        ensure_finite(&out, "matmul")?;
        let rg = self.nodes[ai].requires_grad || self.nodes[bi].requires_grad;
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a: ai, b: bi, m, k, n }, rg))
    }

    /// Fully connected layer `x · wᵀ + b` with `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.recording()?;
        let (xi, wi, bi) = (self.index(x)?, self.index(w)?, self.index(b)?);
        let (xv, wv, bv) = (&self.nodes[xi].value, &self.nodes[wi].value, &self.nodes[bi].value);
        if xv.rank() != 2 || wv.rank() != 2 || xv.shape()[1] != wv.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: xv.shape().to_vec(),
                right: wv.shape().to_vec(),
            });
        }
        let (batch, inputs, outputs) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
        if bv.shape() != [outputs] {
            return Err(Error::ShapeMismatch {
                op: "linear bias",
                left: vec![outputs],
                right: bv.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(batch * outputs);
        for _ in 0..batch {
            out.extend_from_slice(bv.data());
        }
        T::gemm(
            batch,
            inputs,
            outputs,
            T::one(),
            xv.data(),
            (inputs as isize, 1),
            wv.data(),
            (1, inputs as isize),
            T::one(),
            &mut out,
            (outputs as isize, 1),
        );
        ensure_finite(&out, "linear")?;
        let rg = [xi, wi, bi].iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(
            Tensor::from_parts(vec![batch, outputs], out),
            Op::Linear {
                x: xi,
                w: wi,
                b: bi,
                batch,
                inputs,
                outputs,
            },
            rg,
        ))
    }

    /// 2-D cross-correlation plus bias. `x: [N, C, H, W]`, `w: [O, C, kH, kW]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        self.recording()?;
        let (xi, wi, bi) = (self.index(x)?, self.index(w)?, self.index(b)?);
        let (xv, wv, bv) = (&self.nodes[xi].value, &self.nodes[wi].value, &self.nodes[bi].value);
        if xv.rank() != 4 || wv.rank() != 4 {
            return Err(Error::contract(format!(
                "conv2d expects rank-4 input and kernel, got {:?} and {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        if xv.shape()[1] != wv.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d channels",
                left: xv.shape().to_vec(),
                right: wv.shape().to_vec(),
            });
        }
        if bv.shape() != [wv.shape()[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: vec![wv.shape()[0]],
                right: bv.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be at least 1"));
        }
        let (n, c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (o, kh, kw) = (wv.shape()[0], wv.shape()[2], wv.shape()[3]);
        let (out_h, out_w) = match (
            window_output_extent(h, kh, stride, padding),
            window_output_extent(wd, kw, stride, padding),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::contract(format!(
                    "conv2d kernel {kh}x{kw} does not fit input {h}x{wd} with padding {padding}"
                )))
            }
        };
        let geom = ConvGeometry {
            batch: n,
            in_channels: c,
            height: h,
            width: wd,
            out_channels: o,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h,
            out_w,
        };
        let keep_cols = self.nodes[wi].requires_grad;
        let (k, p) = (geom.patch_len(), geom.positions());
        let mut out = vec![T::zero(); n * o * p];
        let mut cols_all = if keep_cols { vec![T::zero(); n * k * p] } else { Vec::new() };
        let mut scratch = if keep_cols { Vec::new() } else { vec![T::zero(); k * p] };
        let img_len = c * h * wd;
        for img in 0..n {
            let cols: &mut [T] = if keep_cols {
                &mut cols_all[img * k * p..(img + 1) * k * p]
            } else {
                &mut scratch
            };
            im2col(&xv.data()[img * img_len..(img + 1) * img_len], &geom, cols);
            let dst = &mut out[img * o * p..(img + 1) * o * p];
            for (row, &bias) in dst.chunks_exact_mut(p).zip(bv.data()) {
                row.fill(bias);
            }
            T::gemm(o, k, p, T::one(), wv.data(), (k as isize, 1), cols, (p as isize, 1), T::one(), dst, (p as isize, 1));
        }
        ensure_finite(&out, "conv2d")?;
        let rg = [xi, wi, bi].iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(
            Tensor::from_parts(vec![n, o, out_h, out_w], out),
            Op::Conv2d {
                x: xi,
                w: wi,
                b: bi,
                geom,
                cols: cols_all,
            },
            rg,
        ))
    }

    /// Windowed maximum over `[N, C, H, W]`. Ties resolve to the first element in scan order.
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        self.recording()?;
        let xi = self.index(x)?;
        let xv = &self.nodes[xi].value;
        if xv.rank() != 4 {
            return Err(Error::contract(format!("maxpool2d expects rank 4, got {:?}", xv.shape())));
        }
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        if kernel == 0 || kernel > h || kernel > w {
            return Err(Error::contract(format!(
                "maxpool2d window {kernel} larger than input {h}x{w}"
            )));
        }
        let (oh, ow) = match (
            window_output_extent(h, kernel, stride, 0),
            window_output_extent(w, kernel, stride, 0),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::contract("maxpool2d stride must be at least 1")),
        };
        let data = xv.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..kernel {
                        let row = base + (oy * stride + dy) * w + ox * stride;
                        for idx in row..row + kernel {
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(Tensor::from_parts(vec![n, c, oh, ow], out), Op::MaxPool2d { x: xi, argmax }, rg))
    }

    /// Spatial mean per channel: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.recording()?;
        let xi = self.index(x)?;
        let xv = &self.nodes[xi].value;
        if xv.rank() != 4 {
            return Err(Error::contract(format!(
                "global_avg_pool expects rank 4, got {:?}",
                xv.shape()
            )));
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let spatial = xv.shape()[2] * xv.shape()[3];
        let inv = T::one() / T::of(spatial as f64);
        let out: Vec<T> = xv
            .data()
            .chunks_exact(spatial)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(Tensor::from_parts(vec![n, c], out), Op::GlobalAvgPool { x: xi, spatial }, rg))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`, stabilised by max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.recording()?;
        let li = self.index(logits)?;
        let lv = &self.nodes[li].value;
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            return Err(Error::contract(format!(
                "softmax_cross_entropy: logits {:?} with {} labels",
                lv.shape(),
                labels.len()
            )));
        }
        let classes = lv.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::contract(format!("label {bad} outside [0, {classes})")));
        }
        let mut probs = Vec::with_capacity(lv.numel());
        let mut loss = 0.0f64;
        for (row, &label) in lv.data().chunks_exact(classes).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let total: T = exps.iter().copied().sum();
            loss += (total.ln() - (row[label] - max)).as_f64();
            probs.extend(exps.iter().map(|&e| e / total));
        }
        let loss = T::of(loss / labels.len() as f64);
        ensure_finite(&[loss], "softmax_cross_entropy")?;
        let rg = self.nodes[li].requires_grad;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: li,
                labels: labels.to_vec(),
                probs,
                classes,
            },
            rg,
        ))
    }

    /// `Σ_i x[i, index[i]]` for `x: [N, K]`; seeds a one-hot upstream gradient per row.
    pub fn gather_sum(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        self.recording()?;
        let xi = self.index(x)?;
        let xv = &self.nodes[xi].value;
        if xv.rank() != 2 || xv.shape()[0] != index.len() {
            return Err(Error::contract(format!(
                "gather_sum: input {:?} with {} indices",
                xv.shape(),
                index.len()
            )));
        }
        let classes = xv.shape()[1];
        if let Some(&bad) = index.iter().find(|&&c| c >= classes) {
            return Err(Error::contract(format!("class {bad} outside [0, {classes})")));
        }
        let total: T = index
            .iter()
            .enumerate()
            .map(|(row, &c)| xv.data()[row * classes + c])
            .sum();
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(
            Tensor::scalar(total),
            Op::GatherSum {
                x: xi,
                index: index.to_vec(),
                classes,
            },
            rg,
        ))
    }

    /// Reverse sweep from a single-element output.
    ///
    /// Gradients accumulate additively across fan-out. Afterwards the tape is
    /// consumed: leaf and watch gradients stay readable, nothing new can be recorded.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        let out = self.index(output)?;
        if self.nodes[out].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[out].value.shape()
            )));
        }
        self.consumed = true;
        if !self.nodes[out].requires_grad {
            return Ok(());
        }
        self.grads[out] = Some(vec![T::one()]);
        for i in (0..=out).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g);
            if matches!(self.nodes[i].op, Op::Leaf | Op::Watch(_)) {
                self.grads[i] = Some(g);
            }
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let needs = |j: usize| nodes[j].requires_grad;
        let len = |j: usize| nodes[j].value.numel();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -T::one() } else { T::one() };
                if needs(*a) {
                    grad_slot(grads, *a, len(*a)).iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if needs(*b) {
                    grad_slot(grads, *b, len(*b)).iter_mut().zip(g).for_each(|(d, &v)| *d += sign * v);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                if needs(*a) {
                    let d = grad_slot(grads, *a, av.len());
                    for ((d, &gv), &y) in d.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                }
                if needs(*b) {
                    let d = grad_slot(grads, *b, bv.len());
                    for ((d, &gv), &x) in d.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                }
            }
            Op::Relu(a) => {
                let xv = nodes[*a].value.data();
                let d = grad_slot(grads, *a, xv.len());
                for ((d, &gv), &x) in d.iter_mut().zip(g).zip(xv) {
                    if x > T::zero() {
                        *d += gv;
                    }
                }
            }
            Op::Scale(a, s) => {
                let d = grad_slot(grads, *a, len(*a));
                d.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *s);
            }
            Op::Sum(a) => {
                grad_slot(grads, *a, len(*a)).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Reshape(a) | Op::Watch(a) => {
                if needs(*a) {
                    grad_slot(grads, *a, len(*a)).iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if needs(*a) {
                    // dA = G · Bᵀ
                    let bv = nodes[*b].value.data();
                    let d = grad_slot(grads, *a, m * k);
                    T::gemm(m, n, k, T::one(), g, (n as isize, 1), bv, (1, n as isize), T::one(), d, (k as isize, 1));
                }
                if needs(*b) {
                    // dB = Aᵀ · G
                    let av = nodes[*a].value.data();
                    let d = grad_slot(grads, *b, k * n);
                    T::gemm(k, m, n, T::one(), av, (1, k as isize), g, (n as isize, 1), T::one(), d, (n as isize, 1));
                }
            }
            Op::Linear {
                x,
                w,
                b,
                batch,
                inputs,
                outputs,
            } => {
                let (nb, ni, no) = (*batch, *inputs, *outputs);
                if needs(*x) {
                    let wv = nodes[*w].value.data();
                    let d = grad_slot(grads, *x, nb * ni);
                    T::gemm(nb, no, ni, T::one(), g, (no as isize, 1), wv, (ni as isize, 1), T::one(), d, (ni as isize, 1));
                }
                if needs(*w) {
                    let xv = nodes[*x].value.data();
                    let d = grad_slot(grads, *w, no * ni);
                    T::gemm(no, nb, ni, T::one(), g, (1, no as isize), xv, (ni as isize, 1), T::one(), d, (ni as isize, 1));
                }
                if needs(*b) {
                    let d = grad_slot(grads, *b, no);
                    for row in g.chunks_exact(no) {
                        d.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (k, p, o) = (geom.patch_len(), geom.positions(), geom.out_channels);
                let img_len = geom.in_channels * geom.height * geom.width;
                if needs(*w) {
                    let d = grad_slot(grads, *w, o * k);
                    for img in 0..geom.batch {
                        let gi = &g[img * o * p..(img + 1) * o * p];
                        let ci = &cols[img * k * p..(img + 1) * k * p];
                        T::gemm(o, p, k, T::one(), gi, (p as isize, 1), ci, (1, p as isize), T::one(), d, (k as isize, 1));
                    }
                }
                if needs(*b) {
                    let d = grad_slot(grads, *b, o);
                    for img in 0..geom.batch {
                        for (ch, row) in g[img * o * p..(img + 1) * o * p].chunks_exact(p).enumerate() {
                            d[ch] += row.iter().copied().sum::<T>();
                        }
                    }
                }
                if needs(*x) {
                    let wv = nodes[*w].value.data();
                    let mut dcols = vec![T::zero(); k * p];
                    let d = grad_slot(grads, *x, geom.batch * img_len);
                    for img in 0..geom.batch {
                        let gi = &g[img * o * p..(img + 1) * o * p];
                        T::gemm(k, o, p, T::one(), wv, (1, k as isize), gi, (p as isize, 1), T::zero(), &mut dcols, (p as isize, 1));
                        col2im(&dcols, geom, &mut d[img * img_len..(img + 1) * img_len]);
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let d = grad_slot(grads, *x, len(*x));
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src] += gv;
                }
            }
            Op::GlobalAvgPool { x, spatial } => {
                let inv = T::one() / T::of(*spatial as f64);
                let d = grad_slot(grads, *x, len(*x));
                for (plane, &gv) in d.chunks_exact_mut(*spatial).zip(g) {
                    let share = gv * inv;
                    plane.iter_mut().for_each(|v| *v += share);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
                classes,
            } => {
                let scale = g[0] / T::of(labels.len() as f64);
                let d = grad_slot(grads, *logits, probs.len());
                for (row, (prow, &label)) in d.chunks_exact_mut(*classes).zip(probs.chunks_exact(*classes).zip(labels)) {
                    for (c, (dv, &pv)) in row.iter_mut().zip(prow).enumerate() {
                        let onehot = if c == label { T::one() } else { T::zero() };
                        *dv += (pv - onehot) * scale;
                    }
                }
            }
            Op::GatherSum { x, index, classes } => {
                let d = grad_slot(grads, *x, len(*x));
                for (row, &c) in index.iter().enumerate() {
                    d[row * classes + c] += g[0];
                }
            }
        }
    }

    pub fn grad(&self, v: Var) -> Result<Option<&[T]>> {
        Ok(self.grads[self.index(v)?].as_deref())
    }

    /// Gradient of `v` as a tensor shaped like its value.
    pub fn grad_tensor(&self, v: Var) -> Result<Option<Tensor<T>>> {
        let i = self.index(v)?;
        Ok(self.grads[i]
            .as_ref()
            .map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g.clone())))
    }

    /// Add the gradient recorded for leaf `v` into `target`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor<T>) -> Result<()> {
        let i = self.index(v)?;
        if target.shape() != self.nodes[i].value.shape() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_into",
                left: self.nodes[i].value.shape().to_vec(),
                right: target.shape().to_vec(),
            });
        }
        if let Some(g) = &self.grads[i] {
            target.accumulate_grad(g);
        }
        Ok(())
    }
}

fn im2col<T: Real>(img: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let p = g.positions();
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, img: &mut [T]) {
    let p = g.positions();
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}
