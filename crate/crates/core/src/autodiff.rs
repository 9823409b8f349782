//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every primitive executed through a [`Tape`] appends a node holding its
//! output value and enough context to replay the adjoint. [`Tape::backward`]
//! walks the nodes in exact reverse order and returns the gradient of a
//! scalar with respect to every registered parameter, as a [`ParamSet`].
//!
//! A tape supports exactly one backward pass. Recording more operations or
//! calling `backward` again afterwards is an error.
//!
//! ```
//! use fisher_interp::autodiff::Tape;
//! use fisher_interp::params::ParamSet;
//! use fisher_interp::tensor::Tensor;
//!
//! let mut params = ParamSet::new();
//! params.push("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
//! let mut tape = Tape::<f64>::new();
//! let w = tape.params(&params)[0];
//! let x = tape.input(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let wx = tape.mul(w, x).unwrap();
//! let loss = tape.sum(wx).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.tensor(0).data(), &[1.0, 2.0, 3.0]);
//! ```

use crate::conv::{
    conv2d_backward, conv2d_forward, conv2d_geometry, conv_transpose2d_backward,
    conv_transpose2d_forward, conv_transpose2d_geometry, Conv2dGeom, ConvTGeom,
    ConvTransposeParams,
};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{check_same_shape, gemm, MatRef, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Normalization statistics mode for [`Tape::batch_norm`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormMode<'a, T> {
    /// Normalize with the batch's own per-channel statistics.
    Batch { eps: T },
    /// Normalize with frozen per-channel mean and variance.
    Frozen { mean: &'a [T], var: &'a [T], eps: T },
}

enum Op<T> {
    Input,
    Param(usize),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: Conv2dGeom,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvTGeom,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LogSoftmax {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    PickSum {
        logp: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
        classes: Vec<usize>,
    },
    BernoulliLogProb {
        logits: Var,
        target: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-channel batch statistics observed by a [`NormMode::Batch`] normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    param_names: Vec<(String, Vec<usize>)>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Splits a shape around `axis` into `(outer, axis_len, inner)`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_names: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn ensure_open(&self) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape(
                "tape already consumed by backward; record a new forward pass".into(),
            ));
        }
        Ok(())
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: op_name,
                context: None,
            });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant (data) tensor. No gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers every tensor of `params`; gradients are reported in the same order.
    pub fn params(&mut self, params: &ParamSet<T>) -> Vec<Var> {
        params
            .iter()
            .map(|(name, t)| {
                let slot = self.param_names.len();
                self.param_names.push((name.to_string(), t.shape().to_vec()));
                self.nodes.push(Node {
                    value: t.clone(),
                    op: Op::Param(slot),
                    needs_grad: true,
                });
                Var(self.nodes.len() - 1)
            })
            .collect()
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        self.conv2d_impl(input, weight, bias, padding, None)
    }

    /// `conv2d` with weight taps outside `tap_mask` (flattened `kh * kw`) treated as zero.
    /// Equivalent to convolving with `weight ⊙ mask`; masked taps receive zero gradient.
    pub fn conv2d_masked(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: usize,
        tap_mask: &[bool],
    ) -> Result<Var> {
        self.conv2d_impl(input, weight, bias, padding, Some(tap_mask))
    }

    fn conv2d_impl(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: usize,
        tap_mask: Option<&[bool]>,
    ) -> Result<Var> {
        self.ensure_open()?;
        let (x, w) = (self.value(input), self.value(weight));
        let b = bias.map(|b| self.value(b));
        let geom = conv2d_geometry(x, w, b, padding, tap_mask)?;
        let out = conv2d_forward(&geom, x, w, b);
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            needs,
        )
    }

    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        params: ConvTransposeParams,
    ) -> Result<Var> {
        self.ensure_open()?;
        let (x, w) = (self.value(input), self.value(weight));
        let b = bias.map(|b| self.value(b));
        let geom = conv_transpose2d_geometry(x, w, b, params)?;
        let out = conv_transpose2d_forward(&geom, x, w, b);
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        self.push(
            "conv_transpose2d",
            out,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            },
            needs,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.ensure_open()?;
        let out = self.value(x).map(|v| v.max(T::zero()));
        let needs = self.needs(x);
        self.push("relu", out, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.ensure_open()?;
        let out = self.value(x).map(sigmoid);
        let needs = self.needs(x);
        self.push("sigmoid", out, Op::Sigmoid(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ensure_open()?;
        check_same_shape("add", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push("add", out, Op::Add(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ensure_open()?;
        check_same_shape("mul", self.value(a), self.value(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push("mul", out, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        self.ensure_open()?;
        let out = self.value(x).map(|v| v * factor);
        let needs = self.needs(x);
        self.push("scale", out, Op::Scale(x, factor), needs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.ensure_open()?;
        let out = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push("sum", out, Op::Sum(x), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.ensure_open()?;
        let out = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        self.push("reshape", out, Op::Reshape(x), needs)
    }

    /// `x · wᵀ + b` for `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.ensure_open()?;
        let [n, din] = self.value(x).dims2("linear")?;
        let [dout, win] = self.value(w).dims2("linear")?;
        if win != din {
            return Err(Error::shape("linear", "input features (weight dim 1)", win, din));
        }
        let mut out = vec![T::zero(); n * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [dout] {
                return Err(Error::shape("linear", "bias length", dout, format!("{:?}", bv.shape())));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(
            T::one(),
            MatRef::new(self.value(x).data(), n, din),
            MatRef::new(self.value(w).data(), dout, din).t(),
            T::one(),
            &mut out,
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push("linear", Tensor::new(vec![n, dout], out)?, Op::Linear { x, w, b }, needs)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.ensure_open()?;
        let xv = self.value(x);
        if axis >= xv.shape().len() {
            return Err(Error::invalid("log_softmax", format!("axis {axis} out of range")));
        }
        let (outer, axis_len, inner) = axis_split(xv.shape(), axis);
        let mut out = xv.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * axis_len + k) * inner + i;
                let m = (0..axis_len).map(|k| d[idx(k)]).fold(T::neg_infinity(), T::max);
                let lse = m + (0..axis_len).map(|k| (d[idx(k)] - m).exp()).sum::<T>().ln();
                for k in 0..axis_len {
                    d[idx(k)] -= lse;
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            "log_softmax",
            out,
            Op::LogSoftmax {
                x,
                outer,
                axis_len,
                inner,
            },
            needs,
        )
    }

    /// Sums `logp` entries selected by one class index per (outer, inner) position along `axis`.
    pub fn pick_sum(&mut self, logp: Var, axis: usize, classes: &[usize]) -> Result<Var> {
        self.ensure_open()?;
        let lv = self.value(logp);
        if axis >= lv.shape().len() {
            return Err(Error::invalid("pick_sum", format!("axis {axis} out of range")));
        }
        let (outer, axis_len, inner) = axis_split(lv.shape(), axis);
        if classes.len() != outer * inner {
            return Err(Error::shape("pick_sum", "class index count", outer * inner, classes.len()));
        }
        if let Some(bad) = classes.iter().find(|&&c| c >= axis_len) {
            return Err(Error::invalid("pick_sum", format!("class {bad} >= {axis_len}")));
        }
        let mut total = T::zero();
        for o in 0..outer {
            for i in 0..inner {
                total += lv.data()[(o * axis_len + classes[o * inner + i]) * inner + i];
            }
        }
        let needs = self.needs(logp);
        self.push(
            "pick_sum",
            Tensor::scalar(total),
            Op::PickSum {
                logp,
                outer,
                axis_len,
                inner,
                classes: classes.to_vec(),
            },
            needs,
        )
    }

    /// `Σ t·log σ(l) + (1 − t)·log(1 − σ(l))` with `log σ(l) = −softplus(−l)`.
    pub fn bernoulli_logprob(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        self.ensure_open()?;
        let lv = self.value(logits);
        check_same_shape("bernoulli_logprob", lv, target)?;
        if let Some(bad) = target.data().iter().find(|&&t| t != T::zero() && t != T::one()) {
            return Err(Error::invalid(
                "bernoulli_logprob",
                format!("target value {bad:?} is not 0 or 1"),
            ));
        }
        let total: T = lv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&l, &t)| if t == T::one() { -softplus(-l) } else { -softplus(l) })
            .sum();
        let needs = self.needs(logits);
        self.push(
            "bernoulli_logprob",
            Tensor::scalar(total),
            Op::BernoulliLogProb {
                logits,
                target: target.data().to_vec(),
            },
            needs,
        )
    }

    /// Per-channel normalization of `[N, C, ...]` followed by `gamma * x̂ + beta`.
    ///
    /// Returns the output and, in batch mode, the observed statistics (biased variance).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        self.ensure_open()?;
        let xv = self.value(x);
        if xv.shape().len() < 2 {
            return Err(Error::shape("batch_norm", "rank", ">= 2", xv.shape().len()));
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let inner: usize = xv.shape()[2..].iter().product();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape("batch_norm", name, c, format!("{:?}", self.value(v).shape())));
            }
        }
        let count = T::from_usize(n * inner).unwrap();
        let (mean, var, eps, batch_stats) = match mode {
            NormMode::Batch { eps } => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for s_i in 0..n {
                        s += xv.data()[(s_i * c + ch) * inner..(s_i * c + ch + 1) * inner].iter().copied().sum::<T>();
                    }
                    mean[ch] = s / count;
                    let mut q = T::zero();
                    for s_i in 0..n {
                        for &v in &xv.data()[(s_i * c + ch) * inner..(s_i * c + ch + 1) * inner] {
                            q += (v - mean[ch]) * (v - mean[ch]);
                        }
                    }
                    var[ch] = q / count;
                }
                (mean, var, eps, true)
            }
            NormMode::Frozen { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "frozen statistics length", c, mean.len()));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for s_i in 0..n {
            for ch in 0..c {
                let range = (s_i * c + ch) * inner..(s_i * c + ch + 1) * inner;
                for k in range {
                    xhat[k] = (xv.data()[k] - mean[ch]) * inv_std[ch];
                    out[k] = g[ch] * xhat[k] + b[ch];
                }
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let stats = batch_stats.then_some(BatchStats { mean, var });
        let v = self.push(
            "batch_norm",
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            needs,
        )?;
        Ok((v, stats))
    }

    /// Gradient of the scalar `loss` with respect to every registered parameter.
    pub fn backward(&mut self, loss: Var) -> Result<ParamSet<T>> {
        self.ensure_open()?;
        if !self.value(loss).is_scalar() {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Param(_) = self.nodes[idx].op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, g, &mut grads)?;
        }

        let mut out = ParamSet::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(slot) = node.op {
                let (name, shape) = &self.param_names[slot];
                let g = grads[idx].take().unwrap_or_else(|| Tensor::zeros(shape));
                if !g.all_finite() {
                    return Err(Error::NonFinite {
                        op: "backward",
                        context: Some(format!("gradient of {name}")),
                    });
                }
                out.push(name.clone(), g)?;
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let cg = conv2d_backward(
                    geom,
                    self.value(*input),
                    self.value(*weight),
                    bias.is_some(),
                    &g,
                    self.needs(*input),
                );
                if let Some(dx) = cg.input {
                    self.accumulate(grads, *input, dx);
                }
                self.accumulate(grads, *weight, cg.weight);
                if let (Some(b), Some(db)) = (bias, cg.bias) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let cg = conv_transpose2d_backward(
                    geom,
                    self.value(*input),
                    self.value(*weight),
                    bias.is_some(),
                    &g,
                    self.needs(*input),
                );
                if let Some(dx) = cg.input {
                    self.accumulate(grads, *input, dx);
                }
                self.accumulate(grads, *weight, cg.weight);
                if let (Some(b), Some(db)) = (bias, cg.bias) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::Sigmoid(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &s)| gv * s * (T::one() - s))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.needs(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Scale(x, f) => {
                let f = *f;
                self.accumulate(grads, *x, g.map(|v| v * f));
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.reshape(&shape)?);
            }
            Op::Linear { x, w, b } => {
                let [n, din] = self.value(*x).dims2("linear")?;
                let dout = self.value(*w).shape()[0];
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * din];
                    gemm(
                        T::one(),
                        MatRef::new(g.data(), n, dout),
                        MatRef::new(self.value(*w).data(), dout, din),
                        T::zero(),
                        &mut dx,
                    );
                    self.accumulate(grads, *x, Tensor::new(vec![n, din], dx)?);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); dout * din];
                    gemm(
                        T::one(),
                        MatRef::new(g.data(), n, dout).t(),
                        MatRef::new(self.value(*x).data(), n, din),
                        T::zero(),
                        &mut dw,
                    );
                    self.accumulate(grads, *w, Tensor::new(vec![dout, din], dw)?);
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); dout];
                    for row in g.data().chunks(dout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![dout], db)?);
                }
            }
            Op::LogSoftmax {
                x,
                outer,
                axis_len,
                inner,
            } => {
                let y = node.value.data();
                let mut dx = g.clone();
                let d = dx.data_mut();
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |k: usize| (o * axis_len + k) * inner + i;
                        let gsum: T = (0..*axis_len).map(|k| g.data()[idx(k)]).sum();
                        for k in 0..*axis_len {
                            d[idx(k)] = g.data()[idx(k)] - y[idx(k)].exp() * gsum;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::PickSum {
                logp,
                outer,
                axis_len,
                inner,
                classes,
            } => {
                let gv = g.data()[0];
                let mut d = Tensor::zeros(self.value(*logp).shape());
                for o in 0..*outer {
                    for i in 0..*inner {
                        d.data_mut()[(o * axis_len + classes[o * inner + i]) * inner + i] = gv;
                    }
                }
                self.accumulate(grads, *logp, d);
            }
            Op::BernoulliLogProb { logits, target } => {
                let gv = g.data()[0];
                let lv = self.value(*logits);
                let d = lv
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&l, &t)| gv * (t - sigmoid(l)))
                    .collect();
                self.accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), d)?);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = self.value(*x).shape();
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        for k in (s * c + ch) * inner..(s * c + ch + 1) * inner {
                            dgamma[ch] += g.data()[k] * xhat[k];
                            dbeta[ch] += g.data()[k];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    let m = T::from_usize(n * inner).unwrap();
                    for ch in 0..c {
                        for s in 0..n {
                            for k in (s * c + ch) * inner..(s * c + ch + 1) * inner {
                                let dxhat = g.data()[k] * gam[ch];
                                dx[k] = if *batch_stats {
                                    // (m·dx̂ − Σdx̂ − x̂·Σ(dx̂·x̂)) · inv_std / m
                                    inv_std[ch] / m
                                        * (m * dxhat - dbeta[ch] * gam[ch] - xhat[k] * dgamma[ch] * gam[ch])
                                } else {
                                    dxhat * inv_std[ch]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(shape.to_vec(), dx)?);
                }
                self.accumulate(grads, *gamma, Tensor::new(vec![c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::new(vec![c], dbeta)?);
            }
        }
        Ok(())
    }
}

/// Central finite-difference gradient of `f` over every parameter entry.
///
/// Test and diagnostic helper; `f` must be a pure function of the parameters.
pub fn finite_difference<T: Real>(
    params: &ParamSet<T>,
    h: T,
    mut f: impl FnMut(&ParamSet<T>) -> Result<T>,
) -> Result<ParamSet<T>> {
    let flat = params.flatten();
    let mut grad = vec![T::zero(); flat.len()];
    let mut work = flat.clone();
    for i in 0..flat.len() {
        work[i] = flat[i] + h;
        let up = f(&params.unflatten(&work)?)?;
        work[i] = flat[i] - h;
        let down = f(&params.unflatten(&work)?)?;
        work[i] = flat[i];
        grad[i] = (up - down) / (h + h);
    }
    params.unflatten(&grad)
}

/// Largest `|analytic − numeric| / max(1, |analytic|)` over all entries.
pub fn max_relative_error<T: Real>(analytic: &ParamSet<T>, numeric: &ParamSet<T>) -> T {
    analytic
        .flatten()
        .iter()
        .zip(numeric.flatten())
        .map(|(&a, n)| (a - n).abs() / a.abs().max(T::one()))
        .fold(T::zero(), T::max)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
        let z = tape.input(Tensor::scalar(0.0));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
    }

    #[test]
    fn log_softmax_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::<f64>::new();
        let x = tape.input(rand_tensor(&[3, 7, 2], &mut rng).map(|v| v * 20.0));
        let y = tape.log_softmax(x, 1).unwrap();
        let v = tape.value(y);
        for o in 0..3 {
            for i in 0..2 {
                let s: f64 = (0..7).map(|k| v.data()[(o * 7 + k) * 2 + i].exp()).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn bernoulli_logprob_values() {
        let lp = |l: f64, t: f64| {
            let mut tape = Tape::<f64>::new();
            let x = tape.input(Tensor::scalar(l));
            let v = tape.bernoulli_logprob(x, &Tensor::scalar(t)).unwrap();
            tape.value(v).data()[0]
        };
        assert!((lp(0.0, 1.0) - 0.5f64.ln()).abs() < 1e-12);
        assert!(lp(50.0, 1.0).abs() < 1e-9);
        assert!(lp(1e4, 1.0).is_finite() && lp(-1e4, 1.0).is_finite());
        assert!((lp(-1e4, 1.0) + 1e4).abs() < 1e-6);
        // naive oracle at moderate logits
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let l: f64 = rng.random_range(-8.0..8.0);
            let t = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            let s = 1.0 / (1.0 + (-l).exp());
            let naive = t * s.ln() + (1.0 - t) * (1.0 - s).ln();
            assert!((lp(l, t) - naive).abs() < 1e-9);
        }
    }

    #[test]
    fn bernoulli_rejects_non_binary_target() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::scalar(0.0));
        assert!(tape.bernoulli_logprob(x, &Tensor::scalar(0.5)).is_err());
    }

    #[test]
    fn linear_grad_equals_input() {
        let mut ps = ParamSet::new();
        ps.push("w", Tensor::new(vec![1, 3], vec![0.3, -0.2, 0.9]).unwrap()).unwrap();
        let mut tape = Tape::<f64>::new();
        let w = tape.params(&ps)[0];
        let x = tape.input(Tensor::new(vec![1, 3], vec![1.5, -2.0, 4.0]).unwrap());
        let y = tape.linear(x, w, None).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.tensor(0).data(), &[1.5, -2.0, 4.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut ps = ParamSet::new();
        ps.push("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let mut tape = Tape::<f64>::new();
        let _w = tape.params(&ps);
        let c = tape.input(Tensor::scalar(3.0));
        let l = tape.scale(c, 2.0).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.tensor(0).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_twice_and_non_scalar_rejected() {
        let mut ps = ParamSet::new();
        ps.push("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let mut tape = Tape::<f64>::new();
        let w = tape.params(&ps)[0];
        assert!(tape.backward(w).is_err(), "non-scalar");
        let l = tape.sum(w).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.backward(l).is_err());
        assert!(tape.relu(w).is_err(), "recording after backward");
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::scalar(f64::MAX));
        let err = tape.scale(x, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "scale", .. }));
    }

    /// A small graph touching every primitive, checked against central differences.
    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut ps = ParamSet::new();
        ps.push("conv.w", rand_tensor(&[3, 2, 3, 3], &mut rng)).unwrap();
        ps.push("conv.b", rand_tensor(&[3], &mut rng)).unwrap();
        ps.push("bn.g", rand_tensor(&[3], &mut rng)).unwrap();
        ps.push("bn.b", rand_tensor(&[3], &mut rng)).unwrap();
        ps.push("ct.w", rand_tensor(&[3, 2, 3, 3], &mut rng)).unwrap();
        ps.push("ct.b", rand_tensor(&[2], &mut rng)).unwrap();
        ps.push("lin.w", rand_tensor(&[4, 2 * 9 * 9], &mut rng).map(|v| v * 0.1)).unwrap();
        ps.push("lin.b", rand_tensor(&[4], &mut rng)).unwrap();
        let x = rand_tensor(&[2, 2, 5, 5], &mut rng);
        let gate = rand_tensor(&[2, 4], &mut rng);
        let classes = [1usize, 3];
        let target = Tensor::from_fn(&[2, 4], |i| (i % 2) as f64);
        let mask: Vec<bool> = (0..9).map(|i| i != 5 && i != 7).collect();

        let forward = |params: &ParamSet<f64>, tape: &mut Tape<f64>| -> Result<Var> {
            let p = tape.params(params);
            let xv = tape.input(x.clone());
            let h = tape.conv2d_masked(xv, p[0], Some(p[1]), 1, &mask)?;
            let (h, _) = tape.batch_norm(h, p[2], p[3], NormMode::Batch { eps: 1e-5 })?;
            let h = tape.relu(h)?;
            let h = tape.conv_transpose2d(
                h,
                p[4],
                Some(p[5]),
                ConvTransposeParams { stride: 2, padding: 1, output_padding: 0 },
            )?;
            let h = tape.sigmoid(h)?;
            let h = tape.reshape(h, &[2, 2 * 9 * 9])?;
            let z = tape.linear(h, p[6], Some(p[7]))?;
            let gv = tape.input(gate.clone());
            let zg = tape.mul(z, gv)?;
            let zz = tape.add(zg, z)?;
            let lsm = tape.log_softmax(zz, 1)?;
            let picked = tape.pick_sum(lsm, 1, &classes)?;
            let bern = tape.bernoulli_logprob(z, &target)?;
            let both = tape.add(picked, bern)?;
            tape.scale(both, 0.7)
        };

        let mut tape = Tape::new();
        let loss = forward(&ps, &mut tape).unwrap();
        let analytic = tape.backward(loss).unwrap();
        let numeric = finite_difference(&ps, 1e-5, |p| {
            let mut t = Tape::new();
            let l = forward(p, &mut t)?;
            Ok(t.value(l).data()[0])
        })
        .unwrap();
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-6, "max relative error {err}");
        // masked taps get exactly zero gradient
        let gw = analytic.get("conv.w").unwrap();
        for (i, &v) in gw.data().iter().enumerate() {
            if !mask[i % 9] {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn frozen_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ps = ParamSet::new();
        ps.push("x", rand_tensor(&[2, 3, 2, 2], &mut rng)).unwrap();
        ps.push("g", rand_tensor(&[3], &mut rng)).unwrap();
        ps.push("b", rand_tensor(&[3], &mut rng)).unwrap();
        let mean = [0.1, -0.3, 0.2];
        let var = [1.5, 0.4, 2.0];
        let f = |p: &ParamSet<f64>, tape: &mut Tape<f64>| -> Result<Var> {
            let v = tape.params(p);
            let (y, stats) = tape.batch_norm(v[0], v[1], v[2], NormMode::Frozen { mean: &mean, var: &var, eps: 1e-5 })?;
            assert!(stats.is_none());
            let y = tape.sigmoid(y)?;
            tape.sum(y)
        };
        let mut tape = Tape::new();
        let l = f(&ps, &mut tape).unwrap();
        let a = tape.backward(l).unwrap();
        let n = finite_difference(&ps, 1e-5, |p| {
            let mut t = Tape::new();
            let l = f(p, &mut t)?;
            Ok(t.value(l).data()[0])
        })
        .unwrap();
        assert!(max_relative_error(&a, &n) < 1e-7);
    }
}
