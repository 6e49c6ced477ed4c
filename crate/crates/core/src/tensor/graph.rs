//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Nodes are
//! appended in evaluation order, so the tape is already a topological order
//! of an acyclic graph and [`Graph::backward`] walks it in reverse, summing
//! the contributions of nodes that feed several consumers.

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActivationKind {
    Relu,
    LeakyRelu(f64),
}

impl ActivationKind {
    fn slope(self) -> f64 {
        match self {
            ActivationKind::Relu => 0.0,
            ActivationKind::LeakyRelu(a) => a,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub updates: u64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            updates: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Activation(Var, f64),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    GlobalAvgPool(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    faults: Vec<(Var, f64)>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// Test hook: scales the gradient delivered to `leaf` by `factor`,
    /// emulating a faulty backward rule.
    #[doc(hidden)]
    pub fn corrupt_gradient(&mut self, leaf: Var, factor: f64) {
        self.faults.push((leaf, factor));
    }

    /// Smallest |x| over the inputs of every activation node: the distance
    /// of the recorded forward pass from the nearest kink.
    pub fn activation_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Activation(x, _) => Some(self.nodes[x.0].value.data()),
                _ => None,
            })
            .flat_map(|d| d.iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name.into() });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Dimension(format!(
                "add of {:?} and {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let mut out = x.clone();
        out.add_assign(y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// Adds a length-N bias to every row of an M×N matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let [_, n] = self.value(x).dims2()?;
        let b = self.value(bias);
        if b.len() != n {
            return Err(Error::Dimension(format!(
                "bias {:?} for rows of width {n}",
                b.shape()
            )));
        }
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        self.push("add_bias", out, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push("scale", out, Op::Scale(x, s), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// 2-D cross-correlation with zero padding. `x` is B×C×H×W, `kernel`
    /// F×C×kh×kw, optional `bias` of length F.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        let [f, kc, kh, kw] = self.value(kernel).dims4()?;
        if kc != c {
            return Err(Error::Dimension(format!(
                "conv2d input {:?} with kernel {:?}",
                self.value(x).shape(),
                self.value(kernel).shape()
            )));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be positive".into()));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::Dimension(format!(
                "kernel {kh}×{kw} larger than padded input {}×{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        if let Some(bv) = bias {
            if self.value(bv).len() != f {
                return Err(Error::Dimension(format!(
                    "conv2d bias {:?} for {f} filters",
                    self.value(bv).shape()
                )));
            }
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        };
        let data = kernels::conv_forward(
            &geom,
            b,
            f,
            self.value(x).data(),
            self.value(kernel).data(),
            bias.map(|bv| self.value(bv).data()),
        );
        let out = Tensor::new(vec![b, f, geom.out_h, geom.out_w], data)?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
            },
            &inputs,
        )
    }

    /// Max pooling over B×C×H×W; ties go to the first row-major position.
    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        if window == 0 || stride == 0 {
            return Err(Error::Parameter("maxpool window and stride must be positive".into()));
        }
        if window > h || window > w {
            return Err(Error::Dimension(format!(
                "pool window {window} exceeds input {h}×{w}"
            )));
        }
        let (data, argmax, oh, ow) =
            kernels::maxpool_forward(b * c, h, w, window, stride, self.value(x).data());
        let out = Tensor::new(vec![b, c, oh, ow], data)?;
        self.push("maxpool2d", out, Op::MaxPool { x, argmax }, &[x])
    }

    /// Per-channel batch normalization of B×C×H×W. In train mode batch
    /// statistics are used and `state` is updated; eval mode reads `state`.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        mode: NormMode,
    ) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        if self.value(gamma).len() != c || self.value(beta).len() != c || state.channels() != c {
            return Err(Error::Dimension(format!(
                "batchnorm over {c} channels with gamma {:?}, beta {:?}, state {}",
                self.value(gamma).shape(),
                self.value(beta).shape(),
                state.channels()
            )));
        }
        let plane = h * w;
        let n = b * plane;
        let xs = self.value(x).data();
        let (means, vars) = match mode {
            NormMode::Train => {
                if n < 2 {
                    return Err(Error::Contract(
                        "batchnorm in train mode needs at least two values per channel".into(),
                    ));
                }
                let mut means = vec![0.0; c];
                let mut vars = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        let off = (bi * c + ch) * plane;
                        s += xs[off..off + plane].iter().sum::<f64>();
                    }
                    let mean = s / n as f64;
                    let mut ss = 0.0;
                    for bi in 0..b {
                        let off = (bi * c + ch) * plane;
                        ss += xs[off..off + plane]
                            .iter()
                            .map(|v| (v - mean) * (v - mean))
                            .sum::<f64>();
                    }
                    means[ch] = mean;
                    vars[ch] = ss / n as f64;
                }
                (means, vars)
            }
            NormMode::Eval => {
                if state.updates == 0 {
                    return Err(Error::Uninitialized(
                        "batchnorm evaluated before any train-mode update".into(),
                    ));
                }
                (state.running_mean.clone(), state.running_var.clone())
            }
        };
        let inv_std: Vec<f64> = vars.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                for i in off..off + plane {
                    xhat[i] = (xs[i] - means[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let train = mode == NormMode::Train;
        if train {
            let unbias = n as f64 / (n as f64 - 1.0);
            for ch in 0..c {
                state.running_mean[ch] =
                    BN_MOMENTUM * state.running_mean[ch] + (1.0 - BN_MOMENTUM) * means[ch];
                state.running_var[ch] =
                    BN_MOMENTUM * state.running_var[ch] + (1.0 - BN_MOMENTUM) * vars[ch] * unbias;
            }
            state.updates += 1;
        }
        let out = Tensor::new(vec![b, c, h, w], out)?;
        self.push(
            "batchnorm",
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        )
    }

    pub fn activation(&mut self, x: Var, kind: ActivationKind) -> Result<Var> {
        let alpha = kind.slope();
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::Parameter(format!(
                "leaky slope {alpha} outside [0, 1)"
            )));
        }
        let out = self
            .value(x)
            .map(|v| if v > 0.0 { v } else { alpha * v });
        self.push("activation", out, Op::Activation(x, alpha), &[x])
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `rate` and survivors are scaled by 1/(1−rate).
    pub fn dropout(
        &mut self,
        x: Var,
        rate: f64,
        rng: &mut RngStream,
        mode: NormMode,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == NormMode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
            .collect();
        let mut out = self.value(x).clone();
        for (v, m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.push("dropout", out, Op::Dropout { x, mask }, &[x])
    }

    /// Spatial mean of B×C×H×W, giving B×C.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        let plane = h * w;
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let out = Tensor::new(vec![b, c], data)?;
        self.push("global_avg_pool", out, Op::GlobalAvgPool(x), &[x])
    }

    /// Batch-mean of −log softmax(logits)[target]. Returns a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let [b, k] = self.value(logits).dims2()?;
        if targets.len() != b {
            return Err(Error::Dimension(format!(
                "{} targets for {b} logit rows",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Index(format!("target {t} outside [0, {k})")));
        }
        let z = self.value(logits).data();
        let mut probs = z.to_vec();
        let mut total = 0.0;
        for (i, row) in probs.chunks_mut(k).enumerate() {
            let zr = &z[i * k..(i + 1) * k];
            let max = zr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + zr.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - zr[targets[i]];
            kernels::softmax_in_place(row);
        }
        let out = Tensor::scalar(total / b as f64);
        self.push(
            "softmax_cross_entropy",
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward from non-scalar of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        for &(v, factor) in &self.faults {
            if let Some(g) = grads[v.0].as_mut() {
                g.data_mut().iter_mut().for_each(|x| *x *= factor);
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.wants(v) {
            return;
        }
        match grads[v.0].as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => grads[v.0] = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let bt = self.value(*b).transpose2()?;
                    self.accumulate(grads, *a, g.matmul(&bt)?);
                }
                if self.wants(*b) {
                    let at = self.value(*a).transpose2()?;
                    self.accumulate(grads, *b, at.matmul(g)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*bias) {
                    let n = self.value(*bias).len();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(shape, db)?);
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|v| v * s)),
            Op::Sum(x) => {
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, g.reshape(self.value(*x).shape())?);
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
            } => {
                let xv = self.value(*x);
                let kv = self.value(*kernel);
                let (dx, dk, db) = kernels::conv_backward(
                    geom,
                    xv.outer(),
                    kv.outer(),
                    xv.data(),
                    kv.data(),
                    g.data(),
                    self.wants(*x),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                self.accumulate(grads, *kernel, Tensor::new(kv.shape().to_vec(), dk)?);
                if let Some(bv) = bias {
                    let shape = self.value(*bv).shape().to_vec();
                    self.accumulate(grads, *bv, Tensor::new(shape, db)?);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                let d = dx.data_mut();
                for (&src, gv) in argmax.iter().zip(g.data()) {
                    d[src] += gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let [b, c, h, w] = self.value(*x).dims4()?;
                let plane = h * w;
                let n = (b * plane) as f64;
                let gam = self.value(*gamma).data();
                let gd = g.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * plane;
                        for i in off..off + plane {
                            dgamma[ch] += gd[i] * xhat[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * plane;
                            for i in off..off + plane {
                                dx[i] = if *train {
                                    // dxhat = g·γ; sums of dxhat and dxhat·xhat are γ·dβ and γ·dγ.
                                    gam[ch] * inv_std[ch] / n
                                        * (n * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    gd[i] * gam[ch] * inv_std[ch]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(vec![b, c, h, w], dx)?);
                }
                let gshape = self.value(*gamma).shape().to_vec();
                let bshape = self.value(*beta).shape().to_vec();
                self.accumulate(grads, *gamma, Tensor::new(gshape, dgamma)?);
                self.accumulate(grads, *beta, Tensor::new(bshape, dbeta)?);
            }
            Op::Activation(x, alpha) => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (d, &pre) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if pre <= 0.0 {
                        *d *= alpha;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Dropout { x, mask } => {
                let mut dx = g.clone();
                for (d, m) in dx.data_mut().iter_mut().zip(mask) {
                    *d *= m;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape().to_vec();
                let plane = shape[2] * shape[3];
                let inv = 1.0 / plane as f64;
                let mut dx = Vec::with_capacity(plane * g.len());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv * inv, plane));
                }
                self.accumulate(grads, *x, Tensor::new(shape, dx)?);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let shape = self.value(*logits).shape().to_vec();
                let k = shape[1];
                let scale = g.item() / targets.len() as f64;
                let mut d = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * k + t] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, *logits, Tensor::new(shape, d)?);
            }
        }
        Ok(())
    }
}
