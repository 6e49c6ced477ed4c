//! Dual-head prediction functions: a shared backbone feeding a C-way
//! supervised head and a 6-way self-supervised head.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{ActivationKind, BatchNormState, Graph, NormMode, Tensor, Var};
use crate::transforms::NUM_PROXY_CLASSES;

pub const LEAKY_SLOPE: f64 = 0.1;
/// Rows per inference chunk.
pub const EVAL_CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Supervised,
    SelfSupervised,
}

/// One conv block: `convs` × (conv → BN → activation), then an optional
/// max pool followed by dropout.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlockSpec {
    pub out_channels: usize,
    pub convs: usize,
    pub kernel: usize,
    pub pad: usize,
    /// (window, stride)
    pub pool: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArchKind {
    Mlp { hidden: Vec<usize> },
    ConvNet { blocks: Vec<ConvBlockSpec> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub kind: ArchKind,
    /// `[d]` for vectors, `[C, H, W]` for images.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub activation: ActivationKind,
    pub dropout: f64,
}

impl ArchSpec {
    /// Three hidden layers of 100 leaky-ReLU units.
    pub fn mlp(input_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ArchKind::Mlp {
                hidden: vec![100; 3],
            },
            input_shape: vec![input_dim],
            num_classes,
            activation: ActivationKind::LeakyRelu(LEAKY_SLOPE),
            dropout: 0.0,
        }
    }

    /// Reduced three-block ConvNet (widths 32-64-128). On 32×32 input the
    /// two pooled blocks give 8×8 and the valid 3×3 conv of the last block
    /// gives a 6×6×128 feature map.
    pub fn convnet(input_shape: [usize; 3], num_classes: usize) -> Self {
        Self {
            kind: ArchKind::ConvNet {
                blocks: vec![
                    ConvBlockSpec {
                        out_channels: 32,
                        convs: 2,
                        kernel: 3,
                        pad: 1,
                        pool: Some((2, 2)),
                    },
                    ConvBlockSpec {
                        out_channels: 64,
                        convs: 2,
                        kernel: 3,
                        pad: 1,
                        pool: Some((2, 2)),
                    },
                    ConvBlockSpec {
                        out_channels: 128,
                        convs: 1,
                        kernel: 3,
                        pad: 0,
                        pool: None,
                    },
                ],
            },
            input_shape: input_shape.to_vec(),
            num_classes,
            activation: ActivationKind::LeakyRelu(LEAKY_SLOPE),
            dropout: 0.5,
        }
    }

    /// A small ConvNet for 8×8 inputs, used for gradient checking.
    pub fn convnet_tiny(num_classes: usize) -> Self {
        Self {
            kind: ArchKind::ConvNet {
                blocks: vec![
                    ConvBlockSpec {
                        out_channels: 4,
                        convs: 1,
                        kernel: 3,
                        pad: 1,
                        pool: Some((2, 2)),
                    },
                    ConvBlockSpec {
                        out_channels: 6,
                        convs: 1,
                        kernel: 3,
                        pad: 0,
                        pool: None,
                    },
                ],
            },
            input_shape: vec![3, 8, 8],
            num_classes,
            activation: ActivationKind::LeakyRelu(LEAKY_SLOPE),
            dropout: 0.5,
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self.kind, ArchKind::ConvNet { .. })
    }

    /// Shape of the backbone output for one example, checking the spec.
    pub fn feature_shape(&self) -> Result<Vec<usize>> {
        if self.num_classes < 2 {
            return Err(Error::Parameter(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Parameter(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout
            )));
        }
        if let ActivationKind::LeakyRelu(a) = self.activation {
            if !(0.0..1.0).contains(&a) {
                return Err(Error::Parameter(format!("leaky slope {a} outside [0, 1)")));
            }
        }
        match &self.kind {
            ArchKind::Mlp { hidden } => {
                if self.input_shape.len() != 1 || self.input_shape[0] == 0 {
                    return Err(Error::Parameter(format!(
                        "mlp input shape {:?} must be [d]",
                        self.input_shape
                    )));
                }
                if hidden.is_empty() || hidden.contains(&0) {
                    return Err(Error::Parameter(format!("bad hidden widths {hidden:?}")));
                }
                Ok(vec![*hidden.last().unwrap()])
            }
            ArchKind::ConvNet { blocks } => {
                let &[mut c, mut h, mut w] = &self.input_shape[..] else {
                    return Err(Error::Parameter(format!(
                        "convnet input shape {:?} must be [C, H, W]",
                        self.input_shape
                    )));
                };
                if blocks.is_empty() {
                    return Err(Error::Parameter("convnet needs at least one block".into()));
                }
                for (bi, b) in blocks.iter().enumerate() {
                    if b.out_channels == 0 || b.convs == 0 || b.kernel == 0 {
                        return Err(Error::Parameter(format!("degenerate block {bi}: {b:?}")));
                    }
                    for _ in 0..b.convs {
                        if b.kernel > h + 2 * b.pad || b.kernel > w + 2 * b.pad {
                            return Err(Error::Parameter(format!(
                                "block {bi}: kernel {} does not fit {h}×{w} with pad {}",
                                b.kernel, b.pad
                            )));
                        }
                        h = h + 2 * b.pad - b.kernel + 1;
                        w = w + 2 * b.pad - b.kernel + 1;
                    }
                    c = b.out_channels;
                    if let Some((win, stride)) = b.pool {
                        if win == 0 || stride == 0 || win > h || win > w {
                            return Err(Error::Parameter(format!(
                                "block {bi}: pool {win}/{stride} does not fit {h}×{w}"
                            )));
                        }
                        h = (h - win) / stride + 1;
                        w = (w - win) / stride + 1;
                    }
                }
                Ok(vec![c, h, w])
            }
        }
    }

    /// Line-oriented `key = value` description, readable by [`ArchSpec::from_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let dims = |v: &[usize]| {
            v.iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        match &self.kind {
            ArchKind::Mlp { hidden } => {
                writeln!(s, "kind = mlp").unwrap();
                writeln!(s, "hidden = {}", dims(hidden)).unwrap();
            }
            ArchKind::ConvNet { blocks } => {
                writeln!(s, "kind = convnet").unwrap();
                for b in blocks {
                    let (win, stride) = b.pool.unwrap_or((0, 0));
                    writeln!(
                        s,
                        "block = {},{},{},{},{},{}",
                        b.out_channels, b.convs, b.kernel, b.pad, win, stride
                    )
                    .unwrap();
                }
            }
        }
        writeln!(s, "input_shape = {}", dims(&self.input_shape)).unwrap();
        writeln!(s, "num_classes = {}", self.num_classes).unwrap();
        match self.activation {
            ActivationKind::Relu => writeln!(s, "activation = relu").unwrap(),
            ActivationKind::LeakyRelu(a) => writeln!(s, "activation = leaky_relu:{a}").unwrap(),
        }
        writeln!(s, "dropout = {}", self.dropout).unwrap();
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kind = None;
        let mut hidden = None;
        let mut blocks = Vec::new();
        let mut input_shape = None;
        let mut num_classes = None;
        let mut activation = None;
        let mut dropout = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| Error::Config {
                line: i + 1,
                message: m,
            };
            let (k, v) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let list = |v: &str| -> Result<Vec<usize>> {
                v.split(',')
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| err(format!("bad integer list `{v}` for `{k}`")))
            };
            match k {
                "kind" => kind = Some(v.to_string()),
                "hidden" => hidden = Some(list(v)?),
                "block" => {
                    let p = list(v)?;
                    if p.len() != 6 {
                        return Err(err(format!("block needs 6 fields, got `{v}`")));
                    }
                    blocks.push(ConvBlockSpec {
                        out_channels: p[0],
                        convs: p[1],
                        kernel: p[2],
                        pad: p[3],
                        pool: (p[4] > 0).then_some((p[4], p[5])),
                    });
                }
                "input_shape" => input_shape = Some(list(v)?),
                "num_classes" => {
                    num_classes = Some(v.parse().map_err(|_| err(format!("bad num_classes `{v}`")))?)
                }
                "activation" => {
                    activation = Some(match v {
                        "relu" => ActivationKind::Relu,
                        _ => {
                            let a = v
                                .strip_prefix("leaky_relu:")
                                .and_then(|a| a.parse().ok())
                                .ok_or_else(|| err(format!("bad activation `{v}`")))?;
                            ActivationKind::LeakyRelu(a)
                        }
                    })
                }
                "dropout" => dropout = Some(v.parse().map_err(|_| err(format!("bad dropout `{v}`")))?),
                other => return Err(err(format!("unknown architecture key `{other}`"))),
            }
        }
        let missing = |k: &str| Error::Config {
            line: 0,
            message: format!("architecture is missing `{k}`"),
        };
        let kind = match kind.as_deref() {
            Some("mlp") => ArchKind::Mlp {
                hidden: hidden.ok_or_else(|| missing("hidden"))?,
            },
            Some("convnet") => ArchKind::ConvNet { blocks },
            Some(other) => {
                return Err(Error::Config {
                    line: 0,
                    message: format!("unknown architecture kind `{other}`"),
                })
            }
            None => return Err(missing("kind")),
        };
        let spec = ArchSpec {
            kind,
            input_shape: input_shape.ok_or_else(|| missing("input_shape"))?,
            num_classes: num_classes.ok_or_else(|| missing("num_classes"))?,
            activation: activation.ok_or_else(|| missing("activation"))?,
            dropout: dropout.ok_or_else(|| missing("dropout"))?,
        };
        spec.feature_shape()?;
        Ok(spec)
    }
}

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether weight decay applies (false for biases and BN affine terms).
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualHeadModel {
    spec: ArchSpec,
    params: Vec<Param>,
    bn_names: Vec<String>,
    bn: Vec<BatchNormState>,
    mode: NormMode,
}

/// Parameters registered in a graph, in model order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut RngStream) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| std * rng.normal())
}

/// Builds a model with He fan-in Gaussian weights and zero biases.
pub fn build_model(spec: &ArchSpec, rng: &mut RngStream) -> Result<DualHeadModel> {
    let feat = spec.feature_shape()?;
    let mut params = Vec::new();
    let mut bn_names = Vec::new();
    let mut bn = Vec::new();
    let mut push = |name: String, value: Tensor, decay: bool| {
        params.push(Param { name, value, decay })
    };
    match &spec.kind {
        ArchKind::Mlp { hidden } => {
            let mut fan_in = spec.input_shape[0];
            for (i, &width) in hidden.iter().enumerate() {
                push(format!("hidden{i}.weight"), he_normal(&[fan_in, width], fan_in, rng), true);
                push(format!("hidden{i}.bias"), Tensor::zeros(&[width]), false);
                fan_in = width;
            }
            for (name, out) in [("sup_head", spec.num_classes), ("self_head", NUM_PROXY_CLASSES)] {
                push(format!("{name}.weight"), he_normal(&[fan_in, out], fan_in, rng), true);
                push(format!("{name}.bias"), Tensor::zeros(&[out]), false);
            }
        }
        ArchKind::ConvNet { blocks } => {
            let mut c_in = spec.input_shape[0];
            for (bi, b) in blocks.iter().enumerate() {
                for j in 0..b.convs {
                    let fan_in = c_in * b.kernel * b.kernel;
                    let base = format!("block{bi}.conv{j}");
                    push(
                        format!("{base}.weight"),
                        he_normal(&[b.out_channels, c_in, b.kernel, b.kernel], fan_in, rng),
                        true,
                    );
                    push(format!("{base}.bn.gamma"), Tensor::full(&[b.out_channels], 1.0), false);
                    push(format!("{base}.bn.beta"), Tensor::zeros(&[b.out_channels]), false);
                    bn_names.push(format!("{base}.bn"));
                    bn.push(BatchNormState::new(b.out_channels));
                    c_in = b.out_channels;
                }
            }
            debug_assert_eq!(c_in, feat[0]);
            for (name, out) in [("sup_head", spec.num_classes), ("self_head", NUM_PROXY_CLASSES)] {
                push(format!("{name}.weight"), he_normal(&[out, c_in, 1, 1], c_in, rng), true);
                push(format!("{name}.bias"), Tensor::zeros(&[out]), false);
            }
        }
    }
    Ok(DualHeadModel {
        spec: spec.clone(),
        params,
        bn_names,
        bn,
        mode: NormMode::Train,
    })
}

impl DualHeadModel {
    /// Reassembles a model from stored parts, checking every shape.
    pub fn from_parts(
        spec: ArchSpec,
        params: Vec<Param>,
        bn: Vec<(String, BatchNormState)>,
    ) -> Result<Self> {
        let template = build_model(&spec, &mut RngStream::new(0))?;
        if template.params.len() != params.len() {
            return Err(Error::Dimension(format!(
                "architecture has {} parameters, {} supplied",
                template.params.len(),
                params.len()
            )));
        }
        for (t, p) in template.params.iter().zip(&params) {
            if t.name != p.name || t.value.shape() != p.value.shape() {
                return Err(Error::Dimension(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    p.name,
                    p.value.shape(),
                    t.name,
                    t.value.shape()
                )));
            }
        }
        if template.bn_names.len() != bn.len()
            || template.bn_names.iter().zip(&bn).any(|(n, (m, _))| n != m)
        {
            return Err(Error::Dimension(format!(
                "architecture has {} batch-norm layers, {} supplied",
                template.bn_names.len(),
                bn.len()
            )));
        }
        for ((n, s), t) in bn.iter().zip(&template.bn) {
            if s.channels() != t.channels() {
                return Err(Error::Dimension(format!(
                    "batch-norm `{n}` has {} channels, expected {}",
                    s.channels(),
                    t.channels()
                )));
            }
        }
        let (bn_names, bn) = bn.into_iter().unzip();
        Ok(Self {
            params: params
                .into_iter()
                .zip(&template.params)
                .map(|(p, t)| Param { decay: t.decay, ..p })
                .collect(),
            spec,
            bn_names,
            bn,
            mode: NormMode::Eval,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn batch_norms(&self) -> impl Iterator<Item = (&str, &BatchNormState)> {
        self.bn_names.iter().map(String::as_str).zip(&self.bn)
    }

    pub fn batch_norms_mut(&mut self) -> impl Iterator<Item = (&str, &mut BatchNormState)> {
        self.bn_names.iter().map(String::as_str).zip(self.bn.iter_mut())
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: NormMode) {
        self.mode = mode;
    }

    /// Whether the named parameter belongs to the shared backbone.
    pub fn is_backbone(name: &str) -> bool {
        !(name.starts_with("sup_head.") || name.starts_with("self_head."))
    }

    /// Registers every parameter in `g`; with `trainable` false they are
    /// constants and no gradient work is done for them.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| {
                    if trainable {
                        g.param(p.value.clone())
                    } else {
                        g.constant(p.value.clone())
                    }
                })
                .collect(),
        )
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() < 2 || x.shape()[1..] != self.spec.input_shape[..] {
            return Err(Error::Dimension(format!(
                "input of shape {:?} for a model expecting [B, {}]",
                x.shape(),
                self.spec
                    .input_shape
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join(", ")
            )));
        }
        Ok(())
    }

    /// Shared backbone. In train mode batch-norm running statistics are
    /// updated and dropout masks are drawn from `rng`.
    pub fn backbone(
        &mut self,
        g: &mut Graph,
        bound: &Bound,
        x: Var,
        rng: &mut RngStream,
    ) -> Result<Var> {
        let mut bn = std::mem::take(&mut self.bn);
        let out = self.backbone_with(g, bound, x, rng, &mut bn);
        self.bn = bn;
        out
    }

    fn backbone_with(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x: Var,
        rng: &mut RngStream,
        bn: &mut [BatchNormState],
    ) -> Result<Var> {
        self.check_input(g.value(x))?;
        let p = bound.vars();
        let mode = self.mode;
        let mut h = x;
        let mut k = 0;
        match &self.spec.kind {
            ArchKind::Mlp { hidden } => {
                for _ in hidden {
                    h = g.matmul(h, p[k])?;
                    h = g.add_bias(h, p[k + 1])?;
                    h = g.activation(h, self.spec.activation)?;
                    h = g.dropout(h, self.spec.dropout, rng, mode)?;
                    k += 2;
                }
            }
            ArchKind::ConvNet { blocks } => {
                let mut layer = 0;
                for b in blocks {
                    for _ in 0..b.convs {
                        h = g.conv2d(h, p[k], None, 1, b.pad)?;
                        h = g.batchnorm(h, p[k + 1], p[k + 2], &mut bn[layer], mode)?;
                        h = g.activation(h, self.spec.activation)?;
                        k += 3;
                        layer += 1;
                    }
                    if let Some((win, stride)) = b.pool {
                        h = g.maxpool2d(h, win, stride)?;
                        h = g.dropout(h, self.spec.dropout, rng, mode)?;
                    }
                }
            }
        }
        Ok(h)
    }

    /// Applies one head to backbone features, giving B×C or B×6 logits.
    pub fn head(&self, g: &mut Graph, bound: &Bound, features: Var, branch: Branch) -> Result<Var> {
        let n = self.params.len();
        let k = match branch {
            Branch::Supervised => n - 4,
            Branch::SelfSupervised => n - 2,
        };
        let p = bound.vars();
        match self.spec.kind {
            ArchKind::Mlp { .. } => {
                let z = g.matmul(features, p[k])?;
                g.add_bias(z, p[k + 1])
            }
            ArchKind::ConvNet { .. } => {
                let z = g.conv2d(features, p[k], Some(p[k + 1]), 1, 0)?;
                g.global_avg_pool(z)
            }
        }
    }

    pub fn forward(
        &mut self,
        g: &mut Graph,
        bound: &Bound,
        x: Var,
        branch: Branch,
        rng: &mut RngStream,
    ) -> Result<Var> {
        let f = self.backbone(g, bound, x, rng)?;
        self.head(g, bound, f, branch)
    }

    /// Eval-mode backbone features for a batch.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.eval_map(x, |m, g, bound, xv, bn| {
            m.backbone_with(g, bound, xv, &mut RngStream::new(0), bn)
        })
    }

    /// Eval-mode logits of one branch, evaluated in chunks.
    pub fn logits(&self, x: &Tensor, branch: Branch) -> Result<Tensor> {
        self.eval_map(x, |m, g, bound, xv, bn| {
            let f = m.backbone_with(g, bound, xv, &mut RngStream::new(0), bn)?;
            m.head(g, bound, f, branch)
        })
    }

    fn eval_map<F>(&self, x: &Tensor, f: F) -> Result<Tensor>
    where
        F: Fn(&Self, &mut Graph, &Bound, Var, &mut [BatchNormState]) -> Result<Var>,
    {
        if self.mode != NormMode::Eval {
            return Err(Error::Contract("inference requires an eval-mode model".into()));
        }
        self.check_input(x)?;
        let mut chunks = Vec::new();
        let mut inner_shape = Vec::new();
        let n = x.outer();
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let mut g = Graph::new();
            let bound = self.bind(&mut g, false);
            let xv = g.constant(x.gather_outer(&idx)?);
            let mut bn = self.bn.clone();
            let out = f(self, &mut g, &bound, xv, &mut bn)?;
            let t = g.value(out);
            inner_shape = t.shape()[1..].to_vec();
            for i in 0..t.outer() {
                chunks.push(t.slice_outer(i).to_vec());
            }
            start = end;
        }
        Tensor::stack(&inner_shape, &chunks)
    }

    /// Class predictions from the supervised head.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        self.logits(x, Branch::Supervised)?.argmax_rows()
    }

    /// Softmax of the supervised logits.
    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        self.logits(x, Branch::Supervised)?.softmax_rows()
    }

    /// Fraction of `targets` misclassified.
    pub fn error_rate(&self, x: &Tensor, targets: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        let wrong = pred.iter().zip(targets).filter(|(p, t)| p != t).count();
        Ok(wrong as f64 / targets.len() as f64)
    }

    /// Rounds every parameter and running statistic to `f32` precision so
    /// a 32-bit checkpoint reproduces this model exactly.
    pub fn round_to_f32(&mut self) {
        let r = |v: &mut f64| *v = *v as f32 as f64;
        for p in &mut self.params {
            p.value.data_mut().iter_mut().for_each(r);
        }
        for s in &mut self.bn {
            s.running_mean.iter_mut().for_each(r);
            s.running_var.iter_mut().for_each(r);
        }
    }
}

/// Argmax of a logit vector.
pub fn argmax_class(logits: &[f64]) -> usize {
    crate::tensor::kernels::argmax(logits)
}
