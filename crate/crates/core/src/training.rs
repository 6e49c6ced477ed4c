//! Joint mini-batch optimization of `L = L_super + w · L_self` with
//! Nesterov momentum and polynomial learning-rate decay.

use std::fmt::Write as _;

use crate::datasets::{Mode, SplitDataset};
use crate::error::{Error, Result};
use crate::models::{build_model, ArchSpec, Branch, DualHeadModel, Param};
use crate::rng::RngStream;
use crate::tensor::{Graph, NormMode, Tensor, Var};
use crate::transforms::{
    augment_batch, augment_points, expand_proxy_batch, AugmentPolicy, GeoTransform,
    NUM_PROXY_CLASSES,
};

/// Purpose tags for the per-run random streams. Every branch draws from
/// its own streams, so adding or removing the self-supervised branch never
/// shifts the supervised branch's randomness.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const LABELED_SAMPLING: u64 = 2;
    pub const UNLABELED_SAMPLING: u64 = 3;
    pub const LABELED_AUGMENT: u64 = 4;
    pub const UNLABELED_AUGMENT: u64 = 5;
    pub const LABELED_DROPOUT: u64 = 6;
    pub const UNLABELED_DROPOUT: u64 = 7;
    pub const PROXY_LABELS: u64 = 8;
    pub const TRAIN_DATA: u64 = 100;
    pub const TEST_DATA: u64 = 101;
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Unlabeled images (or points) per step; labeled image batches are
    /// six times this so both branches see the same count.
    pub batch_size: usize,
    /// Self-supervised loss weight.
    pub w: f64,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_power: f64,
    /// Epochs over D_U. A supervised run counts epochs over the whole
    /// training set so it matches the SSL step budget.
    pub epochs: usize,
    /// Overrides the epoch-derived step count when set.
    pub steps: Option<usize>,
    /// Augmentation `g` of the labeled branch. The self-supervised branch
    /// uses the same policy with horizontal flips disabled.
    pub augment: AugmentPolicy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Ssl,
            batch_size: 16,
            w: 1.0,
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_power: 0.5,
            epochs: 50,
            steps: None,
            augment: AugmentPolicy {
                max_translate: 2,
                hflip_enabled: true,
                noise_sigma: 0.15,
            },
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return bad(format!("w = {} must be ≥ 0", self.w));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr = {} must be > 0", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum = {} outside [0, 1)", self.momentum));
        }
        if !(self.lr_power > 0.0 && self.lr_power.is_finite()) {
            return bad(format!("lr_power = {} must be > 0", self.lr_power));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay = {} must be ≥ 0", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.steps.is_none() && self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        self.augment.validate()
    }
}

/// `base_lr · (1 − t / t_max)^p`.
pub fn lr_schedule(t: usize, t_max: usize, base_lr: f64, p: f64) -> Result<f64> {
    if t_max == 0 {
        return Err(Error::Contract("lr schedule needs t_max ≥ 1".into()));
    }
    if t > t_max {
        return Err(Error::Contract(format!("step {t} beyond t_max {t_max}")));
    }
    Ok(base_lr * (1.0 - t as f64 / t_max as f64).powf(p))
}

pub struct SesemiLoss {
    pub total: Var,
    pub supervised: Var,
    pub self_supervised: Var,
}

/// Batch-mean cross-entropies of both heads and their weighted sum.
pub fn sesemi_loss(
    g: &mut Graph,
    logits: Var,
    targets: &[usize],
    proxy_logits: Var,
    proxy_targets: &[usize],
    w: f64,
) -> Result<SesemiLoss> {
    let width = g.value(proxy_logits).shape().get(1).copied();
    if width != Some(NUM_PROXY_CLASSES) {
        return Err(Error::Dimension(format!(
            "self-supervised logits of shape {:?}, expected width 6",
            g.value(proxy_logits).shape()
        )));
    }
    let supervised = g.softmax_cross_entropy(logits, targets)?;
    let self_supervised = g.softmax_cross_entropy(proxy_logits, proxy_targets)?;
    let weighted = g.scale(self_supervised, w)?;
    let total = g.add(supervised, weighted)?;
    Ok(SesemiLoss {
        total,
        supervised,
        self_supervised,
    })
}

/// One Nesterov update of a flat parameter slice:
/// `g' = g + λθ; v ← μv − ηg'; θ ← θ + μv − ηg'`.
pub fn nesterov_update(
    theta: &mut [f64],
    grad: Option<&[f64]>,
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for i in 0..theta.len() {
        let g = grad.map_or(0.0, |g| g[i]) + weight_decay * theta[i];
        velocity[i] = momentum * velocity[i] - lr * g;
        theta[i] += momentum * velocity[i] - lr * g;
    }
}

/// Nesterov SGD with decoupled per-parameter decay flags.
#[derive(Clone, Debug)]
pub struct NesterovSgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl NesterovSgd {
    pub fn new(params: &[Param], momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// Missing gradients count as zero; decay still applies to them.
    pub fn step(&mut self, params: &mut [Param], grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} parameters, {} gradients, {} velocities",
                params.len(),
                grads.len(),
                self.velocity.len()
            )));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    return Err(Error::Contract(format!(
                        "gradient {:?} for parameter `{}` {:?}",
                        g.shape(),
                        p.name,
                        p.value.shape()
                    )));
                }
            }
            let wd = if p.decay { self.weight_decay } else { 0.0 };
            nesterov_update(
                p.value.data_mut(),
                g.as_ref().map(Tensor::data),
                v.data_mut(),
                lr,
                self.momentum,
                wd,
            );
        }
        Ok(())
    }
}

/// Indices for one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    pub step: usize,
    pub epoch: usize,
    /// Rows of D_L.
    pub labeled: Vec<usize>,
    /// Rows of D_U; empty in supervised mode.
    pub unlabeled: Vec<usize>,
}

/// Deterministic batch index stream. D_U is reshuffled every epoch and
/// walked in chunks (the last one may be short); D_L is cycled through an
/// independent shuffle, reshuffled at every wrap-around.
pub struct BatchSampler {
    mode: Mode,
    n_labeled: usize,
    n_unlabeled: usize,
    batch_size: usize,
    labeled_batch: usize,
    steps_per_epoch: usize,
    total_steps: usize,
    step: usize,
    labeled_rng: RngStream,
    unlabeled_rng: RngStream,
    labeled_order: Vec<usize>,
    labeled_pos: usize,
    unlabeled_order: Vec<usize>,
}

impl BatchSampler {
    pub fn new(
        split: &SplitDataset,
        cfg: &TrainConfig,
        labeled_batch: usize,
        root: &RngStream,
    ) -> Result<Self> {
        let n_labeled = split.labeled.len();
        let n_unlabeled = split.unlabeled_inputs.as_ref().map_or(0, Tensor::outer);
        if split.mode != cfg.mode {
            return Err(Error::Contract(format!(
                "split built for {} but config mode is {}",
                split.mode, cfg.mode
            )));
        }
        if cfg.mode != Mode::Supervised && n_unlabeled == 0 {
            return Err(Error::Contract(format!("empty D_U in {} mode", cfg.mode)));
        }
        let steps_per_epoch = match cfg.mode {
            Mode::Supervised => split.train_size.div_ceil(cfg.batch_size),
            _ => n_unlabeled.div_ceil(cfg.batch_size),
        };
        let total_steps = cfg.steps.unwrap_or(cfg.epochs * steps_per_epoch);
        if total_steps < 2 {
            return Err(Error::Contract(format!(
                "a run needs at least 2 steps, got {total_steps}"
            )));
        }
        Ok(Self {
            mode: cfg.mode,
            n_labeled,
            n_unlabeled,
            batch_size: cfg.batch_size,
            labeled_batch,
            steps_per_epoch,
            total_steps,
            step: 0,
            labeled_rng: root.split(streams::LABELED_SAMPLING),
            unlabeled_rng: root.split(streams::UNLABELED_SAMPLING),
            labeled_order: Vec::new(),
            labeled_pos: 0,
            unlabeled_order: Vec::new(),
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    fn next_labeled(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.labeled_batch);
        while out.len() < self.labeled_batch {
            if self.labeled_pos == self.labeled_order.len() {
                self.labeled_order = self.labeled_rng.permutation(self.n_labeled);
                self.labeled_pos = 0;
            }
            out.push(self.labeled_order[self.labeled_pos]);
            self.labeled_pos += 1;
        }
        out
    }
}

impl Iterator for BatchSampler {
    type Item = BatchPlan;

    fn next(&mut self) -> Option<BatchPlan> {
        if self.step >= self.total_steps {
            return None;
        }
        let epoch = self.step / self.steps_per_epoch;
        let within = self.step % self.steps_per_epoch;
        let labeled = self.next_labeled();
        let unlabeled = if self.mode == Mode::Supervised {
            Vec::new()
        } else {
            if within == 0 {
                self.unlabeled_order = self.unlabeled_rng.permutation(self.n_unlabeled);
            }
            let start = within * self.batch_size;
            let end = (start + self.batch_size).min(self.n_unlabeled);
            self.unlabeled_order[start..end].to_vec()
        };
        let plan = BatchPlan {
            step: self.step,
            epoch,
            labeled,
            unlabeled,
        };
        self.step += 1;
        Some(plan)
    }
}

/// Batch index stream for a split and config.
pub fn sample_batches(
    split: &SplitDataset,
    cfg: &TrainConfig,
    image_data: bool,
) -> Result<BatchSampler> {
    let labeled_batch = if image_data {
        cfg.batch_size * NUM_PROXY_CLASSES
    } else {
        cfg.batch_size
    };
    BatchSampler::new(split, cfg, labeled_batch, &RngStream::new(cfg.seed))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_super: f64,
    pub loss_self: f64,
    pub loss_total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub test_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl RunMetrics {
    pub fn steps_csv(&self) -> String {
        let mut s = String::from("step,epoch,lr,loss_super,loss_self,loss_total\n");
        for r in &self.steps {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                r.step, r.epoch, r.lr, r.loss_super, r.loss_self, r.loss_total
            )
            .unwrap();
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,test_error\n");
        for r in &self.epochs {
            writeln!(s, "{},{}", r.epoch, r.test_error).unwrap();
        }
        s
    }

    pub fn final_test_error(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_error)
    }
}

/// Applies per-example random transforms to a B×2 batch of points.
fn proxy_points(points: &Tensor, rng: &mut RngStream) -> Result<(Tensor, Vec<usize>)> {
    let mut out = points.clone();
    let mut labels = Vec::with_capacity(points.outer());
    for p in out.data_mut().chunks_mut(2) {
        let t = GeoTransform::from_label(rng.below(NUM_PROXY_CLASSES))?;
        let q = t.apply_point([p[0], p[1]]);
        p.copy_from_slice(&q);
        labels.push(t.label());
    }
    Ok((out, labels))
}

fn annotate(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Numerical(format!(
            "non-finite value from {op} at step {step}; aborting"
        )),
        other => other,
    }
}

/// Trains a fresh model. See [`train_sesemi_observed`].
pub fn train_sesemi(
    split: &SplitDataset,
    spec: &ArchSpec,
    cfg: &TrainConfig,
) -> Result<(DualHeadModel, RunMetrics)> {
    train_sesemi_observed(split, spec, cfg, &mut |_, _| {})
}

/// Runs the full training loop, calling `observer` after every update.
/// The returned model is in eval mode with parameters rounded to `f32`.
pub fn train_sesemi_observed(
    split: &SplitDataset,
    spec: &ArchSpec,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&StepRecord, &DualHeadModel),
) -> Result<(DualHeadModel, RunMetrics)> {
    cfg.validate()?;
    if split.labeled.num_classes != spec.num_classes {
        return Err(Error::Contract(format!(
            "dataset has {} classes, architecture {}",
            split.labeled.num_classes, spec.num_classes
        )));
    }
    if split.labeled.example_shape() != spec.input_shape.as_slice() {
        return Err(Error::Dimension(format!(
            "examples of shape {:?} for architecture input {:?}",
            split.labeled.example_shape(),
            spec.input_shape
        )));
    }
    let images = spec.is_image();
    let root = RngStream::new(cfg.seed);
    let mut model = build_model(spec, &mut root.split(streams::INIT))?;
    let mut sampler = sample_batches(split, cfg, images)?;
    let spe = sampler.steps_per_epoch();
    let t_max = sampler.total_steps() - 1;

    let mut lab_aug = root.split(streams::LABELED_AUGMENT);
    let mut unl_aug = root.split(streams::UNLABELED_AUGMENT);
    let mut lab_drop = root.split(streams::LABELED_DROPOUT);
    let mut unl_drop = root.split(streams::UNLABELED_DROPOUT);
    let mut proxy_rng = root.split(streams::PROXY_LABELS);
    let self_policy = cfg.augment.for_self_supervised();
    let mut opt = NesterovSgd::new(model.params(), cfg.momentum, cfg.weight_decay);
    let mut metrics = RunMetrics::default();

    for plan in sampler.by_ref() {
        let t = plan.step;
        let lr = lr_schedule(t, t_max, cfg.base_lr, cfg.lr_power)?;
        let step_result: Result<StepRecord> = (|| {
            let raw = split.labeled.inputs.gather_outer(&plan.labeled)?;
            let targets: Vec<usize> = plan.labeled.iter().map(|&i| split.labeled.targets[i]).collect();
            let xl = if images {
                augment_batch(&raw, &cfg.augment, &mut lab_aug)?
            } else {
                augment_points(&raw, &cfg.augment, &mut lab_aug)?
            };
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let xl = g.constant(xl);
            let z = model.forward(&mut g, &bound, xl, Branch::Supervised, &mut lab_drop)?;

            let (total, sup, selfl) = if split.mode == Mode::Supervised {
                let sup = g.softmax_cross_entropy(z, &targets)?;
                (sup, sup, None)
            } else {
                let unl = split.unlabeled_inputs.as_ref().expect("checked by sampler");
                let raw = unl.gather_outer(&plan.unlabeled)?;
                let (xu, proxy) = if images {
                    let (expanded, labels) = expand_proxy_batch(&raw)?;
                    (augment_batch(&expanded, &self_policy, &mut unl_aug)?, labels)
                } else {
                    let (moved, labels) = proxy_points(&raw, &mut proxy_rng)?;
                    (augment_points(&moved, &self_policy, &mut unl_aug)?, labels)
                };
                let xu = g.constant(xu);
                let zu = model.forward(&mut g, &bound, xu, Branch::SelfSupervised, &mut unl_drop)?;
                let l = sesemi_loss(&mut g, z, &targets, zu, &proxy, cfg.w)?;
                (l.total, l.supervised, Some(l.self_supervised))
            };

            let mut grads = g.backward(total)?;
            let grads: Vec<Option<Tensor>> = bound.vars().iter().map(|&v| grads.take(v)).collect();
            opt.step(model.params_mut(), &grads, lr)?;
            Ok(StepRecord {
                step: t,
                epoch: plan.epoch,
                lr,
                loss_super: g.value(sup).item(),
                loss_self: selfl.map_or(0.0, |v| g.value(v).item()),
                loss_total: g.value(total).item(),
            })
        })();
        let record = step_result.map_err(|e| annotate(t, e))?;
        observer(&record, &model);
        metrics.steps.push(record);

        if (t + 1) % spe == 0 || t == t_max {
            if t == t_max {
                model.round_to_f32();
            }
            model.set_mode(NormMode::Eval);
            let err = model.error_rate(&split.test.inputs, &split.test.targets)?;
            metrics.epochs.push(EpochRecord {
                epoch: plan.epoch,
                test_error: err,
            });
            if t != t_max {
                model.set_mode(NormMode::Train);
            }
        }
    }
    Ok((model, metrics))
}
