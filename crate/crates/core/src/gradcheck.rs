//! Finite-difference verification of the full SESEMI loss gradient.
//!
//! Every parameter of a small model is perturbed by ±h and the central
//! difference of the joint loss is compared with the autodiff gradient.
//! Dropout masks are replayed from a fixed stream so the loss is a
//! deterministic function of the parameters.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{build_model, ArchKind, ArchSpec, Branch, DualHeadModel};
use crate::rng::RngStream;
use crate::tensor::{Graph, NormMode, Tensor};
use crate::training::sesemi_loss;
use crate::transforms::{expand_proxy_batch, NUM_PROXY_CLASSES};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Probe inputs are redrawn until every activation input is at least this
/// far from zero, so no ±h perturbation crosses a kink.
pub const KINK_MARGIN: f64 = 1e-4;
const MAX_DRAWS: usize = 1000;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Labeled examples per batch; unlabeled images are a third of this.
    pub batch: usize,
    /// Scales the autodiff gradient of the named parameter (negative control).
    pub corrupt: Option<(String, f64)>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            batch: 6,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCheck {
    pub name: String,
    pub len: usize,
    /// ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖).
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub arch: String,
    pub tolerance: f64,
    pub layers: Vec<LayerCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }

    pub fn failures(&self) -> impl Iterator<Item = &LayerCheck> {
        self.layers.iter().filter(|l| !(l.rel_error <= self.tolerance))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.layers.iter().map(|l| l.rel_error).fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let width = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(0);
        for l in &self.layers {
            let verdict = if l.rel_error <= self.tolerance { "ok" } else { "FAIL" };
            writeln!(s, "{:<width$}  {:>7}  {:.3e}  {verdict}", l.name, l.len, l.rel_error).unwrap();
        }
        writeln!(
            s,
            "{}: max relative error {:.3e} (tolerance {:.0e})",
            self.arch,
            self.max_rel_error(),
            self.tolerance
        )
        .unwrap();
        s
    }

    /// `Ok` when every layer passes, otherwise a numerical error naming the
    /// failing layers.
    pub fn into_result(self) -> Result<Self> {
        let bad: Vec<String> = self
            .failures()
            .map(|l| format!("{} ({:.3e})", l.name, l.rel_error))
            .collect();
        if bad.is_empty() {
            Ok(self)
        } else {
            Err(Error::Numerical(format!(
                "gradient check failed for {}: {}",
                self.arch,
                bad.join(", ")
            )))
        }
    }
}

/// Resolves `mlp`, `convnet-tiny` or a path to an architecture file.
pub fn resolve_spec(name: &str) -> Result<ArchSpec> {
    match name {
        "mlp" => Ok(ArchSpec::mlp(2, 3)),
        "convnet-tiny" => Ok(ArchSpec::convnet_tiny(3)),
        path => {
            let p = Path::new(path);
            if !p.exists() {
                return Err(Error::Parameter(format!(
                    "unknown gradcheck spec `{name}` (expected mlp, convnet-tiny or an architecture file)"
                )));
            }
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            ArchSpec::from_text(&text)
        }
    }
}

struct Problem {
    xl: Tensor,
    yl: Vec<usize>,
    xu: Tensor,
    yu: Vec<usize>,
    dropout: RngStream,
}

impl Problem {
    fn new(spec: &ArchSpec, batch: usize, rng: &mut RngStream) -> Result<Self> {
        let mut input = |n: usize| {
            let mut shape = vec![n];
            shape.extend_from_slice(&spec.input_shape);
            Tensor::from_fn(&shape, |_| rng.normal())
        };
        let xl = input(batch);
        let (xu, yu) = if spec.is_image() {
            expand_proxy_batch(&input(batch.div_ceil(3)))?
        } else {
            let xu = input(batch);
            (xu, Vec::new())
        };
        let tag = rng.next_u64();
        let mut labels = rng.split(tag);
        let yl = (0..batch).map(|_| labels.below(spec.num_classes)).collect();
        let yu = if yu.is_empty() {
            (0..xu.outer()).map(|_| labels.below(NUM_PROXY_CLASSES)).collect()
        } else {
            yu
        };
        Ok(Self {
            xl,
            yl,
            xu,
            yu,
            dropout: rng.split(tag ^ 1),
        })
    }

    /// Joint loss at the model's current parameters, with the graph and the
    /// bound parameter handles for a backward pass.
    fn loss(
        &self,
        model: &mut DualHeadModel,
    ) -> Result<(Graph, crate::tensor::Var, crate::models::Bound)> {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let mut drop = self.dropout.clone();
        let xl = g.constant(self.xl.clone());
        let z = model.forward(&mut g, &bound, xl, Branch::Supervised, &mut drop)?;
        let xu = g.constant(self.xu.clone());
        let zu = model.forward(&mut g, &bound, xu, Branch::SelfSupervised, &mut drop)?;
        let l = sesemi_loss(&mut g, z, &self.yl, zu, &self.yu, 1.0)?;
        Ok((g, l.total, bound))
    }
}

/// Checks every parameter gradient of `spec` against central differences.
pub fn run_gradcheck(spec: &ArchSpec, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if !(opts.step > 0.0) || opts.batch == 0 {
        return Err(Error::Parameter("gradcheck needs step > 0 and batch ≥ 1".into()));
    }
    let root = RngStream::new(opts.seed);
    let mut model = build_model(spec, &mut root.split(1))?;
    model.set_mode(NormMode::Train);
    // move biases and BN terms away from their symmetric initial values
    let mut jitter = root.split(2);
    for p in model.params_mut() {
        if !p.decay {
            p.value.data_mut().iter_mut().for_each(|v| *v += 0.1 * jitter.normal());
        }
    }
    let mut data_rng = root.split(3);
    let mut draws = 0;
    let (problem, (mut g, loss, bound)) = loop {
        let p = Problem::new(spec, opts.batch, &mut data_rng)?;
        let out = p.loss(&mut model)?;
        if out.0.activation_margin() >= KINK_MARGIN {
            break (p, out);
        }
        draws += 1;
        if draws == MAX_DRAWS {
            return Err(Error::Numerical(format!(
                "no probe batch with activation margin {KINK_MARGIN:e} after {MAX_DRAWS} draws"
            )));
        }
    };
    if let Some((name, factor)) = &opts.corrupt {
        let i = model
            .params()
            .iter()
            .position(|p| &p.name == name)
            .ok_or_else(|| Error::Parameter(format!("no parameter named `{name}`")))?;
        g.corrupt_gradient(bound.vars()[i], *factor);
    }
    let mut grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = bound
        .vars()
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();

    let h = opts.step;
    let mut layers = Vec::new();
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(a.len());
        for j in 0..a.len() {
            let orig = model.params()[i].value.data()[j];
            let mut at = |v: f64| -> Result<f64> {
                model.params_mut()[i].value.data_mut()[j] = v;
                let (g, l, _) = problem.loss(&mut model)?;
                Ok(g.value(l).item())
            };
            let plus = at(orig + h)?;
            let minus = at(orig - h)?;
            model.params_mut()[i].value.data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
        let diff = a
            .data()
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = na.max(nn);
        layers.push(LayerCheck {
            name: model.params()[i].name.clone(),
            len: a.len(),
            rel_error: if denom == 0.0 { 0.0 } else { diff / denom },
        });
    }
    Ok(GradcheckReport {
        arch: match spec.kind {
            ArchKind::Mlp { .. } => "mlp".into(),
            ArchKind::ConvNet { .. } => "convnet".into(),
        },
        tolerance: opts.tolerance,
        layers,
    })
}
