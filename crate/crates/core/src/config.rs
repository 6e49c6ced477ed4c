//! Experiment configuration in a line-oriented `key = value` format.
//!
//! Blank lines and `#` comments are ignored. Keys not listed in
//! [`ExperimentConfig::KEYS`] are rejected with their line number. Keys that
//! are absent take the defaults of the selected dataset.

use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use crate::datasets::DEFAULT_SYNTHETIC_NOISE;
use crate::error::{Error, Result};
use crate::models::ArchSpec;
use crate::training::TrainConfig;
use crate::transforms::{AugmentPolicy, DEFAULT_ZCA_EPSILON};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    TwoMoons,
    ThreeSpirals,
    Cifar10,
}

impl DatasetKind {
    pub fn is_synthetic(self) -> bool {
        !matches!(self, DatasetKind::Cifar10)
    }

    pub fn num_classes(self) -> usize {
        match self {
            DatasetKind::TwoMoons => 2,
            DatasetKind::ThreeSpirals => 3,
            DatasetKind::Cifar10 => 10,
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::TwoMoons => "two_moons",
            DatasetKind::ThreeSpirals => "three_spirals",
            DatasetKind::Cifar10 => "cifar10",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_moons" => Ok(DatasetKind::TwoMoons),
            "three_spirals" => Ok(DatasetKind::ThreeSpirals),
            "cifar10" => Ok(DatasetKind::Cifar10),
            other => Err(Error::Parameter(format!(
                "unknown dataset `{other}` (expected two_moons, three_spirals or cifar10)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArchSelector {
    Mlp,
    ConvNet,
    ConvNetTiny,
}

impl ArchSelector {
    pub fn build(self, input_shape: &[usize], num_classes: usize, dropout: f64) -> Result<ArchSpec> {
        let mut spec = match (self, input_shape) {
            (ArchSelector::Mlp, &[d]) => ArchSpec::mlp(d, num_classes),
            (ArchSelector::ConvNet, &[c, h, w]) => ArchSpec::convnet([c, h, w], num_classes),
            (ArchSelector::ConvNetTiny, &[3, 8, 8]) => ArchSpec::convnet_tiny(num_classes),
            (sel, shape) => {
                return Err(Error::Parameter(format!(
                    "architecture `{sel}` does not accept inputs of shape {shape:?}"
                )))
            }
        };
        spec.dropout = dropout;
        spec.feature_shape()?;
        Ok(spec)
    }
}

impl fmt::Display for ArchSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchSelector::Mlp => "mlp",
            ArchSelector::ConvNet => "convnet",
            ArchSelector::ConvNetTiny => "convnet-tiny",
        })
    }
}

impl FromStr for ArchSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ArchSelector::Mlp),
            "convnet" => Ok(ArchSelector::ConvNet),
            "convnet-tiny" => Ok(ArchSelector::ConvNetTiny),
            other => Err(Error::Parameter(format!(
                "unknown architecture `{other}` (expected mlp, convnet or convnet-tiny)"
            ))),
        }
    }
}

/// A complete description of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    /// Directory of CIFAR-10 binary batches.
    pub data_path: Option<PathBuf>,
    /// Synthetic datasets: examples per class and coordinate noise.
    pub n_per_class: usize,
    pub noise: f64,
    /// Use only the first N training / test examples (CIFAR subsets).
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    pub num_labeled: usize,
    pub arch: ArchSelector,
    pub dropout: f64,
    pub gcn: bool,
    pub zca: bool,
    pub zca_epsilon: f64,
    pub train: TrainConfig,
    pub grid_resolution: usize,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub const KEYS: [&'static str; 27] = [
        "dataset",
        "data_path",
        "n_per_class",
        "noise",
        "train_subset",
        "test_subset",
        "num_labeled",
        "arch",
        "dropout",
        "gcn",
        "zca",
        "zca_epsilon",
        "mode",
        "batch_size",
        "w",
        "base_lr",
        "momentum",
        "weight_decay",
        "lr_power",
        "epochs",
        "steps",
        "augment_translate",
        "augment_hflip",
        "augment_noise",
        "seed",
        "grid_resolution",
        "output_dir",
    ];

    /// Defaults for a dataset: 5 labels per class, an MLP and no augmentation on
    /// the synthetic sets (60 epochs); 4000 labels, the ConvNet and 50 epochs on CIFAR-10.
    pub fn defaults(dataset: DatasetKind) -> Self {
        let synthetic = dataset.is_synthetic();
        let train = TrainConfig {
            epochs: if synthetic { 60 } else { 50 },
            augment: if synthetic {
                AugmentPolicy::NONE
            } else {
                AugmentPolicy {
                    max_translate: 2,
                    hflip_enabled: true,
                    noise_sigma: 0.15,
                }
            },
            ..TrainConfig::default()
        };
        Self {
            dataset,
            data_path: None,
            n_per_class: 500,
            noise: DEFAULT_SYNTHETIC_NOISE,
            train_subset: None,
            test_subset: None,
            num_labeled: if synthetic {
                5 * dataset.num_classes()
            } else {
                4000
            },
            arch: if synthetic {
                ArchSelector::Mlp
            } else {
                ArchSelector::ConvNet
            },
            dropout: if synthetic { 0.0 } else { 0.5 },
            gcn: !synthetic,
            zca: !synthetic,
            zca_epsilon: DEFAULT_ZCA_EPSILON,
            train,
            grid_resolution: 100,
            output_dir: PathBuf::from("runs").join(dataset.to_string()),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, &str, &str)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: line_no,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !Self::KEYS.contains(&k) {
                return Err(Error::Config {
                    line: line_no,
                    message: format!("unknown key `{k}`"),
                });
            }
            if let Some((prev, _, _)) = entries.iter().find(|(_, pk, _)| *pk == k) {
                return Err(Error::Config {
                    line: line_no,
                    message: format!("duplicate key `{k}` (first set on line {prev})"),
                });
            }
            entries.push((line_no, k, v));
        }

        let dataset = match entries.iter().find(|(_, k, _)| *k == "dataset") {
            Some(&(line, _, v)) => v.parse().map_err(|e: Error| Error::Config {
                line,
                message: e.to_string(),
            })?,
            None => {
                return Err(Error::Config {
                    line: 0,
                    message: "missing required key `dataset`".into(),
                })
            }
        };
        let mut cfg = Self::defaults(dataset);
        for &(line, k, v) in &entries {
            cfg.set(k, v).map_err(|message| Error::Config {
                line,
                message: format!("key `{k}`: {message}"),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("cannot parse `{v}`"))
        }
        fn flag(v: &str) -> std::result::Result<bool, String> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(format!("expected true or false, got `{v}`")),
            }
        }
        fn opt<T: FromStr>(v: &str) -> std::result::Result<Option<T>, String> {
            if v == "none" {
                Ok(None)
            } else {
                num(v).map(Some)
            }
        }
        let t = &mut self.train;
        match key {
            "dataset" => {}
            "data_path" => self.data_path = (v != "none").then(|| PathBuf::from(v)),
            "n_per_class" => self.n_per_class = num(v)?,
            "noise" => self.noise = num(v)?,
            "train_subset" => self.train_subset = opt(v)?,
            "test_subset" => self.test_subset = opt(v)?,
            "num_labeled" => self.num_labeled = num(v)?,
            "arch" => self.arch = v.parse().map_err(|e: Error| e.to_string())?,
            "dropout" => self.dropout = num(v)?,
            "gcn" => self.gcn = flag(v)?,
            "zca" => self.zca = flag(v)?,
            "zca_epsilon" => self.zca_epsilon = num(v)?,
            "mode" => t.mode = v.parse().map_err(|e: Error| e.to_string())?,
            "batch_size" => t.batch_size = num(v)?,
            "w" => t.w = num(v)?,
            "base_lr" => t.base_lr = num(v)?,
            "momentum" => t.momentum = num(v)?,
            "weight_decay" => t.weight_decay = num(v)?,
            "lr_power" => t.lr_power = num(v)?,
            "epochs" => t.epochs = num(v)?,
            "steps" => t.steps = opt(v)?,
            "augment_translate" => t.augment.max_translate = num(v)?,
            "augment_hflip" => t.augment.hflip_enabled = flag(v)?,
            "augment_noise" => t.augment.noise_sigma = num(v)?,
            "seed" => t.seed = num(v)?,
            "grid_resolution" => self.grid_resolution = num(v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Parameter(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.dataset == DatasetKind::Cifar10 && self.data_path.is_none() {
            return Err(Error::Parameter("cifar10 requires `data_path`".into()));
        }
        if self.n_per_class == 0 || self.grid_resolution == 0 {
            return Err(Error::Parameter(
                "n_per_class and grid_resolution must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Canonical text form; `parse(serialize(c)) == c`.
    pub fn serialize(&self) -> String {
        let t = &self.train;
        let opt = |o: Option<usize>| o.map_or("none".to_string(), |v| v.to_string());
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("dataset", self.dataset.to_string());
        kv(
            "data_path",
            self.data_path
                .as_ref()
                .map_or("none".into(), |p| p.display().to_string()),
        );
        kv("n_per_class", self.n_per_class.to_string());
        kv("noise", self.noise.to_string());
        kv("train_subset", opt(self.train_subset));
        kv("test_subset", opt(self.test_subset));
        kv("num_labeled", self.num_labeled.to_string());
        kv("arch", self.arch.to_string());
        kv("dropout", self.dropout.to_string());
        kv("gcn", self.gcn.to_string());
        kv("zca", self.zca.to_string());
        kv("zca_epsilon", self.zca_epsilon.to_string());
        kv("mode", t.mode.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("w", t.w.to_string());
        kv("base_lr", t.base_lr.to_string());
        kv("momentum", t.momentum.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("lr_power", t.lr_power.to_string());
        kv("epochs", t.epochs.to_string());
        kv("steps", opt(t.steps));
        kv("augment_translate", t.augment.max_translate.to_string());
        kv("augment_hflip", t.augment.hflip_enabled.to_string());
        kv("augment_noise", t.augment.noise_sigma.to_string());
        kv("seed", t.seed.to_string());
        kv("grid_resolution", self.grid_resolution.to_string());
        kv("output_dir", self.output_dir.display().to_string());
        s
    }
}
