//! Synthetic 2-D datasets, the CIFAR-10 binary format, and labeled /
//! unlabeled split construction.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Inputs with class targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Vec<usize>, num_classes: usize) -> Result<Self> {
        if targets.is_empty() || inputs.outer() != targets.len() {
            return Err(Error::Dimension(format!(
                "{} targets for inputs of shape {:?}",
                targets.len(),
                inputs.shape()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= num_classes) {
            return Err(Error::Index(format!(
                "target {t} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            inputs,
            targets,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Shape of one example.
    pub fn example_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let inputs = self.inputs.gather_outer(indices)?;
        let targets = indices.iter().map(|&i| self.targets[i]).collect();
        Dataset::new(inputs, targets, self.num_classes)
    }

    /// The first `n` examples.
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &t in &self.targets {
            counts[t] += 1;
        }
        counts
    }

    pub fn with_inputs(&self, inputs: Tensor) -> Result<Self> {
        Dataset::new(inputs, self.targets.clone(), self.num_classes)
    }
}

fn linspace01(n: usize, j: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        j as f64 / (n - 1) as f64
    }
}

/// Horizontal offset of each moon's centre from the origin.
pub const MOON_HORIZONTAL_OFFSET: f64 = 0.5;
/// Vertical offset of the lower moon's centre.
pub const MOON_VERTICAL_OFFSET: f64 = 0.4;
/// Turns swept by each spiral arm.
pub const SPIRAL_TURNS: f64 = 1.5;
pub const DEFAULT_SYNTHETIC_NOISE: f64 = 0.1;

/// Two interleaving unit half-circles. Class 0 is the upper arc centred at
/// (−0.5, 0); class 1 the lower arc centred at (0.5, 0.4). Angles are evenly
/// spaced; the seed drives only the coordinate noise.
pub fn two_moons(n_per_class: usize, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::Parameter("two_moons needs n_per_class ≥ 1".into()));
    }
    let mut rng = RngStream::new(seed);
    let mut data = Vec::with_capacity(4 * n_per_class);
    let mut targets = Vec::with_capacity(2 * n_per_class);
    for class in 0..2 {
        for j in 0..n_per_class {
            let t = PI * linspace01(n_per_class, j);
            let (x, y) = if class == 0 {
                (t.cos() - MOON_HORIZONTAL_OFFSET, t.sin())
            } else {
                (MOON_HORIZONTAL_OFFSET - t.cos(), MOON_VERTICAL_OFFSET - t.sin())
            };
            data.push(x + noise_sigma * rng.normal());
            data.push(y + noise_sigma * rng.normal());
            targets.push(class);
        }
    }
    Dataset::new(Tensor::new(vec![2 * n_per_class, 2], data)?, targets, 2)
}

/// Three Archimedean arms at 120° phase offsets. Radius grows linearly
/// with angle from 0.1 to 1 over 1.5 turns.
pub fn three_spirals(n_per_class: usize, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::Parameter("three_spirals needs n_per_class ≥ 1".into()));
    }
    let mut rng = RngStream::new(seed);
    let mut data = Vec::with_capacity(6 * n_per_class);
    let mut targets = Vec::with_capacity(3 * n_per_class);
    for class in 0..3 {
        let phase = 2.0 * PI * class as f64 / 3.0;
        for j in 0..n_per_class {
            let s = linspace01(n_per_class, j);
            let theta = 2.0 * PI * SPIRAL_TURNS * s;
            let r = 0.1 + 0.9 * s;
            data.push(r * (theta + phase).cos() + noise_sigma * rng.normal());
            data.push(r * (theta + phase).sin() + noise_sigma * rng.normal());
            targets.push(class);
        }
    }
    Dataset::new(Tensor::new(vec![3 * n_per_class, 2], data)?, targets, 3)
}

/// Writes a 2-D point dataset as `x,y,label` CSV.
pub fn write_points_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    if dataset.example_shape() != [2] {
        return Err(Error::Contract(format!(
            "CSV export needs 2-D points, got example shape {:?}",
            dataset.example_shape()
        )));
    }
    let mut out = String::from("x,y,label\n");
    for (i, t) in dataset.targets.iter().enumerate() {
        let p = dataset.inputs.slice_outer(i);
        out.push_str(&format!("{},{},{}\n", p[0], p[1], t));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads an `x,y,label` CSV. `num_classes` is the largest label + 1 unless
/// given explicitly.
pub fn read_points_csv(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let mut offset = 0u64;
    match lines.next() {
        Some(h) if h.trim() == "x,y,label" => offset += h.len() as u64 + 1,
        _ => {
            return Err(Error::Format {
                offset: 0,
                message: "expected header `x,y,label`".into(),
            })
        }
    }
    let mut data = Vec::new();
    let mut targets = Vec::new();
    for line in lines {
        let bad = |what: &str| Error::Format {
            offset,
            message: format!("{what} in line `{line}`"),
        };
        if line.trim().is_empty() {
            offset += line.len() as u64 + 1;
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(bad("expected 3 fields"));
        }
        let x: f64 = fields[0].parse().map_err(|_| bad("bad x"))?;
        let y: f64 = fields[1].parse().map_err(|_| bad("bad y"))?;
        let t: usize = fields[2].parse().map_err(|_| bad("bad label"))?;
        data.extend([x, y]);
        targets.push(t);
        offset += line.len() as u64 + 1;
    }
    if targets.is_empty() {
        return Err(Error::Format {
            offset,
            message: "no data rows".into(),
        });
    }
    let c = num_classes.unwrap_or_else(|| targets.iter().max().map_or(1, |m| m + 1));
    Dataset::new(Tensor::new(vec![targets.len(), 2], data)?, targets, c)
}

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_PIXELS: usize = CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Parses CIFAR-10 binary records (label byte + R, G, B planes of 32×32
/// bytes). Pixels are scaled to [0, 1].
pub fn parse_cifar_records(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(Error::Format {
            offset: 0,
            message: "empty CIFAR batch".into(),
        });
    }
    let full = bytes.len() / CIFAR_RECORD;
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format {
            offset: (full * CIFAR_RECORD) as u64,
            message: format!(
                "truncated record: {} trailing bytes after {full} complete records",
                bytes.len() % CIFAR_RECORD
            ),
        });
    }
    let mut data = Vec::with_capacity(full * CIFAR_PIXELS);
    let mut targets = Vec::with_capacity(full);
    for (k, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format {
                offset: (k * CIFAR_RECORD) as u64,
                message: format!("label byte {label} outside [0, 10)"),
            });
        }
        targets.push(label);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(
        Tensor::new(vec![full, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE], data)?,
        targets,
        CIFAR_CLASSES,
    )
}

/// Inverse of [`parse_cifar_records`] for pixel values on the 1/255 grid.
pub fn serialize_cifar_records(dataset: &Dataset) -> Result<Vec<u8>> {
    if dataset.example_shape() != [CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE] {
        return Err(Error::Dimension(format!(
            "CIFAR records need 3×32×32 examples, got {:?}",
            dataset.example_shape()
        )));
    }
    let mut out = Vec::with_capacity(dataset.len() * CIFAR_RECORD);
    for (i, &t) in dataset.targets.iter().enumerate() {
        out.push(t as u8);
        out.extend(
            dataset
                .inputs
                .slice_outer(i)
                .iter()
                .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    Ok(out)
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let n: usize = parts.iter().map(Dataset::len).sum();
    let mut data = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut targets = Vec::with_capacity(n);
    for p in parts {
        targets.extend(p.targets);
        data.extend(p.inputs.into_data());
    }
    Dataset::new(
        Tensor::new(vec![n, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE], data)?,
        targets,
        CIFAR_CLASSES,
    )
}

fn read_cifar_file(path: &Path, limit: usize) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let annotate = |e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    };
    if bytes.len() % CIFAR_RECORD != 0 {
        return parse_cifar_records(&bytes).map_err(annotate);
    }
    let keep = bytes.len().min(limit.saturating_mul(CIFAR_RECORD));
    parse_cifar_records(&bytes[..keep]).map_err(annotate)
}

/// Loads the five training batches and the test batch from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    load_cifar10_subset(dir, None, None)
}

/// Loads the first `train_limit` training and `test_limit` test images,
/// reading only the batch files needed.
pub fn load_cifar10_subset(
    dir: &Path,
    train_limit: Option<usize>,
    test_limit: Option<usize>,
) -> Result<(Dataset, Dataset)> {
    if train_limit == Some(0) || test_limit == Some(0) {
        return Err(Error::Parameter("CIFAR subset sizes must be positive".into()));
    }
    let mut left = train_limit.unwrap_or(usize::MAX);
    let mut parts = Vec::new();
    for f in CIFAR_TRAIN_FILES {
        if left == 0 {
            break;
        }
        let part = read_cifar_file(&dir.join(f), left)?;
        left = left.saturating_sub(part.len());
        parts.push(part);
    }
    let test = read_cifar_file(&dir.join(CIFAR_TEST_FILE), test_limit.unwrap_or(usize::MAX))?;
    Ok((concat(parts)?, test))
}

/// Loads only the test batch from `dir`.
pub fn load_cifar10_test(dir: &Path) -> Result<Dataset> {
    read_cifar_file(&dir.join(CIFAR_TEST_FILE), usize::MAX)
}

pub fn write_cifar_file(dataset: &Dataset, path: &Path) -> Result<()> {
    let bytes = serialize_cifar_records(dataset)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Which data feed the self-supervised branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Labeled data only, no self-supervised branch.
    Supervised,
    /// Self-supervision on the labeled inputs (D_U = D_L).
    Asl,
    /// Self-supervision on the full training inputs.
    Ssl,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Supervised => "supervised",
            Mode::Asl => "asl",
            Mode::Ssl => "ssl",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Mode::Supervised),
            "asl" => Ok(Mode::Asl),
            "ssl" => Ok(Mode::Ssl),
            other => Err(Error::Parameter(format!(
                "unknown mode `{other}` (expected supervised, asl or ssl)"
            ))),
        }
    }
}

/// Labeled subset D_L, unlabeled pool D_U and the held-out test set.
#[derive(Clone, Debug)]
pub struct SplitDataset {
    pub mode: Mode,
    pub labeled: Dataset,
    /// Indices of the labeled examples in the training set.
    pub labeled_indices: Vec<usize>,
    /// `None` in supervised mode.
    pub unlabeled_inputs: Option<Tensor>,
    /// Size of the training set the split was drawn from.
    pub train_size: usize,
    pub test: Dataset,
}

/// Draws a class-balanced labeled subset of `train`. When `num_labeled` is
/// not a multiple of the class count the remainder goes one each to the
/// lowest-numbered classes.
pub fn make_split(
    train: &Dataset,
    test: Dataset,
    num_labeled: usize,
    mode: Mode,
    seed: u64,
) -> Result<SplitDataset> {
    let c = train.num_classes;
    if num_labeled < c {
        return Err(Error::Parameter(format!(
            "{num_labeled} labels cannot cover {c} classes"
        )));
    }
    if num_labeled > train.len() {
        return Err(Error::Parameter(format!(
            "{num_labeled} labels requested from {} examples",
            train.len()
        )));
    }
    let mut rng = RngStream::new(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &t) in train.targets.iter().enumerate() {
        by_class[t].push(i);
    }
    let mut labeled_indices = Vec::with_capacity(num_labeled);
    for (class, pool) in by_class.iter_mut().enumerate() {
        let want = num_labeled / c + usize::from(class < num_labeled % c);
        if pool.len() < want {
            return Err(Error::Parameter(format!(
                "class {class} has {} examples, {want} requested",
                pool.len()
            )));
        }
        rng.shuffle(pool);
        labeled_indices.extend_from_slice(&pool[..want]);
    }
    let labeled = train.subset(&labeled_indices)?;
    let unlabeled_inputs = match mode {
        Mode::Supervised => None,
        Mode::Asl => Some(labeled.inputs.clone()),
        Mode::Ssl => Some(train.inputs.clone()),
    };
    Ok(SplitDataset {
        mode,
        labeled,
        labeled_indices,
        unlabeled_inputs,
        train_size: train.len(),
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_rejects_bad_targets() {
        assert!(Dataset::new(Tensor::zeros(&[2, 2]), vec![0, 2], 2).is_err());
        assert!(Dataset::new(Tensor::zeros(&[2, 2]), vec![0], 2).is_err());
    }

    #[test]
    fn mode_parses() {
        assert_eq!("asl".parse::<Mode>().unwrap(), Mode::Asl);
        assert!("pi".parse::<Mode>().is_err());
        assert_eq!(Mode::Ssl.to_string(), "ssl");
    }

    #[test]
    fn label_out_of_range_cites_record_offset() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[CIFAR_RECORD] = 10;
        match parse_cifar_records(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("{other:?}"),
        }
    }
}
