//! The six-way geometric transform family used for proxy labels, the
//! stochastic input augmentations, and dataset-level preprocessing.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{kernels, Tensor};

/// Number of proxy classes.
pub const NUM_PROXY_CLASSES: usize = 6;

/// Geometric transform; the discriminant is the proxy label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum GeoTransform {
    Rot0 = 0,
    Rot90 = 1,
    Rot180 = 2,
    Rot270 = 3,
    HFlip = 4,
    VFlip = 5,
}

impl GeoTransform {
    pub const ALL: [GeoTransform; NUM_PROXY_CLASSES] = [
        GeoTransform::Rot0,
        GeoTransform::Rot90,
        GeoTransform::Rot180,
        GeoTransform::Rot270,
        GeoTransform::HFlip,
        GeoTransform::VFlip,
    ];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn from_label(label: usize) -> Result<Self> {
        Self::ALL
            .get(label)
            .copied()
            .ok_or_else(|| Error::Index(format!("proxy label {label} outside [0, 6)")))
    }

    pub fn is_rotation(self) -> bool {
        matches!(
            self,
            GeoTransform::Rot90 | GeoTransform::Rot180 | GeoTransform::Rot270
        )
    }

    /// Destination (row, col) of source pixel (r, c) in an h×w plane.
    /// Rotations are counter-clockwise.
    pub fn map_index(self, r: usize, c: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            GeoTransform::Rot0 => (r, c),
            GeoTransform::Rot90 => (w - 1 - c, r),
            GeoTransform::Rot180 => (h - 1 - r, w - 1 - c),
            GeoTransform::Rot270 => (c, h - 1 - r),
            GeoTransform::HFlip => (r, w - 1 - c),
            GeoTransform::VFlip => (h - 1 - r, c),
        }
    }

    /// The same transform acting on a 2-D point (x right, y up).
    pub fn apply_point(self, [x, y]: [f64; 2]) -> [f64; 2] {
        match self {
            GeoTransform::Rot0 => [x, y],
            GeoTransform::Rot90 => [-y, x],
            GeoTransform::Rot180 => [-x, -y],
            GeoTransform::Rot270 => [y, -x],
            GeoTransform::HFlip => [-x, y],
            GeoTransform::VFlip => [x, -y],
        }
    }
}

/// Applies `t` to one C×H×W image given as a flat slice.
pub fn apply_geo_slice(
    image: &[f64],
    [c, h, w]: [usize; 3],
    t: GeoTransform,
) -> Result<Vec<f64>> {
    if t.is_rotation() && h != w {
        return Err(Error::Dimension(format!(
            "rotation of non-square {h}×{w} image"
        )));
    }
    let mut out = vec![0.0; image.len()];
    for ch in 0..c {
        let plane = &image[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for r in 0..h {
            for col in 0..w {
                let (r2, c2) = t.map_index(r, col, h, w);
                dst[r2 * w + c2] = plane[r * w + col];
            }
        }
    }
    Ok(out)
}

/// Applies `t` to a C×H×W image tensor.
pub fn apply_geo(image: &Tensor, t: GeoTransform) -> Result<Tensor> {
    let dims: [usize; 3] = match image.shape() {
        &[c, h, w] => [c, h, w],
        s => {
            return Err(Error::Dimension(format!(
                "expected C×H×W image, got shape {s:?}"
            )))
        }
    };
    Tensor::new(image.shape().to_vec(), apply_geo_slice(image.data(), dims, t)?)
}

/// Expands a B×C×H×W batch to 6B images, image-major: slot `6i + k` holds
/// image `i` under transform `k`, and its label is `k`.
pub fn expand_proxy_batch(images: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [b, c, h, w] = images.dims4()?;
    let mut data = Vec::with_capacity(images.len() * NUM_PROXY_CLASSES);
    let mut labels = Vec::with_capacity(b * NUM_PROXY_CLASSES);
    for i in 0..b {
        let img = images.slice_outer(i);
        for t in GeoTransform::ALL {
            data.extend(apply_geo_slice(img, [c, h, w], t)?);
            labels.push(t.label());
        }
    }
    Ok((Tensor::new(vec![b * NUM_PROXY_CLASSES, c, h, w], data)?, labels))
}

/// Stochastic input augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub max_translate: usize,
    pub hflip_enabled: bool,
    pub noise_sigma: f64,
}

impl AugmentPolicy {
    pub const NONE: AugmentPolicy = AugmentPolicy {
        max_translate: 0,
        hflip_enabled: false,
        noise_sigma: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Parameter(format!(
                "noise sigma {} must be finite and non-negative",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    /// The policy for the self-supervised branch: horizontal flips would
    /// alias a proxy class, so they are always off.
    pub fn for_self_supervised(self) -> Self {
        Self {
            hflip_enabled: false,
            ..self
        }
    }
}

/// Augments one C×H×W image: integer translation with zero fill, then an
/// optional horizontal flip, then additive Gaussian noise.
pub fn augment_slice(
    image: &[f64],
    [c, h, w]: [usize; 3],
    policy: &AugmentPolicy,
    rng: &mut RngStream,
) -> Vec<f64> {
    let m = policy.max_translate as i64;
    let mut out = if m > 0 {
        let dx = rng.int_inclusive(-m, m);
        let dy = rng.int_inclusive(-m, m);
        let mut shifted = vec![0.0; image.len()];
        for ch in 0..c {
            for r in 0..h {
                let sr = r as i64 - dy;
                if sr < 0 || sr >= h as i64 {
                    continue;
                }
                for col in 0..w {
                    let sc = col as i64 - dx;
                    if sc >= 0 && sc < w as i64 {
                        shifted[(ch * h + r) * w + col] =
                            image[(ch * h + sr as usize) * w + sc as usize];
                    }
                }
            }
        }
        shifted
    } else {
        image.to_vec()
    };
    if policy.hflip_enabled && rng.bernoulli(0.5) {
        for row in out.chunks_mut(w) {
            row.reverse();
        }
    }
    if policy.noise_sigma > 0.0 {
        for v in out.iter_mut() {
            *v += policy.noise_sigma * rng.normal();
        }
    }
    out
}

pub fn augment(image: &Tensor, policy: &AugmentPolicy, rng: &mut RngStream) -> Result<Tensor> {
    policy.validate()?;
    let dims: [usize; 3] = match image.shape() {
        &[c, h, w] => [c, h, w],
        s => {
            return Err(Error::Dimension(format!(
                "expected C×H×W image, got shape {s:?}"
            )))
        }
    };
    Tensor::new(image.shape().to_vec(), augment_slice(image.data(), dims, policy, rng))
}

/// Augments every image of a B×C×H×W batch in order from one stream.
pub fn augment_batch(batch: &Tensor, policy: &AugmentPolicy, rng: &mut RngStream) -> Result<Tensor> {
    policy.validate()?;
    let [b, c, h, w] = batch.dims4()?;
    let mut data = Vec::with_capacity(batch.len());
    for i in 0..b {
        data.extend(augment_slice(batch.slice_outer(i), [c, h, w], policy, rng));
    }
    Tensor::new(batch.shape().to_vec(), data)
}

/// Adds Gaussian coordinate noise to a B×2 batch of points. Translation and
/// flips have no meaning for points and are ignored.
pub fn augment_points(points: &Tensor, policy: &AugmentPolicy, rng: &mut RngStream) -> Result<Tensor> {
    policy.validate()?;
    let mut out = points.clone();
    if policy.noise_sigma > 0.0 {
        for v in out.data_mut() {
            *v += policy.noise_sigma * rng.normal();
        }
    }
    Ok(out)
}

const GCN_NORM_FLOOR: f64 = 1e-8;

/// Global contrast normalization: each example (leading-axis slice) is
/// centred on its own mean and scaled to unit L2 norm.
pub fn gcn(dataset: &Tensor) -> Tensor {
    let d = dataset.inner_len();
    let mut out = dataset.clone();
    for row in out.data_mut().chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        row.iter_mut().for_each(|v| *v -= mean);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = 1.0 / norm.max(GCN_NORM_FLOOR);
        row.iter_mut().for_each(|v| *v *= scale);
    }
    out
}

pub const DEFAULT_ZCA_EPSILON: f64 = 1e-2;

/// Fitted ZCA whitening map `x ↦ (x − mean) · W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ZcaState {
    pub mean: Vec<f64>,
    /// d×d, row-major, symmetric.
    pub whitening: Vec<f64>,
    pub epsilon: f64,
}

impl ZcaState {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Fits on the rows of an N×… tensor (each leading-axis slice is one
    /// d-vector). The covariance is the biased (1/N) estimate.
    pub fn fit(dataset: &Tensor, epsilon: f64) -> Result<Self> {
        let n = dataset.outer();
        let d = dataset.inner_len();
        if n < 2 {
            return Err(Error::Parameter(format!("ZCA fit needs N ≥ 2, got {n}")));
        }
        if !(epsilon >= 0.0) {
            return Err(Error::Parameter(format!("ZCA epsilon {epsilon} is negative")));
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(dataset.slice_outer(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);

        let mut centred = dataset.data().to_vec();
        for row in centred.chunks_mut(d) {
            for (v, m) in row.iter_mut().zip(&mean) {
                *v -= m;
            }
        }
        let xt = kernels::transpose(n, d, &centred);
        let mut cov = vec![0.0; d * d];
        kernels::gemm(d, n, d, &xt, &centred, &mut cov);
        cov.iter_mut().for_each(|v| *v /= n as f64);

        let cov = DMatrix::from_row_slice(d, d, &cov);
        let max_iter = 1000 * d.max(1);
        let eig = SymmetricEigen::try_new(cov, 1e-14, max_iter).ok_or_else(|| {
            Error::Numerical(format!(
                "symmetric eigensolver did not converge on {d}×{d} covariance within {max_iter} iterations"
            ))
        })?;
        let scales: Vec<f64> = eig
            .eigenvalues
            .iter()
            .map(|&l| 1.0 / (l.max(0.0) + epsilon).sqrt())
            .collect();
        if let Some(bad) = scales.iter().find(|s| !s.is_finite()) {
            return Err(Error::Numerical(format!(
                "ZCA scale {bad} is not finite; eigenvalues {:?}, epsilon {epsilon}",
                eig.eigenvalues.iter().take(8).collect::<Vec<_>>()
            )));
        }
        let e = &eig.eigenvectors;
        let mut scaled = e.clone();
        for (j, s) in scales.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*s);
        }
        let w = &scaled * e.transpose();
        let mut whitening = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                whitening[i * d + j] = 0.5 * (w[(i, j)] + w[(j, i)]);
            }
        }
        Ok(Self {
            mean,
            whitening,
            epsilon,
        })
    }

    /// Whitens every leading-axis slice of `x`; the output has `x`'s shape.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.dim();
        if x.inner_len() != d {
            return Err(Error::Dimension(format!(
                "ZCA fitted on dimension {d} applied to shape {:?}",
                x.shape()
            )));
        }
        let n = x.outer();
        let mut centred = x.data().to_vec();
        for row in centred.chunks_mut(d) {
            for (v, m) in row.iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        let mut out = vec![0.0; n * d];
        kernels::gemm(n, d, d, &centred, &self.whitening, &mut out);
        Tensor::new(x.shape().to_vec(), out)
    }
}

/// Input pipeline fitted on training data: optional GCN, then optional
/// ZCA. GCN output is rescaled by √d so pixels have unit RMS before
/// whitening.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Preprocessing {
    pub gcn: bool,
    pub zca: Option<ZcaState>,
}

impl Preprocessing {
    pub fn fit(train: &Tensor, gcn: bool, zca_epsilon: Option<f64>) -> Result<Self> {
        let mut p = Self { gcn, zca: None };
        if let Some(eps) = zca_epsilon {
            let x = p.apply(train)?;
            p.zca = Some(ZcaState::fit(&x, eps)?);
        }
        Ok(p)
    }

    pub fn is_identity(&self) -> bool {
        !self.gcn && self.zca.is_none()
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = if self.gcn {
            let scale = (x.inner_len() as f64).sqrt();
            gcn(x).map(|v| v * scale)
        } else {
            x.clone()
        };
        if let Some(z) = &self.zca {
            out = z.apply(&out)?;
        }
        Ok(out)
    }
}
