//! Dense tensors and the reverse-mode autodiff graph built on them.

mod graph;
pub(crate) mod kernels;

pub use graph::{ActivationKind, BatchNormState, Gradients, Graph, NormMode, Var};

use crate::error::{Error, Result};

/// Dense row-major n-dimensional array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// 2-D tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn dims2(&self) -> Result<[usize; 2]> {
        match self.shape[..] {
            [a, b] => Ok([a, b]),
            _ => Err(Error::Dimension(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [a, b, c, d] => Ok([a, b, c, d]),
            _ => Err(Error::Dimension(format!(
                "expected rank-4 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Number of leading-axis entries (examples, for a batch).
    pub fn outer(&self) -> usize {
        self.shape[0]
    }

    /// Size of one leading-axis slice.
    pub fn inner_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn slice_outer(&self, i: usize) -> &[f64] {
        let n = self.inner_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Gathers leading-axis slices in the given order.
    pub fn gather_outer(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Dimension("gather of zero rows".into()));
        }
        let n = self.inner_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.outer() {
                return Err(Error::Index(format!(
                    "row {i} out of range for {} rows",
                    self.outer()
                )));
            }
            data.extend_from_slice(self.slice_outer(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self { shape, data })
    }

    /// Stacks equally-shaped slices along a new leading axis.
    pub fn stack(inner_shape: &[usize], slices: &[Vec<f64>]) -> Result<Self> {
        let mut shape = vec![slices.len()];
        shape.extend_from_slice(inner_shape);
        let data: Vec<f64> = slices.iter().flat_map(|s| s.iter().copied()).collect();
        Tensor::new(shape, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Plain matrix product without graph recording.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let [m, k] = self.dims2()?;
        let [k2, n] = other.dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul of {:?} by {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, &self.data, &other.data, &mut out);
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let [m, n] = self.dims2()?;
        Tensor::new(vec![n, m], kernels::transpose(m, n, &self.data))
    }

    /// Row-wise argmax of a 2-D tensor; first index wins on ties.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let [m, n] = self.dims2()?;
        Ok((0..m)
            .map(|i| kernels::argmax(&self.data[i * n..(i + 1) * n]))
            .collect())
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let [m, n] = self.dims2()?;
        let mut out = self.data.clone();
        for row in out.chunks_mut(n) {
            kernels::softmax_in_place(row);
        }
        Tensor::new(vec![m, n], out)
    }
}
