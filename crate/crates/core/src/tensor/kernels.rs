//! Raw numeric kernels on flat row-major buffers. Callers validate shapes.

use rayon::prelude::*;

const PAR_MIN_WORK: usize = 1 << 22;

/// `c = a · b` with `a` m×k, `b` k×n.
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let row = |(i, crow): (usize, &mut [f64])| {
        crow.fill(0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    };
    if m * k * n >= PAR_MIN_WORK && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c = a · bᵀ` with `a` m×k, `b` n×k.
pub fn gemm_abt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
}

pub fn transpose(m: usize, n: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one C×H×W image into a (C·kh·kw) × (H'·W') patch matrix.
pub fn im2col(g: &ConvGeom, img: &[f64]) -> Vec<f64> {
    let cols = g.col_cols();
    let mut out = vec![0.0; g.col_rows() * cols];
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut out[r * cols..(r + 1) * cols];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    let src = &img[(c * g.height + ii as usize) * g.width..];
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.width as isize {
                            dst[oi * g.out_w + oj] = src[jj as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters-adds a patch matrix back onto an image.
pub fn col2im(g: &ConvGeom, col: &[f64], img: &mut [f64]) {
    let cols = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let src = &col[r * cols..(r + 1) * cols];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    let base = (c * g.height + ii as usize) * g.width;
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.width as isize {
                            img[base + jj as usize] += src[oi * g.out_w + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution over a batch; returns B×F×H'×W'.
pub fn conv_forward(
    g: &ConvGeom,
    batch: usize,
    filters: usize,
    x: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let in_len = g.channels * g.height * g.width;
    let out_len = filters * g.col_cols();
    let mut out = vec![0.0; batch * out_len];
    out.par_chunks_mut(out_len)
        .enumerate()
        .for_each(|(b, y)| {
            let col = im2col(g, &x[b * in_len..(b + 1) * in_len]);
            gemm(filters, g.col_rows(), g.col_cols(), kernel, &col, y);
            if let Some(bias) = bias {
                for (f, plane) in y.chunks_mut(g.col_cols()).enumerate() {
                    plane.iter_mut().for_each(|v| *v += bias[f]);
                }
            }
        });
    out
}

/// Backward convolution. Returns (dx if requested, dkernel, dbias).
pub fn conv_backward(
    g: &ConvGeom,
    batch: usize,
    filters: usize,
    x: &[f64],
    kernel: &[f64],
    dy: &[f64],
    want_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let in_len = g.channels * g.height * g.width;
    let out_len = filters * g.col_cols();
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let kernel_t = if want_dx {
        transpose(filters, rows, kernel)
    } else {
        Vec::new()
    };
    let per_sample: Vec<(Vec<f64>, Option<Vec<f64>>)> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let col = im2col(g, &x[b * in_len..(b + 1) * in_len]);
            let dyb = &dy[b * out_len..(b + 1) * out_len];
            let mut dk = vec![0.0; filters * rows];
            gemm_abt(filters, cols, rows, dyb, &col, &mut dk);
            let dx = want_dx.then(|| {
                let mut dcol = vec![0.0; rows * cols];
                gemm(rows, filters, cols, &kernel_t, dyb, &mut dcol);
                let mut dx = vec![0.0; in_len];
                col2im(g, &dcol, &mut dx);
                dx
            });
            (dk, dx)
        })
        .collect();

    let mut dkernel = vec![0.0; filters * rows];
    let mut dx_all = want_dx.then(|| Vec::with_capacity(batch * in_len));
    for (dk, dx) in per_sample {
        for (a, b) in dkernel.iter_mut().zip(&dk) {
            *a += b;
        }
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
    }
    let mut dbias = vec![0.0; filters];
    for b in 0..batch {
        for (f, plane) in dy[b * out_len..(b + 1) * out_len].chunks(cols).enumerate() {
            dbias[f] += plane.iter().sum::<f64>();
        }
    }
    (dx_all, dkernel, dbias)
}

/// Max pooling over each B×C plane. Returns (output, flat argmax per output).
pub fn maxpool_forward(
    planes: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
    x: &[f64],
) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = base + oi * stride * w + oj * stride;
                for di in 0..window {
                    for dj in 0..window {
                        let idx = base + (oi * stride + di) * w + oj * stride + dj;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg, oh, ow)
}
