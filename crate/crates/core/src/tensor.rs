//! Dense row-major `f32` tensors and the handful of kernels the tracker needs.
//!
//! Reductions (matrix products, softmax, layer norm) accumulate in `f64` and
//! round once on output, so results are reproducible across platforms.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Dense row-major array of `f32`.
///
/// Immutable after construction; cloning shares the buffer. A leading extent
/// of zero is allowed so an empty token sequence can be represented.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f32]>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: impl Into<Arc<[f32]>>) -> Result<Self> {
        let shape = shape.into();
        let data = data.into();
        if shape.is_empty() {
            return Err(Error::Dimension("tensor shape must have at least one axis".into()));
        }
        if shape[1..].iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "only the leading extent may be zero, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Tensor::new(shape, vec![value; len]).expect("full: valid shape")
    }

    /// Builds a tensor from a function of the flat index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> f32) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        let data: Vec<f32> = (0..len).map(f).collect();
        Tensor::new(shape, data).expect("from_fn: valid shape")
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data.to_vec()
    }

    /// `(rows, cols)` of a matrix, or a dimension error for any other rank.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Dimension(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let width = self.data.len() / self.shape[0].max(1);
        &self.data[i * width..(i + 1) * width]
    }

    pub fn get(&self, index: &[usize]) -> f32 {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let flat = index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
                acc * d + i
            });
        self.data[flat]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "elementwise op on {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, s: f32) -> Self {
        self.map(|v| v * s)
    }

    /// Adds `bias` (length = column count) to every row.
    pub fn add_row_vector(&self, bias: &Tensor) -> Result<Self> {
        let (rows, cols) = self.dims2()?;
        if bias.len() != cols || bias.shape().len() != 1 {
            return Err(Error::Dimension(format!(
                "row bias {:?} does not fit matrix {:?}",
                bias.shape(),
                self.shape
            )));
        }
        let b = bias.data();
        let data: Vec<f32> = (0..rows * cols).map(|i| self.data[i] + b[i % cols]).collect();
        Tensor::new([rows, cols], data)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let d = &self.data;
        Ok(Tensor::from_fn([c, r], |i| d[(i % r) * c + i / r]))
    }

    /// Stacks two matrices with equal column counts vertically.
    pub fn concat_rows(&self, other: &Tensor) -> Result<Self> {
        let (ra, ca) = self.dims2()?;
        let (rb, cb) = other.dims2()?;
        if ca != cb {
            return Err(Error::Dimension(format!(
                "cannot stack {:?} on {:?}: column counts differ",
                other.shape, self.shape
            )));
        }
        let mut data = Vec::with_capacity((ra + rb) * ca);
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor::new([ra + rb, ca], data)
    }

    pub fn slice_rows(&self, rows: Range<usize>) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if rows.start > rows.end || rows.end > r {
            return Err(Error::Range(format!("row range {rows:?} outside 0..{r}")));
        }
        Tensor::new(
            [rows.len(), c],
            &self.data[rows.start * c..rows.end * c],
        )
    }

    /// Copies columns `cols` of a matrix.
    pub fn slice_cols(&self, cols: Range<usize>) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if cols.start > cols.end || cols.end > c {
            return Err(Error::Range(format!("column range {cols:?} outside 0..{c}")));
        }
        let w = cols.len();
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + cols.start..i * c + cols.end]);
        }
        Tensor::new([r, w], data)
    }

    /// Largest absolute elementwise difference; infinite on a shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        if self.shape != other.shape {
            return f32::INFINITY;
        }
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Multiply-accumulate tally for matrix products.
///
/// Only matrix products are counted; elementwise work, softmax and
/// normalization are not. Not meant to be shared between threads: give each
/// worker its own counter and sum the totals.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MacCounter {
    pub enabled: bool,
    total: u64,
}

impl MacCounter {
    pub fn enabled() -> Self {
        MacCounter {
            enabled: true,
            total: 0,
        }
    }

    pub fn disabled() -> Self {
        MacCounter::default()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn record(&mut self, macs: u64) {
        if self.enabled {
            self.total += macs;
        }
    }

    /// Folds another worker's tally into this one.
    pub fn merge(&mut self, other: &MacCounter) {
        self.total += other.total;
    }
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Row-major `m×k` times `k×n` in `f64`. `b_transposed` reads `b` as `n×k`.
fn gemm_f64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, b_transposed: bool) -> Vec<f64> {
    let mut c = vec![0.0f64; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let (rsb, csb) = if b_transposed {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the slices hold m*k, k*n and m*n elements and the strides
    // describe row-major layouts inside them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// Matrix product `a · b`. Adds `m·k·n` to `counter`.
pub fn matmul(a: &Tensor, b: &Tensor, counter: &mut MacCounter) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let c = gemm_f64(&to_f64(a), &to_f64(b), m, k, n, false);
    counter.record((m * k * n) as u64);
    Tensor::new([m, n], c.into_iter().map(|v| v as f32).collect::<Vec<_>>())
}

/// Matrix product `a · bᵀ` without materializing the transpose.
pub fn matmul_transposed(a: &Tensor, b: &Tensor, counter: &mut MacCounter) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner extents differ: {:?} x {:?}ᵀ",
            a.shape(),
            b.shape()
        )));
    }
    let c = gemm_f64(&to_f64(a), &to_f64(b), m, k, n, true);
    counter.record((m * k * n) as u64);
    Tensor::new([m, n], c.into_iter().map(|v| v as f32).collect::<Vec<_>>())
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (rows, cols) = logits.dims2()?;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = logits.row(r);
        if row.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric(format!("NaN in softmax row {r}")));
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| (e / sum) as f32));
    }
    Tensor::new([rows, cols], out)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row normalization to zero mean and unit variance, then `gamma·x + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (rows, cols) = x.dims2()?;
    if gamma.len() != cols || beta.len() != cols {
        return Err(Error::Dimension(format!(
            "layer norm over {cols} channels got gamma {:?}, beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let (g, b) = (gamma.data(), beta.data());
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
        let var = row
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        out.extend(
            row.iter()
                .enumerate()
                .map(|(c, &v)| ((v as f64 - mean) * inv * g[c] as f64 + b[c] as f64) as f32),
        );
    }
    Tensor::new([rows, cols], out)
}

/// Exact GELU, `x·Φ(x)` with `Φ` from `erf`.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| {
        let v = v as f64;
        (0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))) as f32
    })
}

/// Splits a `3×H×W` image into non-overlapping `P×P` patches.
///
/// Row `i` is the `i`-th patch in raster order, flattened channel-major
/// (`c·P² + dy·P + dx`).
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (ch, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        s => {
            return Err(Error::Dimension(format!(
                "patchify expects a C×H×W image, got {s:?}"
            )))
        }
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Dimension(format!(
            "image {h}×{w} is not divisible into {patch}×{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let width = ch * patch * patch;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * width);
    for py in 0..gh {
        for px in 0..gw {
            for c in 0..ch {
                for dy in 0..patch {
                    let start = c * h * w + (py * patch + dy) * w + px * patch;
                    out.extend_from_slice(&src[start..start + patch]);
                }
            }
        }
    }
    Tensor::new([gh * gw, width], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, channels: usize, height: usize, width: usize, patch: usize) -> Result<Tensor> {
    let (n, len) = patches.dims2()?;
    if patch == 0
        || height % patch != 0
        || width % patch != 0
        || n != (height / patch) * (width / patch)
        || len != channels * patch * patch
    {
        return Err(Error::Dimension(format!(
            "patches {:?} do not tile a {channels}×{height}×{width} image with P={patch}",
            patches.shape()
        )));
    }
    let gw = width / patch;
    let mut out = vec![0.0f32; channels * height * width];
    for (i, row) in patches.data().chunks(len).enumerate() {
        let (py, px) = (i / gw, i % gw);
        for c in 0..channels {
            for dy in 0..patch {
                let dst = c * height * width + (py * patch + dy) * width + px * patch;
                let src = c * patch * patch + dy * patch;
                out[dst..dst + patch].copy_from_slice(&row[src..src + patch]);
            }
        }
    }
    Tensor::new([channels, height, width], out)
}
