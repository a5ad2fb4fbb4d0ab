//! Dense row-major tensors and the numeric primitives the layers build on.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;

/// Scalar element type. `f32` is the storage type for parameters and
/// activations; `f64` is used for gradient checking.
pub trait Real: Float + Sum + Debug + Default + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_extents(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(shape_err!("shape must have at least one extent"));
    }
    if let Some(pos) = shape.iter().position(|&e| e == 0) {
        return Err(shape_err!("extent {pos} of {shape:?} is zero"));
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_extents(shape)?;
        if n != data.len() {
            return Err(shape_err!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Tensor of the given shape with every element equal to `fill`.
    pub fn create(shape: &[usize], fill: T) -> Result<Self> {
        let n = check_extents(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![fill; n],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::create(shape, T::zero())
    }

    pub(crate) fn zeros_unchecked(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_extents(shape)?;
        if n != self.data.len() {
            return Err(shape_err!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    /// Replaces every element with an i.i.d. draw from normal(mean, std²).
    pub fn gaussian_fill(mut self, mean: f64, std: f64, rng: &mut Rng) -> Result<Self> {
        if !(std.is_finite() && std >= 0.0) {
            return Err(Error::Param(format!(
                "standard deviation must be finite and >= 0, got {std}"
            )));
        }
        for v in &mut self.data {
            *v = T::from_f64(rng.normal(mean, std));
        }
        Ok(self)
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(shape_err!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape,
                other.shape
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, &self.data, &other.data, &mut out);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub(crate) fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(shape_err!("expected a 2-D tensor, got {:?}", self.shape)),
        }
    }

    pub(crate) fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(shape_err!("expected an N×C×H×W tensor, got {:?}", self.shape)),
        }
    }

    /// Zero border of width `pad` around the two trailing (spatial) axes.
    pub fn pad2d(&self, pad: usize) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        if pad == 0 {
            return Ok(self.clone());
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut out = vec![T::zero(); n * c * ph * pw];
        for plane in 0..n * c {
            let src = &self.data[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * ph * pw..(plane + 1) * ph * pw];
            for i in 0..h {
                let row = (i + pad) * pw + pad;
                dst[row..row + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        Ok(Tensor {
            shape: vec![n, c, ph, pw],
            data: out,
        })
    }

    /// Sub-window `[top..top+height, left..left+width]` of the two trailing
    /// axes; leading axes are kept whole.
    pub fn crop2d(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor<T>> {
        let r = self.rank();
        if r < 2 {
            return Err(shape_err!("crop needs at least 2 axes, got {:?}", self.shape));
        }
        let (h, w) = (self.shape[r - 2], self.shape[r - 1]);
        if height == 0 || width == 0 || top + height > h || left + width > w {
            return Err(shape_err!(
                "crop {height}x{width} at ({top},{left}) exceeds {h}x{w}"
            ));
        }
        let planes: usize = self.shape[..r - 2].iter().product();
        let mut out = Vec::with_capacity(planes * height * width);
        for p in 0..planes {
            let base = p * h * w;
            for i in top..top + height {
                let row = base + i * w + left;
                out.extend_from_slice(&self.data[row..row + width]);
            }
        }
        let mut shape = self.shape.clone();
        shape[r - 2] = height;
        shape[r - 1] = width;
        Ok(Tensor { shape, data: out })
    }

    /// Index of the largest element of a 1-D tensor; ties go to the lowest index.
    pub fn argmax(&self) -> Result<usize> {
        if self.rank() != 1 {
            return Err(shape_err!("argmax expects a 1-D tensor, got {:?}", self.shape));
        }
        argmax(&self.data).ok_or_else(|| shape_err!("argmax of an empty vector"))
    }
}

/// Lowest index holding the maximum value, `None` when empty.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v.partial_cmp(&b) != Some(std::cmp::Ordering::Greater) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

const PAR_THRESHOLD: usize = 1 << 15;

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// `c += a · b` with a: m×k, b: k×n, c: m×n (row-major slices).
pub(crate) fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let row = |(i, c_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av != T::zero() {
                axpy(av, &b[p * n..(p + 1) * n], c_row);
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c += aᵀ · b` with a: k×m, b: k×n, c: m×n.
pub(crate) fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let row = |(i, c_row): (usize, &mut [T])| {
        for p in 0..k {
            let av = a[p * m + i];
            if av != T::zero() {
                axpy(av, &b[p * n..(p + 1) * n], c_row);
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c += a · bᵀ` with a: m×k, b: n×k, c: m×n.
pub(crate) fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let row = |(i, c_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let dot = a_row
                .iter()
                .zip(b_row)
                .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
            *cv = *cv + dot;
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}
