//! Local response normalization across channels:
//! `y[c] = x[c] / (k + (alpha/size)·Σ_{c'∈window(c)} x[c']²)^beta`,
//! with the window of `size` channels centred on `c` and clipped at the
//! channel bounds.

use super::{check_same_shape, LayerCache};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub(crate) fn check_params(size: usize, k: f32) -> Result<()> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(Error::Param(format!("lrn window must be odd and >= 1, got {size}")));
    }
    if !(k.is_finite() && k > 0.0) {
        return Err(Error::Param(format!("lrn k must be positive, got {k}")));
    }
    Ok(())
}

#[inline]
fn window(c: usize, half: usize, channels: usize) -> std::ops::Range<usize> {
    c.saturating_sub(half)..(c + half + 1).min(channels)
}

pub fn lrn_forward<T: Real>(
    x: &Tensor<T>,
    size: usize,
    k: f32,
    alpha: f32,
    beta: f32,
) -> Result<(Tensor<T>, LayerCache<T>)> {
    check_params(size, k)?;
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let half = size / 2;
    let coef = T::from_f64(alpha as f64 / size as f64);
    let kk = T::from_f64(k as f64);
    let neg_beta = T::from_f64(-(beta as f64));

    let mut scale = vec![kk; x.len()];
    let data = x.data();
    for img in 0..n {
        let base = img * c * hw;
        for ch in 0..c {
            let dst = &mut scale[base + ch * hw..base + (ch + 1) * hw];
            for src in window(ch, half, c) {
                let plane = &data[base + src * hw..base + (src + 1) * hw];
                for (s, &v) in dst.iter_mut().zip(plane) {
                    *s = *s + coef * v * v;
                }
            }
        }
    }
    let out = data
        .iter()
        .zip(&scale)
        .map(|(&v, &s)| v * s.powf(neg_beta))
        .collect();
    Ok((
        Tensor::from_parts_unchecked(x.shape().to_vec(), out),
        LayerCache::Lrn {
            input: x.clone(),
            scale,
            size,
            alpha,
            beta,
        },
    ))
}

/// `dx[j] = dy[j]·s[j]^−β − (2αβ/n)·x[j]·Σ_{c: j∈window(c)} dy[c]·x[c]·s[c]^(−β−1)`.
pub fn lrn_backward<T: Real>(cache: &LayerCache<T>, d_out: &Tensor<T>) -> Result<Tensor<T>> {
    let LayerCache::Lrn {
        input,
        scale,
        size,
        alpha,
        beta,
    } = cache
    else {
        return Err(Error::State("lrn backward needs an lrn cache".into()));
    };
    check_same_shape(input.shape(), d_out)?;
    let (n, c, h, w) = input.dims4()?;
    let hw = h * w;
    let half = size / 2;
    let b = T::from_f64(*beta as f64);
    let factor = T::from_f64(2.0 * *alpha as f64 * *beta as f64 / *size as f64);
    let x = input.data();
    let dy = d_out.data();

    // t[c] = dy[c]·x[c]·s[c]^(−β−1)
    let t: Vec<T> = (0..x.len())
        .map(|i| dy[i] * x[i] * scale[i].powf(-b - T::one()))
        .collect();
    let mut dx: Vec<T> = (0..x.len()).map(|i| dy[i] * scale[i].powf(-b)).collect();
    for img in 0..n {
        let base = img * c * hw;
        for ch in 0..c {
            let mut acc = vec![T::zero(); hw];
            // The window relation is symmetric, so j∈window(c) ⇔ c∈window(j).
            for src in window(ch, half, c) {
                for (a, &v) in acc.iter_mut().zip(&t[base + src * hw..base + (src + 1) * hw]) {
                    *a = *a + v;
                }
            }
            let off = base + ch * hw;
            for p in 0..hw {
                dx[off + p] = dx[off + p] - factor * x[off + p] * acc[p];
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(input.shape().to_vec(), dx))
}
