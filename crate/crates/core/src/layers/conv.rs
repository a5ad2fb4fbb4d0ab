//! 2-D convolution via im2col + GEMM.

use rayon::prelude::*;

use super::{check_same_shape, LayerCache, LayerGrads, LayerParams};
use crate::error::{shape_err, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Real, Tensor};

/// `(extent + 2·pad − kernel) / stride + 1`, which must be a positive integer.
pub fn conv_output_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = extent + 2 * pad;
    if kernel > padded {
        return Err(shape_err!("kernel {kernel} exceeds padded extent {padded}"));
    }
    if !(padded - kernel).is_multiple_of(stride) {
        return Err(shape_err!(
            "extent {extent} with kernel {kernel}, stride {stride}, pad {pad} gives a non-integral output"
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Source coordinate for output index `o` and kernel offset `u`, or
    /// `None` when it lands in the zero padding.
    #[inline]
    fn src(&self, o: usize, u: usize, extent: usize) -> Option<usize> {
        let pos = o * self.stride + u;
        if pos < self.pad || pos - self.pad >= extent {
            None
        } else {
            Some(pos - self.pad)
        }
    }
}

/// Unfolds one C×H×W image into a (C·k·k)×(OH·OW) matrix.
fn im2col<T: Real>(img: &[T], g: &Geometry, cols: &mut [T]) {
    let n = g.cols();
    for ch in 0..g.c {
        let plane = &img[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for u in 0..g.k {
            for v in 0..g.k {
                let row = &mut cols[((ch * g.k + u) * g.k + v) * n..][..n];
                for i in 0..g.oh {
                    let dst = &mut row[i * g.ow..(i + 1) * g.ow];
                    match g.src(i, u, g.h) {
                        None => dst.fill(T::zero()),
                        Some(ih) => {
                            let src_row = &plane[ih * g.w..(ih + 1) * g.w];
                            for (j, d) in dst.iter_mut().enumerate() {
                                *d = match g.src(j, v, g.w) {
                                    Some(iw) => src_row[iw],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image.
fn col2im<T: Real>(cols: &[T], g: &Geometry, img: &mut [T]) {
    let n = g.cols();
    for ch in 0..g.c {
        let plane = &mut img[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for u in 0..g.k {
            for v in 0..g.k {
                let row = &cols[((ch * g.k + u) * g.k + v) * n..][..n];
                for i in 0..g.oh {
                    let Some(ih) = g.src(i, u, g.h) else { continue };
                    for j in 0..g.ow {
                        if let Some(iw) = g.src(j, v, g.w) {
                            plane[ih * g.w + iw] = plane[ih * g.w + iw] + row[i * g.ow + j];
                        }
                    }
                }
            }
        }
    }
}

fn geometry<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<(usize, usize, Geometry)> {
    let (n, c, h, wd) = x.dims4()?;
    let (cout, cin, kh, kw) = w.dims4()?;
    if cin != c {
        return Err(shape_err!("input has {c} channels, kernels expect {cin}"));
    }
    if kh != kw {
        return Err(shape_err!("kernels must be square, got {kh}x{kw}"));
    }
    if stride == 0 {
        return Err(shape_err!("stride must be >= 1"));
    }
    let oh = conv_output_extent(h, kh, stride, pad)?;
    let ow = conv_output_extent(wd, kw, stride, pad)?;
    Ok((
        n,
        cout,
        Geometry {
            c,
            h,
            w: wd,
            k: kh,
            stride,
            pad,
            oh,
            ow,
        },
    ))
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, LayerCache<T>)> {
    let (n, cout, g) = geometry(x, w, stride, pad)?;
    if b.shape() != [cout] {
        return Err(shape_err!("bias shape {:?}, expected [{cout}]", b.shape()));
    }
    let in_len = g.c * g.h * g.w;
    let out_len = cout * g.cols();
    let mut out = vec![T::zero(); n * out_len];
    out.par_chunks_mut(out_len).enumerate().for_each(|(img, y)| {
        let mut cols = vec![T::zero(); g.rows() * g.cols()];
        im2col(&x.data()[img * in_len..(img + 1) * in_len], &g, &mut cols);
        for (o, row) in y.chunks_mut(g.cols()).enumerate() {
            row.fill(b.data()[o]);
        }
        gemm_nn(cout, g.rows(), g.cols(), w.data(), &cols, y);
    });
    let y = Tensor::from_parts_unchecked(vec![n, cout, g.oh, g.ow], out);
    let cache = LayerCache::Conv {
        input: x.clone(),
        stride,
        pad,
    };
    Ok((y, cache))
}

pub fn conv2d_backward<T: Real>(
    cache: &LayerCache<T>,
    w: &Tensor<T>,
    d_out: &Tensor<T>,
    need_input: bool,
    need_params: bool,
) -> Result<LayerGrads<T>> {
    let LayerCache::Conv { input: x, stride, pad } = cache else {
        return Err(crate::error::Error::State("conv backward needs a conv cache".into()));
    };
    let (n, cout, g) = geometry(x, w, *stride, *pad)?;
    check_same_shape(&[n, cout, g.oh, g.ow], d_out)?;
    let in_len = g.c * g.h * g.w;
    let out_len = cout * g.cols();

    let d_input = if need_input {
        let mut dx = vec![T::zero(); n * in_len];
        dx.par_chunks_mut(in_len).enumerate().for_each(|(img, dx_img)| {
            let dy = &d_out.data()[img * out_len..(img + 1) * out_len];
            let mut dcols = vec![T::zero(); g.rows() * g.cols()];
            gemm_tn(g.rows(), cout, g.cols(), w.data(), dy, &mut dcols);
            col2im(&dcols, &g, dx_img);
        });
        Some(Tensor::from_parts_unchecked(x.shape().to_vec(), dx))
    } else {
        None
    };

    let d_params = if need_params {
        // Images are accumulated in order so the result is deterministic.
        let mut dw = vec![T::zero(); w.len()];
        let mut db = vec![T::zero(); cout];
        let mut cols = vec![T::zero(); g.rows() * g.cols()];
        for img in 0..n {
            let dy = &d_out.data()[img * out_len..(img + 1) * out_len];
            im2col(&x.data()[img * in_len..(img + 1) * in_len], &g, &mut cols);
            gemm_nt(cout, g.cols(), g.rows(), dy, &cols, &mut dw);
            for (o, row) in dy.chunks(g.cols()).enumerate() {
                db[o] = db[o] + row.iter().copied().sum::<T>();
            }
        }
        Some(LayerParams {
            weight: Tensor::from_parts_unchecked(w.shape().to_vec(), dw),
            bias: Tensor::from_parts_unchecked(vec![cout], db),
        })
    } else {
        None
    };
    Ok(LayerGrads { d_input, d_params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
        Tensor::zeros(shape)
            .unwrap()
            .gaussian_fill(0.0, 1.0, &mut Rng::new(seed))
            .unwrap()
    }

    /// Direct six-loop summation over the zero-padded input.
    fn direct_conv(x: &Tensor<f32>, w: &Tensor<f32>, b: &Tensor<f32>, stride: usize, pad: usize) -> Vec<f64> {
        let [n, c, h, wd] = x.shape().try_into().unwrap();
        let [co, _, k, _] = w.shape().try_into().unwrap();
        let xp = x.pad2d(pad).unwrap();
        let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
        let oh = (ph - k) / stride + 1;
        let ow = (pw - k) / stride + 1;
        let mut out = vec![0.0f64; n * co * oh * ow];
        for img in 0..n {
            for o in 0..co {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = b.data()[o] as f64;
                        for ch in 0..c {
                            for u in 0..k {
                                for v in 0..k {
                                    let xv = xp.data()[((img * c + ch) * ph + i * stride + u) * pw + j * stride + v];
                                    let wv = w.data()[((o * c + ch) * k + u) * k + v];
                                    acc += xv as f64 * wv as f64;
                                }
                            }
                        }
                        out[((img * co + o) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel() {
        let x = random(&[1, 1, 3, 3], 1);
        let w = Tensor::new(&[1, 1, 1, 1], vec![1.0f32]).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let (y, _) = conv2d_forward(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn same_padding_keeps_spatial_size() {
        // Shape only; a 3×224×224 forward with 64 kernels.
        let x = Tensor::<f32>::zeros(&[1, 3, 224, 224]).unwrap();
        let w = Tensor::zeros(&[64, 3, 3, 3]).unwrap();
        let b = Tensor::zeros(&[64]).unwrap();
        let (y, _) = conv2d_forward(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 64, 224, 224]);
    }

    #[test]
    fn matches_direct_summation() {
        let x = random(&[1, 2, 4, 4], 2);
        let w = random(&[3, 2, 3, 3], 3);
        let b = random(&[3], 4);
        let (y, _) = conv2d_forward(&x, &w, &b, 1, 0).unwrap();
        for (a, e) in y.data().iter().zip(direct_conv(&x, &w, &b, 1, 0)) {
            assert!((*a as f64 - e).abs() < 1e-5);
        }
    }

    #[test]
    fn errors() {
        let x = random(&[1, 2, 4, 4], 2);
        let b = Tensor::zeros(&[1]).unwrap();
        // Channel mismatch.
        let w = random(&[1, 3, 3, 3], 3);
        assert!(conv2d_forward(&x, &w, &b, 1, 0).is_err());
        // (4 − 3)/2 is not integral.
        let w = random(&[1, 2, 3, 3], 3);
        assert!(conv2d_forward(&x, &w, &b, 2, 0).is_err());
        // Kernel larger than padded input.
        let w = random(&[1, 2, 5, 5], 3);
        assert!(conv2d_forward(&x, &w, &b, 1, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn agrees_with_oracle(
            n in 1usize..3, c in 1usize..4, co in 1usize..4,
            h in 1usize..7, w in 1usize..7, k in 1usize..4,
            stride in 1usize..3, pad in 0usize..2, seed in any::<u64>(),
        ) {
            let (ph, pw) = (h + 2 * pad, w + 2 * pad);
            prop_assume!(k <= ph && k <= pw);
            prop_assume!((ph - k) % stride == 0 && (pw - k) % stride == 0);
            let x = random(&[n, c, h, w], seed);
            let wt = random(&[co, c, k, k], seed ^ 7);
            let b = random(&[co], seed ^ 9);
            let (y, _) = conv2d_forward(&x, &wt, &b, stride, pad).unwrap();
            for (a, e) in y.data().iter().zip(direct_conv(&x, &wt, &b, stride, pad)) {
                prop_assert!((*a as f64 - e).abs() < 1e-4);
            }
        }
    }
}
