use super::{check_same_shape, LayerCache};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Unpadded pooling extent, `floor((extent − window) / stride) + 1`.
pub(crate) fn output_extent(extent: usize, window: usize, stride: usize) -> Result<usize> {
    if window == 0 || stride == 0 {
        return Err(shape_err!("pool window and stride must be >= 1"));
    }
    if window > extent {
        return Err(shape_err!("pool window {window} exceeds input extent {extent}"));
    }
    Ok((extent - window) / stride + 1)
}

pub fn maxpool_forward<T: Real>(x: &Tensor<T>, window: usize, stride: usize) -> Result<(Tensor<T>, LayerCache<T>)> {
    let (n, c, h, w) = x.dims4()?;
    let oh = output_extent(h, window, stride)?;
    let ow = output_extent(w, window, stride)?;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best_idx = base + i * stride * w + j * stride;
                let mut best = data[best_idx];
                for u in 0..window {
                    for v in 0..window {
                        let idx = base + (i * stride + u) * w + j * stride + v;
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((
        Tensor::from_parts_unchecked(vec![n, c, oh, ow], out),
        LayerCache::MaxPool {
            input_shape: x.shape().to_vec(),
            output_shape: vec![n, c, oh, ow],
            argmax,
        },
    ))
}

/// Routes each output gradient to the input position that won its window.
pub fn maxpool_backward<T: Real>(cache: &LayerCache<T>, d_out: &Tensor<T>) -> Result<Tensor<T>> {
    let LayerCache::MaxPool {
        input_shape,
        output_shape,
        argmax,
    } = cache else {
        return Err(Error::State("maxpool backward needs a maxpool cache".into()));
    };
    check_same_shape(output_shape, d_out)?;
    let mut dx = Tensor::zeros_unchecked(input_shape);
    let buf = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(d_out.data()) {
        buf[idx] = buf[idx] + g;
    }
    Ok(dx)
}
