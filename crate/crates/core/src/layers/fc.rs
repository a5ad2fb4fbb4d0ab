use super::{check_same_shape, LayerCache, LayerGrads, LayerParams};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Real, Tensor};

fn flat_dims<T: Real>(x: &Tensor<T>) -> (usize, usize) {
    let n = x.shape()[0];
    (n, x.len() / n)
}

/// `y = x·w + b` where `x` is flattened to N×F.
pub fn fc_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(Tensor<T>, LayerCache<T>)> {
    let (n, f) = flat_dims(x);
    let (wf, g) = w.dims2()?;
    if wf != f {
        return Err(shape_err!(
            "input {:?} flattens to {f} features, weights expect {wf}",
            x.shape()
        ));
    }
    if b.shape() != [g] {
        return Err(shape_err!("bias shape {:?}, expected [{g}]", b.shape()));
    }
    let mut out = Vec::with_capacity(n * g);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    gemm_nn(n, f, g, x.data(), w.data(), &mut out);
    Ok((
        Tensor::from_parts_unchecked(vec![n, g], out),
        LayerCache::Fc { input: x.clone() },
    ))
}

pub fn fc_backward<T: Real>(
    cache: &LayerCache<T>,
    w: &Tensor<T>,
    d_out: &Tensor<T>,
    need_input: bool,
    need_params: bool,
) -> Result<LayerGrads<T>> {
    let LayerCache::Fc { input: x } = cache else {
        return Err(Error::State("fc backward needs an fc cache".into()));
    };
    let (n, f) = flat_dims(x);
    let (wf, g) = w.dims2()?;
    if wf != f {
        return Err(shape_err!("cached input has {f} features, weights expect {wf}"));
    }
    check_same_shape(&[n, g], d_out)?;

    let d_input = need_input.then(|| {
        let mut dx = vec![T::zero(); n * f];
        gemm_nt(n, g, f, d_out.data(), w.data(), &mut dx);
        Tensor::from_parts_unchecked(x.shape().to_vec(), dx)
    });
    let d_params = need_params.then(|| {
        let mut dw = vec![T::zero(); f * g];
        gemm_tn(f, n, g, x.data(), d_out.data(), &mut dw);
        let mut db = vec![T::zero(); g];
        for row in d_out.data().chunks(g) {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc = *acc + v;
            }
        }
        LayerParams {
            weight: Tensor::from_parts_unchecked(vec![f, g], dw),
            bias: Tensor::from_parts_unchecked(vec![g], db),
        }
    });
    Ok(LayerGrads { d_input, d_params })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights() {
        let x = Tensor::new(&[2, 3], vec![1.0f32, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap();
        let mut id = vec![0.0f32; 9];
        for i in 0..3 {
            id[i * 3 + i] = 1.0;
        }
        let w = Tensor::new(&[3, 3], id).unwrap();
        let b = Tensor::zeros(&[3]).unwrap();
        assert_eq!(fc_forward(&x, &w, &b).unwrap().0, x);
    }

    #[test]
    fn hand_example() {
        let x = Tensor::new(&[1, 2], vec![1.0f32, 2.0]).unwrap();
        let w = Tensor::new(&[2, 2], vec![1.0f32, 0.0, 0.0, 2.0]).unwrap();
        let b = Tensor::new(&[2], vec![1.0f32, 1.0]).unwrap();
        assert_eq!(fc_forward(&x, &w, &b).unwrap().0.data(), &[2.0, 5.0]);
    }

    #[test]
    fn flattens_spatial_input() {
        let x = Tensor::<f32>::zeros(&[1, 512, 7, 7]).unwrap();
        let w = Tensor::zeros(&[512 * 7 * 7, 4096]).unwrap();
        let b = Tensor::zeros(&[4096]).unwrap();
        let (y, cache) = fc_forward(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[1, 4096]);
        let d = Tensor::zeros(&[1, 4096]).unwrap();
        let g = fc_backward(&cache, &w, &d, true, false).unwrap();
        assert_eq!(g.d_input.unwrap().shape(), &[1, 512, 7, 7]);
    }

    #[test]
    fn mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 3]).unwrap();
        let w = Tensor::zeros(&[2, 2]).unwrap();
        let b = Tensor::zeros(&[2]).unwrap();
        assert!(fc_forward(&x, &w, &b).is_err());
    }
}
