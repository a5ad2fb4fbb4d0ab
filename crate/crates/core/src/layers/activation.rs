use super::{check_same_shape, LayerCache, Mode};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, LayerCache<T>) {
    let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
    (y, LayerCache::Relu { input: x.clone() })
}

pub fn relu_backward<T: Real>(cache: &LayerCache<T>, d_out: &Tensor<T>) -> Result<Tensor<T>> {
    let LayerCache::Relu { input } = cache else {
        return Err(Error::State("relu backward needs a relu cache".into()));
    };
    check_same_shape(input.shape(), d_out)?;
    let data = input
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&x, &d)| if x > T::zero() { d } else { T::zero() })
        .collect();
    Ok(Tensor::from_parts_unchecked(input.shape().to_vec(), data))
}

pub(crate) fn check_rate(rate: f32) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Param(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Inverted dropout: in training each element is zeroed with probability
/// `rate` and survivors are scaled by `1/(1−rate)`; evaluation is the identity.
pub fn dropout_forward<T: Real>(
    x: &Tensor<T>,
    rate: f32,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Tensor<T>, LayerCache<T>)> {
    check_rate(rate)?;
    let shape = x.shape().to_vec();
    if mode == Mode::Eval {
        return Ok((x.clone(), LayerCache::Dropout { shape, mask: None }));
    }
    let keep = T::from_f64(1.0 / (1.0 - rate as f64));
    let p = rate as f64;
    let mask: Vec<T> = (0..x.len())
        .map(|_| if rng.uniform() >= p { keep } else { T::zero() })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok((
        Tensor::from_parts_unchecked(shape.clone(), data),
        LayerCache::Dropout {
            shape,
            mask: Some(mask),
        },
    ))
}

pub fn dropout_backward<T: Real>(cache: &LayerCache<T>, d_out: &Tensor<T>) -> Result<Tensor<T>> {
    let LayerCache::Dropout { shape, mask } = cache else {
        return Err(Error::State("dropout backward needs a dropout cache".into()));
    };
    check_same_shape(shape, d_out)?;
    Ok(match mask {
        None => d_out.clone(),
        Some(mask) => {
            let data = d_out.data().iter().zip(mask).map(|(&d, &m)| d * m).collect();
            Tensor::from_parts_unchecked(shape.clone(), data)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(d: Vec<f32>) -> Tensor<f32> {
        Tensor::new(&[d.len()], d).unwrap()
    }

    #[test]
    fn relu_examples() {
        let nonneg = v(vec![0.0, 1.0, 3.5]);
        assert_eq!(relu_forward(&nonneg).0, nonneg);
        let (y, _) = relu_forward(&v(vec![-1.0, 0.0, 2.0]));
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu_forward(&y).0, y);
    }

    #[test]
    fn relu_backward_masks() {
        let (_, cache) = relu_forward(&v(vec![-1.0, 2.0]));
        let d = relu_backward(&cache, &v(vec![1.0, 1.0])).unwrap();
        assert_eq!(d.data(), &[0.0, 1.0]);
    }

    #[test]
    fn dropout_identity_cases() {
        let x = v(vec![1.0, -2.0, 3.0, 4.0]);
        let mut rng = Rng::new(3);
        assert_eq!(dropout_forward(&x, 0.0, Mode::Train, &mut rng).unwrap().0, x);
        assert_eq!(dropout_forward(&x, 0.6, Mode::Eval, &mut rng).unwrap().0, x);
        assert!(matches!(
            dropout_forward(&x, 1.0, Mode::Train, &mut rng),
            Err(Error::Param(_))
        ));
        assert!(dropout_forward(&x, -0.1, Mode::Eval, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        // Each output is 0 or 2.5 with keep probability 0.4: the standard
        // error of the mean over 1e6 elements is 2.5·sqrt(0.24)/1000 ≈ 1.2e-3,
        // so a ±1% band is about 8 standard errors.
        let x = Tensor::<f32>::create(&[1_000_000], 1.0).unwrap();
        let (y, _) = dropout_forward(&x, 0.6, Mode::Train, &mut Rng::new(11)).unwrap();
        let mean = y.sum() / y.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn dropout_backward_uses_mask() {
        let x = v(vec![1.0; 32]);
        let (y, cache) = dropout_forward(&x, 0.5, Mode::Train, &mut Rng::new(5)).unwrap();
        let d = dropout_backward(&cache, &v(vec![1.0; 32])).unwrap();
        assert_eq!(d, y);
    }
}
