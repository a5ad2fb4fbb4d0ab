use super::LayerCache;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Row-wise softmax of an N×K score matrix, computed with max subtraction.
pub fn softmax<T: Real>(scores: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = scores.dims2()?;
    let mut out = Vec::with_capacity(scores.len());
    for row in scores.data().chunks(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<f64> = row.iter().map(|&s| (s - max).as_f64().exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|&e| T::from_f64(e / total)));
    }
    Ok(Tensor::from_parts_unchecked(scores.shape().to_vec(), out))
}

/// Mean cross-entropy of the softmax distribution against integer labels.
///
/// Returns `(loss, probs, cache)`; the loss is accumulated in f64.
pub fn softmax_log_loss<T: Real>(scores: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>, LayerCache<T>)> {
    let (n, k) = scores.dims2()?;
    if labels.len() != n {
        return Err(shape_err!("{} labels for a batch of {n}", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label(format!("label {bad} outside [0, {k})")));
    }
    let mut total = 0.0f64;
    for (row, &label) in scores.data().chunks(k).zip(labels) {
        let max = row.iter().map(|s| s.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|s| (s.as_f64() - max).exp()).sum::<f64>().ln();
        total -= row[label].as_f64() - max - lse;
    }
    let probs = softmax(scores)?;
    let cache = LayerCache::SoftmaxLoss {
        probs: probs.clone(),
        labels: Some(labels.to_vec()),
    };
    Ok((total / n as f64, probs, cache))
}

/// Gradient of the mean loss with respect to the scores: `(probs − onehot)/N`.
pub fn softmax_log_loss_backward<T: Real>(cache: &LayerCache<T>) -> Result<Tensor<T>> {
    let LayerCache::SoftmaxLoss { probs, labels } = cache else {
        return Err(Error::State("loss backward needs a softmax_loss cache".into()));
    };
    let labels = labels
        .as_ref()
        .ok_or_else(|| Error::State("loss backward needs the labels of the forward batch".into()))?;
    let (n, k) = probs.dims2()?;
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut grad = probs.clone();
    for (row, &label) in grad.data_mut().chunks_mut(k).zip(labels) {
        row[label] = row[label] - T::one();
        for v in row.iter_mut() {
            *v = *v * inv_n;
        }
    }
    Ok(grad)
}
