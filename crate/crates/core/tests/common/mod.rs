#![allow(dead_code)]

pub mod synth;

use agecnn::layers::{LayerCache, LayerParams, LayerSpec, Mode};
use agecnn::network::{self, FreezeMask, ForwardOptions, NetworkSpec, ParamSet};
use agecnn::{Rng, Tensor};

/// Finite-difference step.
pub const H: f64 = 1e-3;

/// `|a − f| / max(|a|, |f|, 1e-8)`.
pub fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-8)
}

pub fn random64(shape: &[usize], std: f64, seed: u64) -> Tensor<f64> {
    Tensor::zeros(shape)
        .unwrap()
        .gaussian_fill(0.0, std, &mut Rng::new(seed))
        .unwrap()
}

/// Values bounded away from zero and from each other by more than 2h, so
/// neither relu kinks nor max-pool ties fall inside a difference stencil.
pub fn separated64(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::new(seed);
    rng.shuffle(&mut order);
    let data = order
        .iter()
        .map(|&i| {
            let v = 0.05 * (i as f64 - n as f64 / 2.0 + 0.5);
            v + 0.01 * (rng.uniform() - 0.5)
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Scalar objective `Σ r ⊙ layer(x)` for a fixed projection `r`.
fn projected(spec: &LayerSpec, params: Option<&LayerParams<f64>>, x: &Tensor<f64>, r: &Tensor<f64>, seed: u64) -> f64 {
    let (y, _) = spec.forward(params, x, Mode::Train, &mut Rng::new(seed)).unwrap();
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Max relative error over every input and parameter coordinate of one layer.
pub fn layer_gradient_error(spec: &LayerSpec, params: Option<&LayerParams<f64>>, x: &Tensor<f64>, seed: u64) -> f64 {
    let (y, cache) = spec.forward(params, x, Mode::Train, &mut Rng::new(seed)).unwrap();
    let r = random64(y.shape(), 1.0, seed ^ 0xabc);
    let (dx, dp) = spec.backward(params, &cache, &r).unwrap();

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += H;
        let mut minus = x.clone();
        minus.data_mut()[i] -= H;
        let fd = (projected(spec, params, &plus, &r, seed) - projected(spec, params, &minus, &r, seed)) / (2.0 * H);
        worst = worst.max(rel_err(dx.data()[i], fd));
    }
    if let (Some(p), Some(dp)) = (params, dp) {
        for which in 0..2 {
            let len = if which == 0 { p.weight.len() } else { p.bias.len() };
            for i in 0..len {
                let bump = |delta: f64| {
                    let mut q = p.clone();
                    let t = if which == 0 { &mut q.weight } else { &mut q.bias };
                    t.data_mut()[i] += delta;
                    projected(spec, Some(&q), x, &r, seed)
                };
                let fd = (bump(H) - bump(-H)) / (2.0 * H);
                let a = if which == 0 { dp.weight.data()[i] } else { dp.bias.data()[i] };
                worst = worst.max(rel_err(a, fd));
            }
        }
    }
    worst
}

/// Loss plus the piecewise-linear regime: relu input signs and max-pool
/// winners. Equal patterns at w−h, w and w+h mean no kink inside the stencil.
fn network_probe(spec: &NetworkSpec, params: &ParamSet<f64>, batch: &Tensor<f64>, labels: &[usize], seed: u64) -> (f64, Vec<usize>) {
    let pass = network::forward_with(spec, params, batch, &ForwardOptions::train(labels), &mut Rng::new(seed)).unwrap();
    let mut pattern = Vec::new();
    for cache in &pass.caches {
        match cache {
            LayerCache::Relu { input } => pattern.extend(input.data().iter().map(|&v| (v > 0.0) as usize)),
            LayerCache::MaxPool { argmax, .. } => pattern.extend_from_slice(argmax),
            _ => {}
        }
    }
    (pass.loss.unwrap(), pattern)
}

pub struct GradCheck {
    pub max_rel: f64,
    pub checked: usize,
    /// Coordinates whose stencil crosses a relu or max-pool kink.
    pub skipped: usize,
}

/// Max relative error of the full-network analytic gradient over
/// `samples` random coordinates of every trainable tensor (all coordinates
/// when a tensor is smaller than that).
pub fn network_gradient_error(
    spec: &NetworkSpec,
    params: &ParamSet<f64>,
    mask: &FreezeMask,
    batch: &Tensor<f64>,
    labels: &[usize],
    samples: usize,
    seed: u64,
) -> GradCheck {
    let pass = network::forward_with(spec, params, batch, &ForwardOptions::train(labels), &mut Rng::new(seed)).unwrap();
    let grads = network::backward(spec, params, &pass, labels, mask).unwrap();
    let (_, base) = network_probe(spec, params, batch, labels, seed);
    let mut pick = Rng::new(seed ^ 0x5eed);
    let mut out = GradCheck {
        max_rel: 0.0,
        checked: 0,
        skipped: 0,
    };
    for name in mask.trainable() {
        let g = grads.get(name).unwrap();
        for which in 0..2 {
            let analytic = if which == 0 { &g.weight } else { &g.bias };
            let len = analytic.len();
            let coords: Vec<usize> = if len <= samples {
                (0..len).collect()
            } else {
                (0..samples).map(|_| pick.range_inclusive(0, len - 1)).collect()
            };
            for i in coords {
                let bump = |delta: f64| {
                    let mut q = params.clone();
                    let lp = q.get_mut(name).unwrap();
                    let t = if which == 0 { &mut lp.weight } else { &mut lp.bias };
                    t.data_mut()[i] += delta;
                    network_probe(spec, &q, batch, labels, seed)
                };
                let ((up, p_up), (down, p_down)) = (bump(H), bump(-H));
                if p_up != base || p_down != base {
                    out.skipped += 1;
                    continue;
                }
                out.checked += 1;
                out.max_rel = out.max_rel.max(rel_err(analytic.data()[i], (up - down) / (2.0 * H)));
            }
        }
    }
    out
}

/// Mini-profile parameters in f64 with He-scaled weights everywhere so
/// gradients stay well above finite-difference roundoff.
pub fn mini_params64(spec: &NetworkSpec, seed: u64) -> ParamSet<f64> {
    let mut rng = Rng::new(seed);
    let mut params = ParamSet::new();
    for (name, w, b) in spec.param_shapes().unwrap() {
        let fan_in: usize = if w.len() == 4 { w[1..].iter().product() } else { w[0] };
        let std = (2.0 / fan_in as f64).sqrt();
        params.insert(
            name,
            LayerParams {
                weight: Tensor::zeros(&w).unwrap().gaussian_fill(0.0, std, &mut rng).unwrap(),
                bias: Tensor::zeros(&b).unwrap().gaussian_fill(0.0, 0.1, &mut rng).unwrap(),
            },
        );
    }
    params
}
