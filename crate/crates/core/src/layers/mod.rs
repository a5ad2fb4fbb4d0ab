//! Forward and backward passes for every layer kind used by the networks.
//!
//! Activations are laid out N×C×H×W (or N×F after a fully connected layer).
//! Each forward call returns a [`LayerCache`] holding what the matching
//! backward call needs; caches are tied to the layer kind that produced them.

mod activation;
mod conv;
mod fc;
mod lrn;
mod pool;
mod softmax;

pub use activation::{dropout_backward, dropout_forward, relu_backward, relu_forward};
pub use conv::{conv2d_backward, conv2d_forward, conv_output_extent};
pub use fc::{fc_backward, fc_forward};
pub use lrn::{lrn_backward, lrn_forward};
pub use pool::{maxpool_backward, maxpool_forward};
pub use softmax::{softmax, softmax_log_loss, softmax_log_loss_backward};

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

pub const LRN_DEFAULT_SIZE: usize = 5;
pub const LRN_DEFAULT_K: f32 = 2.0;
pub const LRN_DEFAULT_ALPHA: f32 = 1e-4;
pub const LRN_DEFAULT_BETA: f32 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    /// Across-channel local response normalization over a window of `size` channels.
    Lrn {
        size: usize,
        k: f32,
        alpha: f32,
        beta: f32,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    /// Fully connected layer. `in_features`, when set, pins the flattened
    /// input size the layer was designed for.
    Fc {
        out_features: usize,
        in_features: Option<usize>,
    },
    Dropout {
        rate: f32,
    },
    SoftmaxLoss,
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Relu => "relu",
            LayerKind::Lrn { .. } => "lrn",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Fc { .. } => "fc",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::SoftmaxLoss => "softmax_loss",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

/// Weight and bias of one parameterized layer.
///
/// Conv weights are OutC×InC×k×k with bias [OutC]; fc weights are F×G with
/// bias [G].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> LayerParams<T> {
    pub fn cast<U: Real>(&self) -> LayerParams<U> {
        LayerParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub enum LayerCache<T = f32> {
    /// Nothing retained (eval mode, or a layer below the backward frontier).
    Skipped,
    Conv {
        input: Tensor<T>,
        stride: usize,
        pad: usize,
    },
    Relu {
        input: Tensor<T>,
    },
    Lrn {
        input: Tensor<T>,
        scale: Vec<T>,
        size: usize,
        alpha: f32,
        beta: f32,
    },
    MaxPool {
        input_shape: Vec<usize>,
        output_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    Fc {
        input: Tensor<T>,
    },
    Dropout {
        shape: Vec<usize>,
        mask: Option<Vec<T>>,
    },
    SoftmaxLoss {
        probs: Tensor<T>,
        labels: Option<Vec<usize>>,
    },
}

impl<T> LayerCache<T> {
    pub fn kind_tag(&self) -> &'static str {
        match self {
            LayerCache::Skipped => "skipped",
            LayerCache::Conv { .. } => "conv",
            LayerCache::Relu { .. } => "relu",
            LayerCache::Lrn { .. } => "lrn",
            LayerCache::MaxPool { .. } => "maxpool",
            LayerCache::Fc { .. } => "fc",
            LayerCache::Dropout { .. } => "dropout",
            LayerCache::SoftmaxLoss { .. } => "softmax_loss",
        }
    }
}

/// Result of a backward call; each half is present only when requested.
#[derive(Debug, Clone)]
pub struct LayerGrads<T = f32> {
    pub d_input: Option<Tensor<T>>,
    pub d_params: Option<LayerParams<T>>,
}

fn positive(name: &str, field: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Param(format!("{name}: {field} must be >= 1")));
    }
    Ok(())
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
        }
    }

    pub fn conv(name: &str, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self::new(
            name,
            LayerKind::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            },
        )
    }

    pub fn relu(name: &str) -> Self {
        Self::new(name, LayerKind::Relu)
    }

    pub fn lrn(name: &str, size: usize) -> Self {
        Self::new(
            name,
            LayerKind::Lrn {
                size,
                k: LRN_DEFAULT_K,
                alpha: LRN_DEFAULT_ALPHA,
                beta: LRN_DEFAULT_BETA,
            },
        )
    }

    pub fn maxpool(name: &str, window: usize, stride: usize) -> Self {
        Self::new(name, LayerKind::MaxPool { window, stride })
    }

    pub fn fc(name: &str, out_features: usize, in_features: Option<usize>) -> Self {
        Self::new(
            name,
            LayerKind::Fc {
                out_features,
                in_features,
            },
        )
    }

    pub fn dropout(name: &str, rate: f32) -> Self {
        Self::new(name, LayerKind::Dropout { rate })
    }

    pub fn softmax_loss(name: &str) -> Self {
        Self::new(name, LayerKind::SoftmaxLoss)
    }

    pub fn has_params(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. } | LayerKind::Fc { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let name = self.name.as_str();
        if name.is_empty() {
            return Err(Error::Config("layer name must not be empty".into()));
        }
        match self.kind {
            LayerKind::Conv {
                out_channels,
                kernel,
                stride,
                ..
            } => {
                positive(name, "out_channels", out_channels)?;
                positive(name, "kernel", kernel)?;
                positive(name, "stride", stride)?;
            }
            LayerKind::Lrn { size, k, alpha, beta } => {
                lrn::check_params(size, k)?;
                if !alpha.is_finite() || !beta.is_finite() {
                    return Err(Error::Param(format!("{name}: non-finite lrn constant")));
                }
            }
            LayerKind::MaxPool { window, stride } => {
                positive(name, "window", window)?;
                positive(name, "stride", stride)?;
            }
            LayerKind::Fc {
                out_features,
                in_features,
            } => {
                positive(name, "out_features", out_features)?;
                if in_features == Some(0) {
                    return Err(Error::Param(format!("{name}: in_features must be >= 1")));
                }
            }
            LayerKind::Dropout { rate } => activation::check_rate(rate)?,
            LayerKind::Relu | LayerKind::SoftmaxLoss => {}
        }
        Ok(())
    }

    /// Per-example output shape for a per-example input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        let name = &self.name;
        let chw = || match input {
            [c, h, w] => Ok((*c, *h, *w)),
            _ => Err(shape_err!("{name}: expected C×H×W input, got {input:?}")),
        };
        match self.kind {
            LayerKind::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                let (_, h, w) = chw()?;
                let oh = conv_output_extent(h, kernel, stride, pad)
                    .map_err(|e| shape_err!("{name}: {e}"))?;
                let ow = conv_output_extent(w, kernel, stride, pad)
                    .map_err(|e| shape_err!("{name}: {e}"))?;
                Ok(vec![out_channels, oh, ow])
            }
            LayerKind::MaxPool { window, stride } => {
                let (c, h, w) = chw()?;
                let oh = pool::output_extent(h, window, stride).map_err(|e| shape_err!("{name}: {e}"))?;
                let ow = pool::output_extent(w, window, stride).map_err(|e| shape_err!("{name}: {e}"))?;
                Ok(vec![c, oh, ow])
            }
            LayerKind::Lrn { .. } => {
                chw()?;
                Ok(input.to_vec())
            }
            LayerKind::Fc {
                out_features,
                in_features,
            } => {
                let f: usize = input.iter().product();
                if let Some(expected) = in_features {
                    if expected != f {
                        return Err(shape_err!(
                            "{name}: expects {expected} input features, got {f} from {input:?}"
                        ));
                    }
                }
                Ok(vec![out_features])
            }
            LayerKind::SoftmaxLoss => {
                if input.len() != 1 {
                    return Err(shape_err!("{name}: expects flat class scores, got {input:?}"));
                }
                Ok(input.to_vec())
            }
            LayerKind::Relu | LayerKind::Dropout { .. } => Ok(input.to_vec()),
        }
    }

    /// Shapes of (weight, bias) for a per-example input shape, or `None` for
    /// parameterless layers.
    pub fn param_shapes(&self, input: &[usize]) -> Result<Option<(Vec<usize>, Vec<usize>)>> {
        self.output_shape(input)?;
        Ok(match self.kind {
            LayerKind::Conv {
                out_channels,
                kernel,
                ..
            } => Some((vec![out_channels, input[0], kernel, kernel], vec![out_channels])),
            LayerKind::Fc { out_features, .. } => {
                let f: usize = input.iter().product();
                Some((vec![f, out_features], vec![out_features]))
            }
            _ => None,
        })
    }

    fn require_params<'a, T>(&self, params: Option<&'a LayerParams<T>>) -> Result<&'a LayerParams<T>> {
        params.ok_or_else(|| Error::State(format!("{}: missing parameters", self.name)))
    }

    pub fn forward<T: Real>(
        &self,
        params: Option<&LayerParams<T>>,
        x: &Tensor<T>,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(Tensor<T>, LayerCache<T>)> {
        self.validate()?;
        let tag = |e: Error| match e {
            Error::Shape(m) => Error::Shape(format!("{}: {m}", self.name)),
            other => other,
        };
        match self.kind {
            LayerKind::Conv { stride, pad, .. } => {
                let p = self.require_params(params)?;
                conv2d_forward(x, &p.weight, &p.bias, stride, pad).map_err(tag)
            }
            LayerKind::Relu => Ok(relu_forward(x)),
            LayerKind::Lrn { size, k, alpha, beta } => lrn_forward(x, size, k, alpha, beta).map_err(tag),
            LayerKind::MaxPool { window, stride } => maxpool_forward(x, window, stride).map_err(tag),
            LayerKind::Fc { .. } => {
                let p = self.require_params(params)?;
                fc_forward(x, &p.weight, &p.bias).map_err(tag)
            }
            LayerKind::Dropout { rate } => dropout_forward(x, rate, mode, rng),
            LayerKind::SoftmaxLoss => {
                let probs = softmax(x).map_err(tag)?;
                let cache = LayerCache::SoftmaxLoss {
                    probs: probs.clone(),
                    labels: None,
                };
                Ok((probs, cache))
            }
        }
    }

    /// Full backward pass: input gradient plus parameter gradients for
    /// parameterized layers. For `softmax_loss`, `d_out` is the 1-element
    /// upstream gradient of the scalar loss.
    pub fn backward<T: Real>(
        &self,
        params: Option<&LayerParams<T>>,
        cache: &LayerCache<T>,
        d_out: &Tensor<T>,
    ) -> Result<(Tensor<T>, Option<LayerParams<T>>)> {
        let g = self.backward_with(params, cache, d_out, true, true)?;
        let d_in = g
            .d_input
            .ok_or_else(|| Error::State(format!("{}: no input gradient", self.name)))?;
        Ok((d_in, g.d_params))
    }

    pub fn backward_with<T: Real>(
        &self,
        params: Option<&LayerParams<T>>,
        cache: &LayerCache<T>,
        d_out: &Tensor<T>,
        need_input: bool,
        need_params: bool,
    ) -> Result<LayerGrads<T>> {
        let mismatch = || {
            Error::State(format!(
                "{}: cache of kind '{}' does not belong to a {} layer",
                self.name,
                cache.kind_tag(),
                self.kind.tag()
            ))
        };
        let tag = |e: Error| match e {
            Error::Shape(m) => Error::Shape(format!("{}: {m}", self.name)),
            other => other,
        };
        let only_input = |d: Result<Tensor<T>>| {
            d.map(|t| LayerGrads {
                d_input: Some(t),
                d_params: None,
            })
        };
        match (&self.kind, cache) {
            (LayerKind::Conv { .. }, LayerCache::Conv { .. }) => {
                let p = self.require_params(params)?;
                conv2d_backward(cache, &p.weight, d_out, need_input, need_params).map_err(tag)
            }
            (LayerKind::Fc { .. }, LayerCache::Fc { .. }) => {
                let p = self.require_params(params)?;
                fc_backward(cache, &p.weight, d_out, need_input, need_params).map_err(tag)
            }
            (LayerKind::Relu, LayerCache::Relu { .. }) => only_input(relu_backward(cache, d_out)).map_err(tag),
            (LayerKind::Lrn { .. }, LayerCache::Lrn { .. }) => only_input(lrn_backward(cache, d_out)).map_err(tag),
            (LayerKind::MaxPool { .. }, LayerCache::MaxPool { .. }) => {
                only_input(maxpool_backward(cache, d_out)).map_err(tag)
            }
            (LayerKind::Dropout { .. }, LayerCache::Dropout { .. }) => {
                only_input(dropout_backward(cache, d_out)).map_err(tag)
            }
            (LayerKind::SoftmaxLoss, LayerCache::SoftmaxLoss { .. }) => {
                if d_out.len() != 1 {
                    return Err(shape_err!(
                        "{}: upstream gradient of the loss must be a scalar",
                        self.name
                    ));
                }
                let g = softmax_log_loss_backward(cache)?;
                let scale = d_out.data()[0];
                only_input(Ok(g.map(|v| v * scale)))
            }
            _ => Err(mismatch()),
        }
    }
}

pub(crate) fn check_same_shape<T: Real>(expected: &[usize], d_out: &Tensor<T>) -> Result<()> {
    if d_out.shape() != expected {
        return Err(shape_err!(
            "upstream gradient shape {:?} does not match forward output {:?}",
            d_out.shape(),
            expected
        ));
    }
    Ok(())
}
