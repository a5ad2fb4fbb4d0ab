//! Sequential network assembly: profiles, shape inference, head replacement,
//! and whole-network forward/backward under a freeze mask.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::layers::{LayerCache, LayerKind, LayerParams, LayerSpec, Mode};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Standard deviation of freshly initialized fully connected weights.
pub const HEAD_INIT_STD: f64 = 0.01;
pub const DEFAULT_DROPOUT: f32 = 0.6;
pub const AGE_HEAD: [usize; 4] = [4096, 5000, 5000, 8];
pub const MINI_HEAD: [usize; 3] = [32, 16, 8];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    VggFaceAge,
    Mini,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::VggFaceAge => "vgg-face-age",
            Profile::Mini => "mini",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vgg-face-age" | "vgg_face_age" => Ok(Profile::VggFaceAge),
            "mini" => Ok(Profile::Mini),
            other => Err(Error::Config(format!(
                "unknown profile '{other}' (expected vgg-face-age or mini)"
            ))),
        }
    }
}

/// Placement of rectification and dropout after each hidden head layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadOrder {
    #[default]
    ReluThenDropout,
    DropoutThenRelu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub widths: Vec<usize>,
    pub dropout: f32,
    pub order: HeadOrder,
}

impl HeadConfig {
    pub fn new(widths: &[usize]) -> Self {
        HeadConfig {
            widths: widths.to_vec(),
            dropout: DEFAULT_DROPOUT,
            order: HeadOrder::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileOptions {
    /// Include the normalization layers after the first conv of blocks 1 and 2.
    pub lrn: bool,
    pub dropout: f32,
    pub order: HeadOrder,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions {
            lrn: true,
            dropout: DEFAULT_DROPOUT,
            order: HeadOrder::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub profile: String,
    /// Per-example input shape, C×H×W.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

/// `(layer name, weight shape, bias shape)`.
pub type ParamShape = (String, Vec<usize>, Vec<usize>);

/// Per-example shapes around one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerShape {
    pub name: String,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
}

pub fn build_profile(name: &str) -> Result<NetworkSpec> {
    build_profile_with(name.parse()?, &ProfileOptions::default())
}

/// Builds a named profile.
///
/// * `vgg-face-age`: 3×224×224 input, five conv blocks with channel plan
///   64,64 / 128,128 / 256,256,256 / 512,512,512 / 512,512,512, all 3×3
///   stride 1 pad 1, each followed by relu; LRN (window 3) after the first
///   conv of blocks 1 and 2; 2×2 stride-2 max pooling closing every block.
///   Head fc6(4096) fc7(5000) fc8(5000) fc9(8).
/// * `mini`: 3×32×32 input, two blocks of one 8-channel conv each,
///   with the same relu/LRN/pool pattern, head fc6(32) fc7(16)
///   fc8(8). Small enough for exhaustive tests.
pub fn build_profile_with(profile: Profile, opts: &ProfileOptions) -> Result<NetworkSpec> {
    let (input, blocks, head): ([usize; 3], &[&[usize]], &[usize]) = match profile {
        Profile::VggFaceAge => (
            [3, 224, 224],
            &[&[64, 64], &[128, 128], &[256, 256, 256], &[512, 512, 512], &[512, 512, 512]],
            &AGE_HEAD,
        ),
        Profile::Mini => ([3, 32, 32], &[&[8], &[8]], &MINI_HEAD),
    };
    let mut layers = Vec::new();
    for (b, convs) in blocks.iter().enumerate() {
        let b = b + 1;
        for (i, &channels) in convs.iter().enumerate() {
            let i = i + 1;
            layers.push(LayerSpec::conv(&format!("conv{b}_{i}"), channels, 3, 1, 1));
            layers.push(LayerSpec::relu(&format!("relu{b}_{i}")));
            if opts.lrn && i == 1 && b <= 2 {
                layers.push(LayerSpec::lrn(&format!("norm{b}"), 3));
            }
        }
        layers.push(LayerSpec::maxpool(&format!("pool{b}"), 2, 2));
    }
    let trunk = NetworkSpec {
        profile: profile.name().to_string(),
        input,
        layers,
    };
    let trunk_out = trunk.trunk_output_shape()?;
    let head_cfg = HeadConfig {
        widths: head.to_vec(),
        dropout: opts.dropout,
        order: opts.order,
    };
    let mut spec = trunk;
    spec.layers.extend(head_layers(&head_cfg, trunk_out.iter().product())?);
    spec.validate()?;
    Ok(spec)
}

fn head_layers(cfg: &HeadConfig, in_features: usize) -> Result<Vec<LayerSpec>> {
    if cfg.widths.is_empty() {
        return Err(Error::Config("head widths must not be empty".into()));
    }
    if cfg.widths.contains(&0) {
        return Err(Error::Config("head widths must be positive".into()));
    }
    let mut layers = Vec::new();
    let mut features = in_features;
    for (i, &width) in cfg.widths.iter().enumerate() {
        let idx = i + 6;
        layers.push(LayerSpec::fc(&format!("fc{idx}"), width, Some(features)));
        if i + 1 < cfg.widths.len() {
            let relu = LayerSpec::relu(&format!("relu{idx}"));
            let drop = LayerSpec::dropout(&format!("drop{idx}"), cfg.dropout);
            match cfg.order {
                HeadOrder::ReluThenDropout => layers.extend([relu, drop]),
                HeadOrder::DropoutThenRelu => layers.extend([drop, relu]),
            }
        }
        features = width;
    }
    layers.push(LayerSpec::softmax_loss("prob"));
    for l in &layers {
        l.validate()?;
    }
    Ok(layers)
}

impl NetworkSpec {
    /// Checks names, the trailing loss layer, and end-to-end shape inference.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &self.layers {
            l.validate()?;
            if !seen.insert(l.name.as_str()) {
                return Err(Error::Config(format!("duplicate layer name '{}'", l.name)));
            }
        }
        let losses = self
            .layers
            .iter()
            .filter(|l| l.kind == LayerKind::SoftmaxLoss)
            .count();
        if losses != 1 || self.layers.last().map(|l| &l.kind) != Some(&LayerKind::SoftmaxLoss) {
            return Err(Error::Config(
                "network needs exactly one softmax_loss layer, placed last".into(),
            ));
        }
        self.infer_shapes()?;
        Ok(())
    }

    /// Per-example shapes before and after every layer.
    pub fn infer_shapes(&self) -> Result<Vec<LayerShape>> {
        let mut shape = self.input.to_vec();
        if shape.contains(&0) {
            return Err(shape_err!("input shape {shape:?} has a zero extent"));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let next = l.output_shape(&shape).map_err(|e| match e {
                Error::Shape(m) if !m.starts_with(&l.name) => shape_err!("{}: {m}", l.name),
                other => other,
            })?;
            out.push(LayerShape {
                name: l.name.clone(),
                input: shape,
                output: next.clone(),
            });
            shape = next;
        }
        Ok(out)
    }

    /// Number of classes scored by the final layer.
    pub fn num_classes(&self) -> Result<usize> {
        let shapes = self.infer_shapes()?;
        Ok(shapes.last().map(|s| s.output.iter().product()).unwrap_or(0))
    }

    /// Index of the first head layer: the first fully connected layer, or the
    /// loss layer when there is none.
    pub fn head_start(&self) -> usize {
        self.layers
            .iter()
            .position(|l| matches!(l.kind, LayerKind::Fc { .. } | LayerKind::SoftmaxLoss))
            .unwrap_or(self.layers.len())
    }

    pub fn trunk(&self) -> &[LayerSpec] {
        &self.layers[..self.head_start()]
    }

    fn trunk_output_shape(&self) -> Result<Vec<usize>> {
        let mut shape = self.input.to_vec();
        for l in self.trunk() {
            shape = l.output_shape(&shape)?;
        }
        Ok(shape)
    }

    /// `(layer name, weight shape, bias shape)` for each parameterized layer, in order.
    pub fn param_shapes(&self) -> Result<Vec<ParamShape>> {
        let shapes = self.infer_shapes()?;
        let mut out = Vec::new();
        for (l, s) in self.layers.iter().zip(&shapes) {
            if let Some((w, b)) = l.param_shapes(&s.input)? {
                out.push((l.name.clone(), w, b));
            }
        }
        Ok(out)
    }

    pub fn param_layer_names(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter(|l| l.has_params())
            .map(|l| l.name.as_str())
            .collect()
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Overrides the rate of every dropout layer.
    pub fn set_dropout(&mut self, rate: f32) -> Result<()> {
        for l in &mut self.layers {
            if let LayerKind::Dropout { rate: r } = &mut l.kind {
                *r = rate;
            }
            l.validate()?;
        }
        Ok(())
    }
}

/// Named parameter tensors keyed by layer name.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T = f32> {
    layers: BTreeMap<String, LayerParams<T>>,
}

impl<T> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            layers: BTreeMap::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, params: LayerParams<T>) {
        self.layers.insert(name.into(), params);
    }

    pub fn get(&self, name: &str) -> Option<&LayerParams<T>> {
        self.layers.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut LayerParams<T>> {
        self.layers.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<LayerParams<T>> {
        self.layers.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.layers.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &LayerParams<T>)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.layers.values().map(LayerParams::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            layers: self.layers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Verifies the keys and shapes against `spec`; mismatches are shape errors.
    pub fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        let expected = spec.param_shapes()?;
        if expected.len() != self.layers.len() {
            return Err(shape_err!(
                "parameter set has {} layers, network needs {}",
                self.layers.len(),
                expected.len()
            ));
        }
        for (name, w, b) in expected {
            let p = self
                .get(&name)
                .ok_or_else(|| shape_err!("{name}: parameters missing"))?;
            if p.weight.shape() != w.as_slice() || p.bias.shape() != b.as_slice() {
                return Err(shape_err!(
                    "{name}: parameters are {:?}/{:?}, expected {w:?}/{b:?}",
                    p.weight.shape(),
                    p.bias.shape()
                ));
            }
        }
        Ok(())
    }
}

/// Fresh parameters: conv weights He-normal (std √(2/fan_in)), fc weights
/// normal(0, 0.01²), all biases zero. Layers draw from the stream in order.
pub fn init_params(spec: &NetworkSpec, rng: &mut Rng) -> Result<ParamSet> {
    let mut params = ParamSet::new();
    for (name, w, b) in spec.param_shapes()? {
        let std = match spec.layer(&name).map(|l| &l.kind) {
            Some(LayerKind::Conv { .. }) => (2.0 / w[1..].iter().product::<usize>() as f64).sqrt(),
            _ => HEAD_INIT_STD,
        };
        let weight = Tensor::zeros(&w)?.gaussian_fill(0.0, std, rng)?;
        params.insert(
            name,
            LayerParams {
                weight,
                bias: Tensor::zeros(&b)?,
            },
        );
    }
    Ok(params)
}

/// Trainable flag per parameterized layer.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FreezeMask {
    flags: BTreeMap<String, bool>,
}

impl FreezeMask {
    pub fn all_trainable(spec: &NetworkSpec) -> Self {
        Self::uniform(spec, true)
    }

    pub fn all_frozen(spec: &NetworkSpec) -> Self {
        Self::uniform(spec, false)
    }

    fn uniform(spec: &NetworkSpec, trainable: bool) -> Self {
        FreezeMask {
            flags: spec
                .param_layer_names()
                .into_iter()
                .map(|n| (n.to_string(), trainable))
                .collect(),
        }
    }

    /// Trunk layers frozen, head layers trainable.
    pub fn head_only(spec: &NetworkSpec) -> Self {
        let head_start = spec.head_start();
        FreezeMask {
            flags: spec
                .layers
                .iter()
                .enumerate()
                .filter(|(_, l)| l.has_params())
                .map(|(i, l)| (l.name.clone(), i >= head_start))
                .collect(),
        }
    }

    pub fn set(&mut self, name: impl Into<String>, trainable: bool) {
        self.flags.insert(name.into(), trainable);
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.flags.get(name).copied().unwrap_or(false)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, bool)> {
        self.flags.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = &str> {
        self.iter().filter(|(_, t)| *t).map(|(k, _)| k)
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        let names = spec.param_layer_names();
        if names.len() != self.flags.len() || names.iter().any(|n| !self.flags.contains_key(*n)) {
            return Err(Error::Config(
                "freeze mask must cover exactly the parameterized layers".into(),
            ));
        }
        Ok(())
    }
}

/// Replaces the trailing fully connected head of `spec` with fresh layers of
/// the given widths.
///
/// Every hidden head layer is followed by rectification and dropout. New
/// weights are drawn from normal(0, 0.01²) and biases start at zero. Trunk
/// parameters are copied unchanged from `params`, which must hold all of
/// them; any head parameters in `params` are discarded. The returned mask
/// freezes the trunk and trains the new head.
pub fn head_replace(
    spec: &NetworkSpec,
    head: &HeadConfig,
    params: &ParamSet,
    rng: &mut Rng,
) -> Result<(NetworkSpec, ParamSet, FreezeMask)> {
    let start = spec.head_start();
    if let Some(bad) = spec.layers[start..].iter().find(|l| {
        !matches!(
            l.kind,
            LayerKind::Fc { .. } | LayerKind::Relu | LayerKind::Dropout { .. } | LayerKind::SoftmaxLoss
        )
    }) {
        return Err(Error::Config(format!(
            "layer '{}' sits inside the trailing head; only fc/relu/dropout may follow the trunk",
            bad.name
        )));
    }
    let trunk = NetworkSpec {
        profile: spec.profile.clone(),
        input: spec.input,
        layers: spec.layers[..start].to_vec(),
    };
    let features = trunk.trunk_output_shape()?.iter().product();
    let mut new_spec = trunk;
    new_spec.layers.extend(head_layers(head, features)?);
    new_spec.validate()?;

    let mut new_params = ParamSet::new();
    let expected = new_spec.param_shapes()?;
    let head_start = new_spec.head_start();
    for (name, w, b) in expected {
        let idx = new_spec.layers.iter().position(|l| l.name == name).unwrap_or(0);
        if idx < head_start {
            let p = params
                .get(&name)
                .ok_or_else(|| Error::Integrity(format!("{name}: trunk parameters missing")))?;
            if p.weight.shape() != w.as_slice() || p.bias.shape() != b.as_slice() {
                return Err(Error::Integrity(format!(
                    "{name}: trunk parameters are {:?}/{:?}, expected {w:?}/{b:?}",
                    p.weight.shape(),
                    p.bias.shape()
                )));
            }
            new_params.insert(name, p.clone());
        } else {
            let weight = Tensor::zeros(&w)?.gaussian_fill(0.0, HEAD_INIT_STD, rng)?;
            new_params.insert(
                name,
                LayerParams {
                    weight,
                    bias: Tensor::zeros(&b)?,
                },
            );
        }
    }
    let mask = FreezeMask::head_only(&new_spec);
    Ok((new_spec, new_params, mask))
}

/// Output of a whole-network forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass<T = f32> {
    /// N×K class probabilities.
    pub probs: Tensor<T>,
    /// N×K pre-softmax scores.
    pub scores: Tensor<T>,
    /// Mean log loss, when labels were supplied.
    pub loss: Option<f64>,
    pub caches: Vec<LayerCache<T>>,
    pub mode: Mode,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub mode: Mode,
    pub labels: Option<&'a [usize]>,
    /// Caches are kept only for layers at or after this index. Ignored in
    /// eval mode, where nothing is kept.
    pub retain_from: usize,
}

impl ForwardOptions<'_> {
    pub fn eval() -> Self {
        ForwardOptions {
            mode: Mode::Eval,
            labels: None,
            retain_from: usize::MAX,
        }
    }
}

impl<'a> ForwardOptions<'a> {
    pub fn train(labels: &'a [usize]) -> Self {
        ForwardOptions {
            mode: Mode::Train,
            labels: Some(labels),
            retain_from: 0,
        }
    }
}

/// Runs the layers in order. Eval mode keeps no caches and dropout is the identity.
pub fn forward<T: Real>(
    spec: &NetworkSpec,
    params: &ParamSet<T>,
    batch: &Tensor<T>,
    mode: Mode,
    rng: &mut Rng,
) -> Result<ForwardPass<T>> {
    let opts = ForwardOptions {
        mode,
        labels: None,
        retain_from: if mode == Mode::Train { 0 } else { usize::MAX },
    };
    forward_with(spec, params, batch, &opts, rng)
}

pub fn forward_with<T: Real>(
    spec: &NetworkSpec,
    params: &ParamSet<T>,
    batch: &Tensor<T>,
    opts: &ForwardOptions<'_>,
    rng: &mut Rng,
) -> Result<ForwardPass<T>> {
    let (_, c, h, w) = batch.dims4()?;
    if [c, h, w] != spec.input {
        return Err(shape_err!(
            "batch examples are {c}×{h}×{w}, network expects {:?}",
            spec.input
        ));
    }
    let last = spec.layers.len() - 1;
    let mut caches = Vec::with_capacity(spec.layers.len());
    let mut x = batch.clone();
    for (i, layer) in spec.layers.iter().enumerate() {
        let params = if layer.has_params() {
            Some(
                params
                    .get(&layer.name)
                    .ok_or_else(|| shape_err!("{}: parameters missing", layer.name))?,
            )
        } else {
            None
        };
        if i == last {
            break;
        }
        let (y, cache) = layer.forward(params, &x, opts.mode, rng)?;
        let keep = opts.mode == Mode::Train && i >= opts.retain_from;
        caches.push(if keep { cache } else { LayerCache::Skipped });
        x = y;
    }
    let loss_layer = &spec.layers[last];
    if loss_layer.kind != LayerKind::SoftmaxLoss {
        return Err(Error::Config("network must end with a softmax_loss layer".into()));
    }
    let scores = x;
    let (probs, loss, cache) = match opts.labels {
        Some(labels) => {
            let (loss, probs, cache) = crate::layers::softmax_log_loss(&scores, labels)?;
            (probs, Some(loss), cache)
        }
        _ => {
            let probs = crate::layers::softmax(&scores)?;
            let cache = LayerCache::SoftmaxLoss {
                probs: probs.clone(),
                labels: None,
            };
            (probs, None, cache)
        }
    };
    caches.push(if opts.mode == Mode::Train { cache } else { LayerCache::Skipped });
    Ok(ForwardPass {
        probs,
        scores,
        loss,
        caches,
        mode: opts.mode,
    })
}

/// Index of the earliest layer whose parameters the mask leaves trainable.
pub fn first_trainable(spec: &NetworkSpec, mask: &FreezeMask) -> Option<usize> {
    spec.layers
        .iter()
        .position(|l| l.has_params() && mask.is_trainable(&l.name))
}

/// Gradients of the mean loss for the mask's trainable layers only.
///
/// Gradients still flow through frozen layers that sit above an earlier
/// trainable one; layers below the earliest trainable layer are not visited.
pub fn backward<T: Real>(
    spec: &NetworkSpec,
    params: &ParamSet<T>,
    pass: &ForwardPass<T>,
    labels: &[usize],
    mask: &FreezeMask,
) -> Result<ParamSet<T>> {
    mask.check_against(spec)?;
    if pass.mode != Mode::Train {
        return Err(Error::State("backward needs caches from a train-mode forward".into()));
    }
    if pass.caches.len() != spec.layers.len() {
        return Err(Error::State(format!(
            "{} caches for {} layers",
            pass.caches.len(),
            spec.layers.len()
        )));
    }
    let mut grads = ParamSet::new();
    let Some(stop) = first_trainable(spec, mask) else {
        return Ok(grads);
    };

    let last = spec.layers.len() - 1;
    let loss_cache = match &pass.caches[last] {
        LayerCache::SoftmaxLoss { probs, labels: cached } => {
            if let Some(cached) = cached {
                if cached.as_slice() != labels {
                    return Err(Error::State("labels differ from those of the forward pass".into()));
                }
            }
            if labels.len() != probs.shape()[0] {
                return Err(Error::State(format!(
                    "{} labels for a forward batch of {}",
                    labels.len(),
                    probs.shape()[0]
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= probs.shape()[1]) {
                return Err(Error::Label(format!("label {bad} outside [0, {})", probs.shape()[1])));
            }
            LayerCache::SoftmaxLoss {
                probs: probs.clone(),
                labels: Some(labels.to_vec()),
            }
        }
        other => {
            return Err(Error::State(format!(
                "stale cache: expected the loss cache last, found '{}'",
                other.kind_tag()
            )))
        }
    };
    let mut d = crate::layers::softmax_log_loss_backward(&loss_cache)?;

    for i in (stop..last).rev() {
        let layer = &spec.layers[i];
        let cache = &pass.caches[i];
        if matches!(cache, LayerCache::Skipped) {
            return Err(Error::State(format!("{}: no cache retained for backward", layer.name)));
        }
        let layer_params = if layer.has_params() { params.get(&layer.name) } else { None };
        let need_params = layer.has_params() && mask.is_trainable(&layer.name);
        let need_input = i > stop;
        let g = layer.backward_with(layer_params, cache, &d, need_input, need_params)?;
        if let Some(p) = g.d_params {
            grads.insert(layer.name.clone(), p);
        }
        match g.d_input {
            Some(next) => d = next,
            None => break,
        }
    }
    Ok(grads)
}
