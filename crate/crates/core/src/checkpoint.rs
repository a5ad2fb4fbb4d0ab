//! The `ACNN` weight file: network description, named parameter chunks and
//! an optional trailer holding the freeze mask and optimizer state.
//!
//! All integers and reals are little-endian. The layout is documented field
//! by field in the repository README.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{LayerKind, LayerParams, LayerSpec};
use crate::network::{FreezeMask, NetworkSpec, ParamSet};
use crate::optim::OptState;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"ACNN";
pub const VERSION: u32 = 1;
const MASK_TAG: [u8; 4] = *b"MASK";
const OPTS_TAG: [u8; 4] = *b"OPTS";

const KIND_CONV: u8 = 0;
const KIND_RELU: u8 = 1;
const KIND_LRN: u8 = 2;
const KIND_MAXPOOL: u8 = 3;
const KIND_FC: u8 = 4;
const KIND_DROPOUT: u8 = 5;
const KIND_SOFTMAX_LOSS: u8 = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: ParamSet,
    /// Every layer trainable when the file carries no mask.
    pub mask: FreezeMask,
    pub state: Option<OptState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in 32 bits")))?;
        self.0.extend(v.to_le_bytes());
        Ok(())
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }
    fn str(&mut self, s: &str) -> Result<()> {
        self.u32(s.len())?;
        self.0.extend(s.as_bytes());
        Ok(())
    }
    fn tensor(&mut self, t: &Tensor) -> Result<()> {
        self.u32(t.rank())?;
        for &e in t.shape() {
            self.u32(e)?;
        }
        for &v in t.data() {
            self.f32(v);
        }
        Ok(())
    }
    fn pair(&mut self, p: &LayerParams) -> Result<()> {
        self.u32(2)?;
        self.tensor(&p.weight)?;
        self.tensor(&p.bias)
    }
}

fn write_layer(w: &mut Writer, l: &LayerSpec) -> Result<()> {
    w.str(&l.name)?;
    match l.kind {
        LayerKind::Conv {
            out_channels,
            kernel,
            stride,
            pad,
        } => {
            w.u8(KIND_CONV);
            for v in [out_channels, kernel, stride, pad] {
                w.u32(v)?;
            }
        }
        LayerKind::Relu => w.u8(KIND_RELU),
        LayerKind::Lrn { size, k, alpha, beta } => {
            w.u8(KIND_LRN);
            w.u32(size)?;
            w.f32(k);
            w.f32(alpha);
            w.f32(beta);
        }
        LayerKind::MaxPool { window, stride } => {
            w.u8(KIND_MAXPOOL);
            w.u32(window)?;
            w.u32(stride)?;
        }
        LayerKind::Fc {
            out_features,
            in_features,
        } => {
            w.u8(KIND_FC);
            w.u32(out_features)?;
            w.u32(in_features.unwrap_or(0))?;
        }
        LayerKind::Dropout { rate } => {
            w.u8(KIND_DROPOUT);
            w.f32(rate);
        }
        LayerKind::SoftmaxLoss => w.u8(KIND_SOFTMAX_LOSS),
    }
    Ok(())
}

/// Serializes a model. Parameters are written in layer order, so equal
/// inputs give identical bytes.
pub fn to_bytes(spec: &NetworkSpec, params: &ParamSet, mask: &FreezeMask, state: Option<&OptState>) -> Result<Vec<u8>> {
    spec.validate()?;
    params.check_against(spec)?;
    mask.check_against(spec)?;
    let names = spec.param_layer_names();

    let mut w = Writer(Vec::new());
    w.0.extend(MAGIC);
    w.u32(VERSION as usize)?;
    w.str(&spec.profile)?;
    for &e in &spec.input {
        w.u32(e)?;
    }
    w.u32(spec.layers.len())?;
    for l in &spec.layers {
        write_layer(&mut w, l)?;
    }
    w.u32(names.len())?;
    let crc = crc32fast::hash(&w.0);
    w.0.extend(crc.to_le_bytes());

    for name in &names {
        let p = params.get(name).expect("checked against spec");
        let mut chunk = Writer(Vec::new());
        chunk.str(name)?;
        chunk.pair(p)?;
        w.u64(chunk.0.len() as u64);
        w.0.extend(chunk.0);
    }

    w.0.extend(MASK_TAG);
    w.u32(names.len())?;
    for name in &names {
        w.str(name)?;
        w.u8(mask.is_trainable(name) as u8);
    }

    if let Some(s) = state {
        check_state(s, params, mask).map_err(|e| match e {
            Error::Integrity(m) => Error::State(m),
            other => other,
        })?;
        w.0.extend(OPTS_TAG);
        w.f64(s.lr);
        w.f64(s.best_accuracy);
        w.u64(s.epochs_since_improvement as u64);
        w.u64(s.step);
        w.u64(s.epoch);
        let trainable: Vec<&str> = names.iter().copied().filter(|n| mask.is_trainable(n)).collect();
        w.u32(trainable.len())?;
        for name in trainable {
            w.str(name)?;
            w.pair(s.velocity.get(name).expect("checked"))?;
        }
    }
    Ok(w.0)
}

/// Writes through a temporary file in the destination directory, then renames.
pub fn save(path: impl AsRef<Path>, spec: &NetworkSpec, params: &ParamSet, mask: &FreezeMask, state: Option<&OptState>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(spec, params, mask, state)?;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(&bytes)
        .and_then(|_| tmp.as_file().sync_all())
        .map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("file truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
    /// A tensor whose extents must equal `expect`; `owner` names the layer
    /// in errors.
    fn tensor(&mut self, expect: &[usize], owner: &str) -> Result<Tensor> {
        let rank = self.u32("tensor rank")?;
        if rank != expect.len() {
            return Err(Error::Integrity(format!(
                "{owner}: tensor has rank {rank}, network expects {expect:?}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("tensor extent")?);
        }
        if shape != expect {
            return Err(Error::Integrity(format!(
                "{owner}: tensor is {shape:?}, network expects {expect:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Tensor::new(&shape, data)
    }
    fn pair(&mut self, w: &[usize], b: &[usize], owner: &str) -> Result<LayerParams> {
        let count = self.u32("tensor count")?;
        if count != 2 {
            return Err(Error::Integrity(format!("{owner}: {count} tensors, expected weight and bias")));
        }
        Ok(LayerParams {
            weight: self.tensor(w, owner)?,
            bias: self.tensor(b, owner)?,
        })
    }
}

fn read_layer(r: &mut Reader) -> Result<LayerSpec> {
    let name = r.str("layer name")?;
    let kind = match r.u8("layer kind")? {
        KIND_CONV => LayerKind::Conv {
            out_channels: r.u32("conv channels")?,
            kernel: r.u32("conv kernel")?,
            stride: r.u32("conv stride")?,
            pad: r.u32("conv pad")?,
        },
        KIND_RELU => LayerKind::Relu,
        KIND_LRN => LayerKind::Lrn {
            size: r.u32("lrn size")?,
            k: r.f32("lrn k")?,
            alpha: r.f32("lrn alpha")?,
            beta: r.f32("lrn beta")?,
        },
        KIND_MAXPOOL => LayerKind::MaxPool {
            window: r.u32("pool window")?,
            stride: r.u32("pool stride")?,
        },
        KIND_FC => {
            let out_features = r.u32("fc width")?;
            let in_features = r.u32("fc input")?;
            LayerKind::Fc {
                out_features,
                in_features: (in_features != 0).then_some(in_features),
            }
        }
        KIND_DROPOUT => LayerKind::Dropout {
            rate: r.f32("dropout rate")?,
        },
        KIND_SOFTMAX_LOSS => LayerKind::SoftmaxLoss,
        k => return Err(Error::Format(format!("layer '{name}' has unknown kind {k}"))),
    };
    Ok(LayerSpec { name, kind })
}

struct RawFile {
    spec: NetworkSpec,
    params: ParamSet,
    mask: Option<FreezeMask>,
    state: Option<OptState>,
}

/// Header fields through the checksum; returns the stored network and the
/// declared chunk count.
fn parse_header(r: &mut Reader) -> Result<(NetworkSpec, usize)> {
    if r.take(4, "magic").ok() != Some(&MAGIC[..]) {
        return Err(Error::Format("not an ACNN weight file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let profile = r.str("profile name")?;
    let input = [r.u32("input shape")?, r.u32("input shape")?, r.u32("input shape")?];
    let n_layers = r.u32("layer count")?;
    if n_layers > r.remaining() {
        return Err(Error::Format(format!("implausible layer count {n_layers}")));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        layers.push(read_layer(r)?);
    }
    let n_chunks = r.u32("chunk count")?;
    let header_end = r.pos;
    let crc = r.u32("header checksum")? as u32;
    if crc != crc32fast::hash(&r.bytes[..header_end]) {
        return Err(Error::Format("header checksum mismatch".into()));
    }
    Ok((NetworkSpec { profile, input, layers }, n_chunks))
}

/// Length of the header, checksum included; parameter chunks start here.
pub fn header_len(bytes: &[u8]) -> Result<usize> {
    let mut r = Reader { bytes, pos: 0 };
    parse_header(&mut r)?;
    Ok(r.pos)
}

/// Parses everything without requiring the network to be complete, so
/// trunk-only files can be read. Tensor extents are checked against shape
/// inference over the file's own layer list.
fn parse(bytes: &[u8]) -> Result<RawFile> {
    let mut r = Reader { bytes, pos: 0 };
    let (spec, n_chunks) = parse_header(&mut r)?;
    let expected = spec
        .param_shapes()
        .map_err(|e| Error::Integrity(format!("stored network is inconsistent: {e}")))?;
    if n_chunks != expected.len() {
        return Err(Error::Integrity(format!(
            "{n_chunks} parameter chunks for {} parameterized layers",
            expected.len()
        )));
    }
    let mut params = ParamSet::new();
    for (name, w, b) in &expected {
        let declared = r.u64("chunk length")?;
        let start = r.pos;
        let stored = r.str("chunk name")?;
        if &stored != name {
            return Err(Error::Integrity(format!("chunk '{stored}' found where '{name}' was expected")));
        }
        let p = r.pair(w, b, name)?;
        if (r.pos - start) as u64 != declared {
            return Err(Error::Format(format!(
                "{name}: chunk declares {declared} bytes but holds {}",
                r.pos - start
            )));
        }
        params.insert(name.clone(), p);
    }

    let mut mask = None;
    let mut state = None;
    if r.remaining() > 0 {
        if r.take(4, "trailer tag")? != MASK_TAG {
            return Err(Error::Format("unknown trailer section".into()));
        }
        let n = r.u32("mask size")?;
        if n != expected.len() {
            return Err(Error::Integrity(format!("mask has {n} entries for {} layers", expected.len())));
        }
        let mut m = FreezeMask::default();
        for _ in 0..n {
            let name = r.str("mask entry")?;
            let flag = match r.u8("mask flag")? {
                0 => false,
                1 => true,
                v => return Err(Error::Format(format!("mask flag {v} for '{name}'"))),
            };
            m.set(name, flag);
        }
        m.check_against(&spec).map_err(|e| Error::Integrity(e.to_string()))?;
        mask = Some(m);
    }
    if r.remaining() > 0 {
        if r.take(4, "trailer tag")? != OPTS_TAG {
            return Err(Error::Format("unknown trailer section".into()));
        }
        let lr = r.f64("learning rate")?;
        let best_accuracy = r.f64("best accuracy")?;
        let epochs_since_improvement = r.u64("plateau counter")? as usize;
        let step = r.u64("step counter")?;
        let epoch = r.u64("epoch counter")?;
        let n = r.u32("velocity count")?;
        let mut velocity = ParamSet::new();
        for _ in 0..n {
            let name = r.str("velocity name")?;
            let (_, w, b) = expected
                .iter()
                .find(|(n, _, _)| *n == name)
                .ok_or_else(|| Error::Integrity(format!("velocity for unknown layer '{name}'")))?;
            let v = r.pair(w, b, &name)?;
            velocity.insert(name, v);
        }
        state = Some(OptState {
            velocity,
            lr,
            best_accuracy,
            epochs_since_improvement,
            step,
            epoch,
        });
    }
    if r.remaining() > 0 {
        return Err(Error::Format(format!("{} unexpected bytes after the trailer", r.remaining())));
    }
    Ok(RawFile {
        spec,
        params,
        mask,
        state,
    })
}

fn check_state(state: &OptState, params: &ParamSet, mask: &FreezeMask) -> Result<()> {
    let trainable: Vec<&str> = mask.trainable().collect();
    if state.velocity.len() != trainable.len() {
        return Err(Error::Integrity(format!(
            "optimizer state holds {} velocities for {} trainable layers",
            state.velocity.len(),
            trainable.len()
        )));
    }
    for name in trainable {
        let (v, p) = match (state.velocity.get(name), params.get(name)) {
            (Some(v), Some(p)) => (v, p),
            _ => return Err(Error::Integrity(format!("{name}: no optimizer velocity"))),
        };
        if v.weight.shape() != p.weight.shape() || v.bias.shape() != p.bias.shape() {
            return Err(Error::Integrity(format!("{name}: velocity shape differs from parameters")));
        }
    }
    if !(state.lr.is_finite() && state.lr > 0.0) {
        return Err(Error::Integrity(format!("stored learning rate {} is invalid", state.lr)));
    }
    Ok(())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let raw = parse(bytes)?;
    raw.spec
        .validate()
        .map_err(|e| Error::Integrity(format!("stored network is not a complete model: {e}")))?;
    let mask = raw.mask.unwrap_or_else(|| FreezeMask::all_trainable(&raw.spec));
    if let Some(s) = &raw.state {
        check_state(s, &raw.params, &mask)?;
    }
    Ok(Checkpoint {
        spec: raw.spec,
        params: raw.params,
        mask,
        state: raw.state,
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Trunk parameters of `target` found in the file at `path`.
///
/// The file's convolution layers must carry the names of a prefix of the
/// target's convolution layers, with identical shapes. Head layers in the
/// file are ignored.
pub fn import_trunk(path: impl AsRef<Path>, target: &NetworkSpec) -> Result<ParamSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    import_trunk_bytes(&bytes, target)
}

pub fn import_trunk_bytes(bytes: &[u8], target: &NetworkSpec) -> Result<ParamSet> {
    let raw = parse(bytes)?;
    let wanted: Vec<(String, Vec<usize>, Vec<usize>)> = {
        let trunk = NetworkSpec {
            profile: target.profile.clone(),
            input: target.input,
            layers: target.trunk().to_vec(),
        };
        trunk.param_shapes()?
    };
    let file_trunk: Vec<&str> = raw
        .spec
        .trunk()
        .iter()
        .filter(|l| l.has_params())
        .map(|l| l.name.as_str())
        .collect();
    if file_trunk.len() > wanted.len() {
        return Err(Error::Integrity(format!(
            "file has {} trunk layers, target trunk has {}",
            file_trunk.len(),
            wanted.len()
        )));
    }
    let mut out = ParamSet::new();
    for (name, (want, w, b)) in file_trunk.iter().zip(&wanted) {
        if name != want {
            return Err(Error::Integrity(format!("file layer '{name}' where the target has '{want}'")));
        }
        let p = raw.params.get(name).expect("parsed chunk per layer");
        if p.weight.shape() != w.as_slice() || p.bias.shape() != b.as_slice() {
            return Err(Error::Integrity(format!(
                "{name}: file holds {:?}/{:?}, target expects {w:?}/{b:?}",
                p.weight.shape(),
                p.bias.shape()
            )));
        }
        out.insert(name.to_string(), p.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_profile, head_replace, init_params, HeadConfig, MINI_HEAD};
    use crate::optim::SgdConfig;
    use crate::rng::Rng;

    fn mini() -> (NetworkSpec, ParamSet, FreezeMask) {
        let spec = build_profile("mini").unwrap();
        let params = init_params(&spec, &mut Rng::new(1)).unwrap();
        head_replace(&spec, &HeadConfig::new(&MINI_HEAD), &params, &mut Rng::new(2)).unwrap()
    }

    fn with_state() -> (NetworkSpec, ParamSet, FreezeMask, OptState) {
        let (spec, params, mask) = mini();
        let mut state = OptState::new(&params, &mask, &SgdConfig::default()).unwrap();
        state.lr = 0.01;
        state.best_accuracy = 0.25;
        state.step = 17;
        state.epoch = 3;
        state.epochs_since_improvement = 1;
        let name = state.velocity.names().next().unwrap().to_string();
        state.velocity.get_mut(&name).unwrap().weight.data_mut()[0] = 0.5;
        (spec, params, mask, state)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let (spec, params, mask, state) = with_state();
        let bytes = to_bytes(&spec, &params, &mask, Some(&state)).unwrap();
        let c = from_bytes(&bytes).unwrap();
        assert_eq!(c.spec, spec);
        assert_eq!(c.mask, mask);
        assert_eq!(c.state.as_ref(), Some(&state));
        for (name, p) in params.iter() {
            let q = c.params.get(name).unwrap();
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&p.weight), bits(&q.weight));
            assert_eq!(bits(&p.bias), bits(&q.bias));
        }
        assert_eq!(to_bytes(&c.spec, &c.params, &c.mask, c.state.as_ref()).unwrap(), bytes);
    }

    #[test]
    fn infinite_best_survives() {
        let (spec, params, mask) = mini();
        let state = OptState::new(&params, &mask, &SgdConfig::default()).unwrap();
        let c = from_bytes(&to_bytes(&spec, &params, &mask, Some(&state)).unwrap()).unwrap();
        assert_eq!(c.state.unwrap().best_accuracy, f64::NEG_INFINITY);
    }

    #[test]
    fn size_matches_shape_arithmetic() {
        let (spec, params, mask) = mini();
        let bytes = to_bytes(&spec, &params, &mask, None).unwrap();
        let s = |name: &str| 4 + name.len();
        let mut header = 4 + 4 + s(&spec.profile) + 12 + 4;
        for l in &spec.layers {
            header += s(&l.name)
                + 1
                + match l.kind {
                    LayerKind::Conv { .. } => 16,
                    LayerKind::Lrn { .. } => 16,
                    LayerKind::MaxPool { .. } | LayerKind::Fc { .. } => 8,
                    LayerKind::Dropout { .. } => 4,
                    LayerKind::Relu | LayerKind::SoftmaxLoss => 0,
                };
        }
        header += 4 + 4;
        let mut chunks = 0;
        let mut trailer = 4 + 4;
        for shape in spec.infer_shapes().unwrap() {
            let l = spec.layer(&shape.name).unwrap();
            if let Some((w, b)) = l.param_shapes(&shape.input).unwrap() {
                let tensor = |t: &[usize]| 4 + 4 * t.len() + 4 * t.iter().product::<usize>();
                chunks += 8 + s(&l.name) + 4 + tensor(&w) + tensor(&b);
                trailer += s(&l.name) + 1;
            }
        }
        assert_eq!(bytes.len(), header + chunks + trailer);
    }

    #[test]
    fn missing_trailer_sections() {
        let (spec, params, mask, state) = with_state();
        let full = to_bytes(&spec, &params, &mask, Some(&state)).unwrap();
        let no_state = to_bytes(&spec, &params, &mask, None).unwrap();
        assert!(full.starts_with(&no_state));
        let c = from_bytes(&no_state).unwrap();
        assert!(c.state.is_none());
        assert_eq!(c.mask, mask);
        let mask_at = no_state.windows(4).rposition(|w| w == MASK_TAG).unwrap();
        let c = from_bytes(&no_state[..mask_at]).unwrap();
        assert_eq!(c.mask, FreezeMask::all_trainable(&spec));
    }

    #[test]
    fn truncation_is_format_error() {
        let (spec, params, mask, state) = with_state();
        let bytes = to_bytes(&spec, &params, &mask, Some(&state)).unwrap();
        for cut in [0, 3, 10, 100, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(from_bytes(&extra), Err(Error::Format(_))));
    }

    #[test]
    fn every_single_byte_header_corruption_is_rejected() {
        let (spec, params, mask) = mini();
        let bytes = to_bytes(&spec, &params, &mask, None).unwrap();
        let end = header_len(&bytes).unwrap();
        assert!(end > 100);
        for i in 0..end {
            for flip in [0x01u8, 0x80, 0xff] {
                let mut b = bytes.clone();
                b[i] ^= flip;
                assert!(from_bytes(&b).is_err(), "byte {i} ^ {flip:#x} accepted");
            }
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let (spec, params, mask) = mini();
        let mut b = to_bytes(&spec, &params, &mask, None).unwrap();
        b[0] = b'X';
        assert!(matches!(from_bytes(&b), Err(Error::Format(m)) if m.contains("magic")));
        let mut b = to_bytes(&spec, &params, &mask, None).unwrap();
        b[4] = 2;
        assert!(matches!(from_bytes(&b), Err(Error::Format(m)) if m.contains("version")));
    }

    #[test]
    fn corrupt_extent_is_integrity_error() {
        let (spec, params, mask) = mini();
        let mut b = to_bytes(&spec, &params, &mask, None).unwrap();
        // First chunk: u64 length, name, tensor count, rank, then extents.
        let first = spec.param_layer_names()[0];
        let extent_at = header_len(&b).unwrap() + 8 + 4 + first.len() + 4 + 4;
        b[extent_at] ^= 0x02;
        assert!(matches!(from_bytes(&b), Err(Error::Integrity(_))));
    }

    #[test]
    fn save_is_atomic_and_deterministic() {
        let (spec, params, mask, state) = with_state();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.acnn");
        let b = dir.path().join("b.acnn");
        save(&a, &spec, &params, &mask, Some(&state)).unwrap();
        save(&b, &spec, &params, &mask, Some(&state)).unwrap();
        save(&a, &spec, &params, &mask, Some(&state)).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 2);
        assert_eq!(load(&a).unwrap().state, Some(state));
    }

    #[test]
    fn load_missing_is_io() {
        assert!(matches!(load("/nonexistent/x.acnn"), Err(Error::Io { .. })));
    }

    #[test]
    fn import_mini_trunk() {
        let spec = build_profile("mini").unwrap();
        let params = init_params(&spec, &mut Rng::new(1)).unwrap();
        let bytes = to_bytes(&spec, &params, &FreezeMask::all_trainable(&spec), None).unwrap();
        let trunk = import_trunk_bytes(&bytes, &spec).unwrap();
        assert_eq!(trunk.names().collect::<Vec<_>>(), ["conv1_1", "conv2_1"]);
        assert_eq!(trunk.get("conv2_1"), params.get("conv2_1"));
    }

    #[test]
    fn import_rejects_wrong_channels() {
        let spec = build_profile("mini").unwrap();
        let mut other = spec.clone();
        if let LayerKind::Conv { out_channels, .. } = &mut other.layers[0].kind {
            *out_channels = 4;
        }
        let params = init_params(&other, &mut Rng::new(1)).unwrap();
        let bytes = to_bytes(&other, &params, &FreezeMask::all_trainable(&other), None).unwrap();
        match import_trunk_bytes(&bytes, &spec) {
            Err(Error::Integrity(m)) => assert!(m.starts_with("conv1_1"), "{m}"),
            r => panic!("{r:?}"),
        }
    }
}
