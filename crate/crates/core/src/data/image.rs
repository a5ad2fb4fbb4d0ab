//! RGB images as 3×H×W tensors with values in [0, 255]: PPM codec,
//! bilinear resampling and crops.

use std::io::Write;
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

fn image_dims(img: &Tensor) -> Result<(usize, usize)> {
    match img.shape() {
        &[3, h, w] if h > 0 && w > 0 => Ok((h, w)),
        s => Err(shape_err!("expected a 3×H×W image, got {s:?}")),
    }
}

fn bad_data(msg: impl Into<String>) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, msg.into())
}

/// Decodes a binary PPM (P6, maxval 255) into a 3×H×W tensor.
pub fn decode_ppm(bytes: &[u8]) -> std::io::Result<Tensor> {
    let mut pos = 0;
    let mut token = || -> std::io::Result<&[u8]> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad_data("truncated PPM header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(&bytes[start..pos])
    };
    if token()? != b"P6" {
        return Err(bad_data("not a binary PPM (P6) file"));
    }
    let mut number = |what: &str| -> std::io::Result<usize> {
        let t = token()?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad_data(format!("bad PPM {what}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 {
        return Err(bad_data("PPM has zero extent"));
    }
    if maxval != 255 {
        return Err(bad_data(format!("PPM maxval {maxval} unsupported, need 255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let plane = width * height;
    let raster = bytes
        .get(start..)
        .filter(|r| r.len() >= 3 * plane)
        .ok_or_else(|| bad_data("truncated PPM raster"))?;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in raster[..3 * plane].chunks_exact(3).enumerate() {
        data[i] = px[0] as f32;
        data[plane + i] = px[1] as f32;
        data[2 * plane + i] = px[2] as f32;
    }
    Ok(Tensor::from_parts_unchecked(vec![3, height, width], data))
}

/// Encodes a 3×H×W tensor as P6, rounding and clamping to [0, 255].
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = image_dims(img)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = img.data();
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push(d[c * plane + i].round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_ppm(img)?;
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path, e))
}

/// Source index pair and weight for each output coordinate, half-pixel
/// centers, clamped at the borders.
fn taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let x = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = x.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (x - i0 as f64) as f32)
        })
        .collect()
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    (a + t * (b - a)).clamp(a.min(b), a.max(b))
}

/// Bilinear resample to `height`×`width`; aspect ratio is not preserved.
pub fn rescale(img: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (h, w) = image_dims(img)?;
    if height == 0 || width == 0 {
        return Err(shape_err!("rescale target {height}×{width} is empty"));
    }
    if (h, w) == (height, width) {
        return Ok(img.clone());
    }
    let cols = taps(w, width);
    let rows = taps(h, height);
    let mut out = Vec::with_capacity(3 * height * width);
    let mut horiz = vec![0f32; h * width];
    for plane in img.data().chunks(h * w) {
        for (src_row, dst_row) in plane.chunks(w).zip(horiz.chunks_mut(width)) {
            for (d, &(i0, i1, t)) in dst_row.iter_mut().zip(&cols) {
                *d = lerp(src_row[i0], src_row[i1], t);
            }
        }
        for &(r0, r1, t) in &rows {
            let (a, b) = (&horiz[r0 * width..(r0 + 1) * width], &horiz[r1 * width..(r1 + 1) * width]);
            out.extend(a.iter().zip(b).map(|(&a, &b)| lerp(a, b, t)));
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![3, height, width], out))
}

pub fn rescale_to_256(img: &Tensor) -> Result<Tensor> {
    rescale(img, 256, 256)
}

/// `size`×`size` window with a uniformly drawn top-left offset in
/// `[0, H−size]×[0, W−size]`. Returns the crop and its offset.
pub fn random_crop(img: &Tensor, size: usize, rng: &mut Rng) -> Result<(Tensor, (usize, usize))> {
    let (h, w) = image_dims(img)?;
    let (r, c) = random_offset(h, w, size, rng)?;
    Ok((img.crop2d(r, c, size, size)?, (r, c)))
}

/// The offset draw behind [`random_crop`]: row first, then column.
pub fn random_offset(h: usize, w: usize, size: usize, rng: &mut Rng) -> Result<(usize, usize)> {
    if size == 0 || size > h || size > w {
        return Err(shape_err!("crop {size} does not fit image {h}×{w}"));
    }
    Ok((rng.range_inclusive(0, h - size), rng.range_inclusive(0, w - size)))
}

/// Random 224×224 training crop of a 3×256×256 image.
pub fn random_crop_224(img: &Tensor, rng: &mut Rng) -> Result<(Tensor, (usize, usize))> {
    if img.shape() != [3, 256, 256] {
        return Err(shape_err!("random_crop_224 needs a 3×256×256 image, got {:?}", img.shape()));
    }
    random_crop(img, 224, rng)
}
