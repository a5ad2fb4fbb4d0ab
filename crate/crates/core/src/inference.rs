//! Three-crop prediction: rescale, take the center, bottom-left and
//! upper-right crops, run each through the network in eval mode and average.

use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{read_ppm, AgeLabel, Preprocess, Record};
use crate::error::{shape_err, Error, Result};
use crate::layers::{softmax, Mode};
use crate::network::{self, NetworkSpec, ParamSet};
use crate::rng::Rng;
use crate::tensor::{argmax, Tensor};

/// Which vectors are averaged across the three crops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Averaging {
    /// Mean of the per-crop softmax outputs.
    #[default]
    Probability,
    /// Mean of the pre-softmax scores, then softmax.
    Score,
}

impl FromStr for Averaging {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probability" | "prob" => Ok(Averaging::Probability),
            "score" => Ok(Averaging::Score),
            _ => Err(Error::Config(format!("unknown averaging space {s:?}, expected probability or score"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropTriple {
    pub center: Tensor,
    pub bottom_left: Tensor,
    pub upper_right: Tensor,
}

impl CropTriple {
    pub fn as_array(&self) -> [&Tensor; 3] {
        [&self.center, &self.bottom_left, &self.upper_right]
    }
}

/// Top-left `(row, col)` of the center, bottom-left and upper-right
/// `crop`×`crop` windows of a `side`×`side` image.
pub fn crop_offsets(side: usize, crop: usize) -> Result<[(usize, usize); 3]> {
    if crop == 0 || crop > side {
        return Err(shape_err!("crop {crop} does not fit a {side}×{side} image"));
    }
    let m = side - crop;
    Ok([(m / 2, m / 2), (m, 0), (0, m)])
}

/// Crops of a square 3×S×S image.
pub fn crops_of(img: &Tensor, crop: usize) -> Result<CropTriple> {
    let side = match img.shape() {
        &[3, h, w] if h == w => h,
        s => return Err(shape_err!("three-crop needs a square 3×S×S image, got {s:?}")),
    };
    let [c, bl, ur] = crop_offsets(side, crop)?;
    Ok(CropTriple {
        center: img.crop2d(c.0, c.1, crop, crop)?,
        bottom_left: img.crop2d(bl.0, bl.1, crop, crop)?,
        upper_right: img.crop2d(ur.0, ur.1, crop, crop)?,
    })
}

/// The 224-pixel crops of a 3×256×256 image.
pub fn three_crops(img: &Tensor) -> Result<CropTriple> {
    if img.shape() != [3, 256, 256] {
        return Err(shape_err!("three_crops needs a 3×256×256 image, got {:?}", img.shape()));
    }
    crops_of(img, 224)
}

/// Elementwise mean of equally long vectors, accumulated in f64.
pub fn mean_vector(vectors: &[&[f32]]) -> Result<Vec<f32>> {
    let first = vectors.first().ok_or_else(|| Error::Input("nothing to average".into()))?;
    if vectors.iter().any(|v| v.len() != first.len()) {
        return Err(shape_err!("cannot average vectors of different lengths"));
    }
    let n = vectors.len() as f64;
    Ok((0..first.len())
        .map(|i| (vectors.iter().map(|v| v[i] as f64).sum::<f64>() / n) as f32)
        .collect())
}

/// Combines per-crop network outputs: softmax rows for probability
/// averaging, score rows for score averaging.
pub fn average_crops(rows: &[&[f32]], averaging: Averaging) -> Result<Vec<f32>> {
    let mean = mean_vector(rows)?;
    match averaging {
        Averaging::Probability => Ok(mean),
        Averaging::Score => {
            let k = mean.len();
            Ok(softmax(&Tensor::new(&[1, k], mean)?)?.into_data())
        }
    }
}

/// Evaluation views of already decoded images, batched through the network.
/// Returns one averaged probability vector per image.
pub fn predict_proba_many(
    spec: &NetworkSpec,
    params: &ParamSet,
    images: &[Tensor],
    pre: &Preprocess,
    averaging: Averaging,
) -> Result<Vec<Vec<f32>>> {
    pre.validate()?;
    // With no room to crop, the three windows coincide and one forward suffices.
    let views_per_image = if pre.crop < pre.rescale { 3 } else { 1 };
    let mut views = Vec::with_capacity(images.len() * views_per_image);
    for img in images {
        let scaled = pre.rescale_image(img)?;
        if views_per_image == 3 {
            let t = crops_of(&scaled, pre.crop)?;
            views.extend(t.as_array().into_iter().map(|c| pre.normalize(c.clone())));
        } else {
            views.push(pre.normalize(scaled));
        }
    }
    if views.is_empty() {
        return Ok(Vec::new());
    }
    let batch = crate::data::stack(&views)?;
    let pass = network::forward(spec, params, &batch, Mode::Eval, &mut Rng::new(0))?;
    let rows = match averaging {
        Averaging::Probability => &pass.probs,
        Averaging::Score => &pass.scores,
    };
    let k = rows.shape()[1];
    rows.data()
        .chunks(k * views_per_image)
        .map(|group| {
            let per_crop: Vec<&[f32]> = group.chunks(k).collect();
            if views_per_image == 1 {
                // Three identical crops: mean of equals is the vector itself.
                return average_crops(&[per_crop[0]; 3], averaging);
            }
            average_crops(&per_crop, averaging)
        })
        .collect()
}

/// Averaged class probabilities for one image of any size.
pub fn predict_proba(
    spec: &NetworkSpec,
    params: &ParamSet,
    img: &Tensor,
    pre: &Preprocess,
    averaging: Averaging,
) -> Result<Vec<f32>> {
    let mut out = predict_proba_many(spec, params, std::slice::from_ref(img), pre, averaging)?;
    Ok(out.remove(0))
}

/// Averaged probabilities for every record, decoding `chunk` images at a
/// time. The first unreadable image aborts the run.
pub fn predict_records(
    spec: &NetworkSpec,
    params: &ParamSet,
    records: &[Record],
    pre: &Preprocess,
    averaging: Averaging,
    chunk: usize,
) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(records.len());
    for group in records.chunks(chunk.max(1)) {
        let images: Vec<Tensor> = group.par_iter().map(|r| read_ppm(&r.path)).collect::<Result<_>>()?;
        out.extend(predict_proba_many(spec, params, &images, pre, averaging)?);
    }
    Ok(out)
}

/// Argmax of a probability vector, lowest index on ties.
pub fn label_from_proba(proba: &[f32]) -> Result<AgeLabel> {
    let i = argmax(proba).ok_or_else(|| Error::Input("empty probability vector".into()))?;
    AgeLabel::new(i)
}

pub fn predict_label(
    spec: &NetworkSpec,
    params: &ParamSet,
    img: &Tensor,
    pre: &Preprocess,
    averaging: Averaging,
) -> Result<AgeLabel> {
    label_from_proba(&predict_proba(spec, params, img, pre, averaging)?)
}
