//! Dataset ingestion and preprocessing: the age taxonomy, CSV manifests,
//! PPM images, rescale/crop geometry and mini-batch assembly.

pub mod image;
pub mod labels;
pub mod manifest;

use rayon::prelude::*;

pub use image::{decode_ppm, encode_ppm, read_ppm, rescale, rescale_to_256, random_crop_224, write_ppm};
pub use labels::{label_of, AgeLabel, LABELS, NUM_LABELS};
pub use manifest::{load_manifest, DatasetManifest, Record};

use crate::error::{shape_err, Error, Result};
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

/// Image geometry and normalization applied before the network sees a
/// picture. Training draws a random `crop`×`crop` window from the
/// `rescale`×`rescale` image; when the two are equal cropping is disabled.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocess {
    pub rescale: usize,
    pub crop: usize,
    /// Per-channel values subtracted after cropping.
    pub mean: Option<[f32; 3]>,
    /// Multiplier applied after mean subtraction.
    pub scale: f32,
}

impl Preprocess {
    /// 256/224 for a 224-pixel network input, otherwise rescale straight to
    /// the input size with no crop.
    pub fn for_input(input: [usize; 3]) -> Self {
        let side = input[1];
        let (rescale, crop) = if side == 224 { (256, 224) } else { (side, side) };
        Preprocess {
            rescale,
            crop,
            mean: None,
            scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.rescale {
            return Err(Error::Config(format!(
                "crop {} must lie in [1, rescale {}]",
                self.crop, self.rescale
            )));
        }
        if let Some(m) = self.mean {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("channel means must be finite".into()));
            }
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Config("pixel scale must be positive".into()));
        }
        Ok(())
    }

    /// Rescales to the working square.
    pub fn rescale_image(&self, img: &Tensor) -> Result<Tensor> {
        rescale(img, self.rescale, self.rescale)
    }

    /// `(x − mean[c]) · scale` on each channel plane.
    pub fn normalize(&self, mut img: Tensor) -> Tensor {
        let mean = self.mean.unwrap_or([0.0; 3]);
        if self.mean.is_none() && self.scale == 1.0 {
            return img;
        }
        let plane = img.len() / 3;
        for (c, ch) in img.data_mut().chunks_mut(plane).enumerate() {
            ch.iter_mut().for_each(|v| *v = (*v - mean[c]) * self.scale);
        }
        img
    }

    /// Training view of a decoded image: rescale, random crop, normalize.
    pub fn train_view(&self, img: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let scaled = self.rescale_image(img)?;
        let cropped = if self.crop < self.rescale {
            image::random_crop(&scaled, self.crop, rng)?.0
        } else {
            scaled
        };
        Ok(self.normalize(cropped))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// N×3×crop×crop.
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Stacks equally shaped C×H×W tensors into N×C×H×W.
pub fn stack(images: &[Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| shape_err!("cannot stack zero images"))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.len() * images.len());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(shape_err!("cannot stack {:?} with {:?}", img.shape(), shape));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::new(&full, data)
}

/// Lazily decoded mini-batches over a manifest.
///
/// Records are visited in manifest order, or in a permutation drawn from
/// `rng.fork(SHUFFLE)`. The crop of the record at position `i` of that order
/// uses `rng.fork(CROP).fork(i)`, so output does not depend on how decoding
/// is scheduled across threads.
pub struct Batches<'a> {
    records: &'a [Record],
    order: Vec<usize>,
    batch_size: usize,
    pre: Preprocess,
    crop_rng: Rng,
    next: usize,
}

pub fn batches<'a>(
    manifest: &'a DatasetManifest,
    batch_size: usize,
    shuffle: bool,
    rng: &Rng,
    pre: &Preprocess,
) -> Result<Batches<'a>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    pre.validate()?;
    let mut order: Vec<usize> = (0..manifest.records.len()).collect();
    if shuffle {
        rng.fork(stream::SHUFFLE).shuffle(&mut order);
    }
    Ok(Batches {
        records: &manifest.records,
        order,
        batch_size,
        pre: pre.clone(),
        crop_rng: rng.fork(stream::CROP),
        next: 0,
    })
}

impl Batches<'_> {
    /// Record indices in emission order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.order.len() {
            return None;
        }
        let start = self.next;
        let end = (start + self.batch_size).min(self.order.len());
        self.next = end;
        let views: Result<Vec<Tensor>> = (start..end)
            .into_par_iter()
            .map(|pos| {
                let rec = &self.records[self.order[pos]];
                let img = read_ppm(&rec.path)?;
                self.pre.train_view(&img, &mut self.crop_rng.fork(pos as u64))
            })
            .collect();
        let labels = self.order[start..end]
            .iter()
            .map(|&i| self.records[i].label.index())
            .collect();
        Some(views.and_then(|v| stack(&v)).map(|images| Batch { images, labels }))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.order.len() - self.next).div_ceil(self.batch_size);
        (n, Some(n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn synthetic(dir: &std::path::Path, n: usize, side: usize) -> DatasetManifest {
        let records = (0..n)
            .map(|i| {
                let img = Tensor::create(&[3, side, side], (i * 20 % 256) as f32).unwrap();
                let path = dir.join(format!("{i}.ppm"));
                write_ppm(&path, &img).unwrap();
                Record {
                    path,
                    label: AgeLabel::new(i % 8).unwrap(),
                    fold: None,
                    gender: None,
                }
            })
            .collect();
        DatasetManifest {
            records,
            source: PathBuf::new(),
        }
    }

    #[test]
    fn geometry_defaults() {
        assert_eq!(Preprocess::for_input([3, 224, 224]).rescale, 256);
        let mini = Preprocess::for_input([3, 32, 32]);
        assert_eq!((mini.rescale, mini.crop), (32, 32));
    }

    #[test]
    fn batch_sizes_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let m = synthetic(dir.path(), 10, 8);
        let pre = Preprocess::for_input([3, 8, 8]);
        let out: Vec<Batch> = batches(&m, 4, false, &Rng::new(0), &pre)
            .unwrap()
            .map(|b| b.unwrap())
            .collect();
        assert_eq!(out.iter().map(Batch::len).collect::<Vec<_>>(), [4, 4, 2]);
        assert_eq!(out[2].images.shape(), [2, 3, 8, 8]);
        let labels: Vec<usize> = out.iter().flat_map(|b| b.labels.clone()).collect();
        assert_eq!(labels, (0..10).map(|i| i % 8).collect::<Vec<_>>());
        // Pixel value identifies the record.
        assert_eq!(out[1].images.data()[0], 80.0);
    }

    #[test]
    fn shuffle_is_a_seeded_permutation() {
        let dir = tempfile::tempdir().unwrap();
        let m = synthetic(dir.path(), 10, 4);
        let pre = Preprocess::for_input([3, 4, 4]);
        let a = batches(&m, 3, true, &Rng::new(9), &pre).unwrap();
        let b = batches(&m, 3, true, &Rng::new(9), &pre).unwrap();
        assert_eq!(a.order(), b.order());
        let mut sorted = a.order().to_vec();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_ne!(a.order(), (0..10).collect::<Vec<_>>());
        let first: Vec<Batch> = a.map(|b| b.unwrap()).collect();
        let second: Vec<Batch> = b.map(|b| b.unwrap()).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn crops_are_deterministic_and_mean_subtracted() {
        let dir = tempfile::tempdir().unwrap();
        let m = synthetic(dir.path(), 3, 20);
        let pre = Preprocess {
            rescale: 20,
            crop: 16,
            mean: Some([10.0, 20.0, 30.0]),
            scale: 1.0,
        };
        let run = || -> Vec<Batch> { batches(&m, 2, false, &Rng::new(1), &pre).unwrap().map(|b| b.unwrap()).collect() };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a[0].images.shape(), [2, 3, 16, 16]);
        let plane = 256;
        let d = a[0].images.data();
        assert_eq!(d[plane], -20.0);
        assert_eq!(d[5 * plane], -10.0);
        assert!(d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn undecodable_image_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = synthetic(dir.path(), 2, 4);
        m.records[1].path = dir.path().join("missing.ppm");
        let pre = Preprocess::for_input([3, 4, 4]);
        let err = batches(&m, 2, false, &Rng::new(0), &pre).unwrap().next().unwrap().unwrap_err();
        assert!(err.to_string().contains("missing.ppm"));
    }

    #[test]
    fn zero_batch_size() {
        let m = DatasetManifest::default();
        let pre = Preprocess::for_input([3, 4, 4]);
        assert!(matches!(batches(&m, 0, false, &Rng::new(0), &pre), Err(Error::Config(_))));
    }
}
