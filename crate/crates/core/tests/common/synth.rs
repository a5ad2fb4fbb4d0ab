use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use agecnn::data::{write_ppm, LABELS};
use agecnn::{Rng, Tensor};

pub const BACKGROUND: f32 = 40.0;
pub const BLOCK: f32 = 200.0;

/// 3×32×32 image of class `k`: a bright 16×8 block at row band `k / 4` and
/// column band `k % 4` on a flat background, plus uniform noise in ±`noise`.
pub fn block_image(k: usize, noise: f32, rng: &mut Rng) -> Tensor {
    let (r0, c0) = (k / 4 * 16, k % 4 * 8);
    let mut d = Vec::with_capacity(3 * 32 * 32);
    for _ in 0..3 {
        for r in 0..32 {
            for c in 0..32 {
                let base = if (r0..r0 + 16).contains(&r) && (c0..c0 + 8).contains(&c) { BLOCK } else { BACKGROUND };
                let jitter = (2.0 * rng.uniform() as f32 - 1.0) * noise;
                d.push((base + jitter).clamp(0.0, 255.0).round());
            }
        }
    }
    Tensor::new(&[3, 32, 32], d).unwrap()
}

/// Writes `per_class` images of each of the eight classes under `dir` and a
/// manifest listing them with folds `i % 2`. Returns the manifest path.
pub fn block_dataset(dir: &Path, per_class: usize, noise: f32, seed: u64) -> PathBuf {
    let mut rng = Rng::new(seed);
    let mut csv = String::from("path,label,fold\n");
    for i in 0..per_class {
        for (k, label) in LABELS.iter().enumerate() {
            let name = format!("img_{k}_{i}.ppm");
            write_ppm(dir.join(&name), &block_image(k, noise, &mut rng)).unwrap();
            let _ = writeln!(csv, "{name},{label},{}", i % 2);
        }
    }
    let path = dir.join("manifest.csv");
    std::fs::write(&path, csv).unwrap();
    path
}
