//! Seeded 7-class pattern images standing in for face crops.
//!
//! Each class is an oriented colour grating. Orientation and tint depend on
//! the class; phase, frequency, brightness and pixel noise vary per image.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{write_manifest, Expression, ImageRecord, Posture};
use crate::error::Result;
use crate::gan::AU_COUNT;
use crate::imageio::save_image;
use crate::tensor::Tensor;

const TINTS: [[f64; 3]; 7] = [
    [1.0, 0.9, 0.2],
    [0.3, 0.3, 1.0],
    [0.4, 1.0, 0.3],
    [1.0, 0.5, 0.1],
    [0.2, 0.7, 0.9],
    [1.0, 0.1, 0.2],
    [0.7, 0.7, 0.7],
];

/// Independent stream per (seed, class, index).
pub fn image_seed(seed: u64, class: usize, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((class as u64) << 32)
        .wrapping_add(index as u64)
}

pub fn pattern_image(class: usize, resolution: usize, rng: &mut impl Rng) -> Tensor {
    let theta = class as f64 * PI / 7.0 + rng.random_range(-0.1..0.1);
    let cycles = 2.5 + rng.random_range(-0.5..0.5);
    let phase = rng.random_range(0.0..2.0 * PI);
    let brightness = rng.random_range(-0.15..0.15);
    let (sin, cos) = theta.sin_cos();
    let r = resolution as f64;
    let tint = TINTS[class];
    let plane = resolution * resolution;
    let mut data = vec![0.0; 3 * plane];
    for y in 0..resolution {
        for x in 0..resolution {
            let u = (x as f64 * cos + y as f64 * sin) / r;
            let wave = (2.0 * PI * cycles * u + phase).sin();
            for c in 0..3 {
                let noise = rng.random_range(-0.1..0.1);
                let v = 0.65 * tint[c] * wave + 0.25 * (tint[c] - 0.5) + brightness + noise;
                data[c * plane + y * resolution + x] = v.clamp(-1.0, 1.0);
            }
        }
    }
    Tensor::new([3, resolution, resolution], data).expect("shape")
}

/// Per-class reference action-unit vectors: three strongly active units per
/// class over a low baseline.
pub fn reference_aus() -> [Vec<f64>; 7] {
    std::array::from_fn(|c| {
        let mut au = vec![0.05; AU_COUNT];
        for k in [c, c + 7, (3 * c + 1) % AU_COUNT] {
            au[k] = 0.9;
        }
        au
    })
}

/// Reference AU jittered by ±0.05 and clipped to `[0,1]`.
pub fn sample_au(class: usize, rng: &mut impl Rng) -> Vec<f64> {
    reference_aus()[class]
        .iter()
        .map(|v| (v + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0))
        .collect()
}

/// Writes `per_class` PNGs per class under `dir/images` plus `dir/manifest.jsonl`.
pub fn write_corpus(
    dir: impl AsRef<Path>,
    per_class: usize,
    resolution: usize,
    seed: u64,
) -> Result<Vec<ImageRecord>> {
    let dir = dir.as_ref();
    let mut records = Vec::with_capacity(7 * per_class);
    for i in 0..per_class {
        for class in 0..7 {
            let mut rng = ChaCha8Rng::seed_from_u64(image_seed(seed, class, i));
            let img = pattern_image(class, resolution, &mut rng);
            let au = sample_au(class, &mut rng);
            let label = Expression::ALL[class];
            let id = format!("syn-{}-{i:04}", label.name().to_ascii_lowercase());
            let path = format!("images/{id}.png");
            save_image(dir.join(&path), &img)?;
            let mut rec = ImageRecord::collected(id, path, Some(label));
            rec.posture = Some(Posture::ALL[(i + class) % Posture::ALL.len()]);
            rec.au = Some(au);
            records.push(rec);
        }
    }
    write_manifest(dir.join("manifest.jsonl"), &records)?;
    Ok(records)
}
