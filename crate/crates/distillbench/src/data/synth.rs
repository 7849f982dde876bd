//! SYNTH-TINY: a deterministic generator of 16x16x3 colored-shape images
//! with 3 classes, sized for desk-scale tests.
//!
//! Class 0: filled square, red-dominant. Class 1: filled circle,
//! green-dominant. Class 2: cross, blue-dominant. Position, size, hue and
//! background vary per example under the seeded stream.

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::{LabeledDataset, Split};
use crate::config::DatasetId;

const SIDE: usize = 16;

pub fn generate_synth_tiny(n: usize, split: Split, seed: u64) -> LabeledDataset {
    // Train and test draw from disjoint streams of the same distribution.
    let stream_seed = seed ^ match split {
        Split::Train => 0x5352_4331,
        Split::Test => 0x5352_4332,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(stream_seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 3;
        images.push(render(class, &mut rng));
        labels.push(class);
    }
    LabeledDataset {
        images,
        labels,
        name: DatasetId::SynthTiny,
        split,
        num_classes: 3,
    }
}

fn render(class: usize, rng: &mut ChaCha12Rng) -> Array3<f64> {
    let bg: f64 = rng.gen_range(0.0..0.25);
    let mut img = Array3::from_elem((SIDE, SIDE, 3), bg);
    // light pixel noise
    for i in 0..SIDE {
        for j in 0..SIDE {
            let d: f64 = rng.gen_range(-0.03..0.03);
            for c in 0..3 {
                img[[i, j, c]] = (img[[i, j, c]] + d).clamp(0.0, 1.0);
            }
        }
    }
    let cx = rng.gen_range(5..SIDE - 5) as f64;
    let cy = rng.gen_range(5..SIDE - 5) as f64;
    let radius = rng.gen_range(2.5..4.5);
    let dominant = rng.gen_range(0.7..1.0);
    let minor = rng.gen_range(0.0..0.25);
    let mut color: [f64; 3] = [minor, minor, minor];
    color[class] = dominant;
    for i in 0..SIDE {
        for j in 0..SIDE {
            let dx = i as f64 - cx;
            let dy = j as f64 - cy;
            let inside = match class {
                0 => dx.abs() <= radius && dy.abs() <= radius,
                1 => (dx * dx + dy * dy).sqrt() <= radius,
                _ => dx.abs() <= 1.0 || dy.abs() <= 1.0,
            };
            let inside = inside
                && match class {
                    2 => dx.abs() <= radius + 1.0 && dy.abs() <= radius + 1.0,
                    _ => true,
                };
            if inside {
                for c in 0..3 {
                    img[[i, j, c]] = color[c].clamp(0.0, 1.0);
                }
            }
        }
    }
    img
}
