//! Procedural scenes: a flat background with a few coloured rectangles and
//! discs, one class per shape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LabelMap, Sample};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

pub const NOISE_STD: f64 = 0.05;
pub const MIN_SIDE: usize = 8;

/// Base colour of a class. Class 0 is a dark grey; the others are spread
/// around the hue circle.
pub fn class_color(class: usize, n_classes: usize) -> [f32; 3] {
    if class == 0 {
        return [0.2, 0.2, 0.2];
    }
    let hue = (class - 1) as f32 / (n_classes - 1) as f32 * 6.0;
    let f = |n: f32| {
        let k = (n + hue) % 6.0;
        0.9 - 0.7 * (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [f(5.0), f(3.0), f(1.0)]
}

enum Shape {
    Rect { y0: usize, x0: usize, y1: usize, x1: usize },
    Disc { cy: f32, cx: f32, r: f32 },
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => (y0..y1).contains(&y) && (x0..x1).contains(&x),
            Shape::Disc { cy, cx, r } => {
                let (dy, dx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
                dy * dy + dx * dx <= r * r
            }
        }
    }

    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let short = h.min(w) as f32;
        if rng.gen_bool(0.5) {
            let sh = rng.gen_range((h / 4).max(2)..=(h / 2).max(2));
            let sw = rng.gen_range((w / 4).max(2)..=(w / 2).max(2));
            let y0 = rng.gen_range(0..=h - sh);
            let x0 = rng.gen_range(0..=w - sw);
            Shape::Rect { y0, x0, y1: y0 + sh, x1: x0 + sw }
        } else {
            let r = rng.gen_range(short / 8.0..=short / 4.0);
            Shape::Disc {
                cy: rng.gen_range(r..=h as f32 - r),
                cx: rng.gen_range(r..=w as f32 - r),
                r,
            }
        }
    }
}

/// One scene; sample `index` of the dataset drawn from `seed`.
pub fn synth_sample(seed: u64, index: u64, height: usize, width: usize, n_classes: usize) -> Result<Sample> {
    if n_classes < 2 || n_classes > 255 {
        return Err(Error::Config(format!("synthetic data needs 2..=255 classes, got {n_classes}")));
    }
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(Error::Config(format!(
            "synthetic images must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let n_shapes = rng.gen_range(1..=4);
    let mut labels = vec![0u32; height * width];
    for _ in 0..n_shapes {
        let class = rng.gen_range(1..n_classes) as u32;
        let shape = Shape::random(&mut rng, height, width);
        for y in 0..height {
            for x in 0..width {
                if shape.contains(y, x) {
                    labels[y * width + x] = class;
                }
            }
        }
    }
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let mut data = Vec::with_capacity(height * width * 3);
    for &l in &labels {
        let base = class_color(l as usize, n_classes);
        data.extend(base.iter().map(|&c| (c + noise.sample(&mut rng) as f32).clamp(0.0, 1.0)));
    }
    Ok(Sample {
        image: Tensor::new(vec![height, width, 3], data)?,
        label: LabelMap::new(height, width, labels)?,
    })
}

/// `n_samples` scenes. Each sample has its own random stream, so the result
/// does not depend on how generation is scheduled.
pub fn synth_dataset(seed: u64, n_samples: usize, height: usize, width: usize, n_classes: usize) -> Result<Vec<Sample>> {
    par::map_range(n_samples, |i| synth_sample(seed, i as u64, height, width, n_classes))
        .into_iter()
        .collect()
}
