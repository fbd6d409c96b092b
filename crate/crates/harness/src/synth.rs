//! Seeded synthetic textures: fractal value noise mixed into random colors,
//! overlaid with hard-edged shapes so images contain both smooth regions
//! and sharp boundaries.

use std::path::PathBuf;

use licw_core::diffcore::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image_io::{record, ImageRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

struct Lattice {
    size: usize,
    values: Vec<f32>,
}

impl Lattice {
    fn new(size: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { size, values: (0..size * size).map(|_| rng.gen::<f32>()).collect() }
    }

    fn at(&self, i: usize, j: usize) -> f32 {
        self.values[(i % self.size) * self.size + j % self.size]
    }

    /// Smoothstep-interpolated value at `(u, v)` in lattice units.
    fn sample(&self, u: f32, v: f32) -> f32 {
        let (i, j) = (u.floor() as usize, v.floor() as usize);
        let (fu, fv) = (u - u.floor(), v - v.floor());
        let (su, sv) = (fu * fu * (3.0 - 2.0 * fu), fv * fv * (3.0 - 2.0 * fv));
        let top = self.at(i, j) * (1.0 - sv) + self.at(i, j + 1) * sv;
        let bottom = self.at(i + 1, j) * (1.0 - sv) + self.at(i + 1, j + 1) * sv;
        top * (1.0 - su) + bottom * su
    }
}

fn fractal(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let base = rng.gen_range(4.0..12.0f32);
    let octaves: Vec<(Lattice, f32, f32)> = (0..4)
        .map(|o| {
            let cells = base * (1u32 << o) as f32;
            (Lattice::new(cells as usize + 2, rng), cells, 0.5f32.powi(o as i32))
        })
        .collect();
    let norm: f32 = octaves.iter().map(|o| o.2).sum();
    (0..h * w)
        .map(|p| {
            let (y, x) = ((p / w) as f32 / h as f32, (p % w) as f32 / w as f32);
            octaves.iter().map(|(l, cells, amp)| amp * l.sample(y * cells, x * cells)).sum::<f32>() / norm
        })
        .collect()
}

/// One `1 x 3 x h x w` texture.
pub fn texture(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = fractal(h, w, &mut rng);
    let detail = fractal(h, w, &mut rng);
    let dark: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..0.5));
    let light: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.5..1.0));
    let mut img: Vec<[f32; 3]> = noise
        .iter()
        .zip(&detail)
        .map(|(&n, &d)| std::array::from_fn(|c| dark[c] + (light[c] - dark[c]) * n + 0.15 * (d - 0.5)))
        .collect();

    for _ in 0..rng.gen_range(2..6) {
        let color: [f32; 3] = std::array::from_fn(|_| rng.gen::<f32>());
        let alpha = rng.gen_range(0.4..0.9f32);
        if rng.gen_bool(0.5) {
            let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
            let (y1, x1) = ((y0 + rng.gen_range(h / 8..h / 2)).min(h), (x0 + rng.gen_range(w / 8..w / 2)).min(w));
            for y in y0..y1 {
                for x in x0..x1 {
                    blend(&mut img[y * w + x], &color, alpha);
                }
            }
        } else {
            // half-plane split along a random line
            let (cy, cx) = (rng.gen_range(0.0..h as f32), rng.gen_range(0.0..w as f32));
            let angle = rng.gen_range(0.0..std::f32::consts::PI);
            let (s, c) = angle.sin_cos();
            let width = rng.gen_range(1.0..4.0f32);
            for (p, px) in img.iter_mut().enumerate() {
                let d = ((p / w) as f32 - cy) * c - ((p % w) as f32 - cx) * s;
                if d.abs() < width {
                    blend(px, &color, alpha);
                }
            }
        }
    }
    let plane = h * w;
    Tensor::from_fn(vec![1, 3, h, w], |i| img[i % plane][i / plane].clamp(0.0, 1.0))
}

fn blend(px: &mut [f32; 3], color: &[f32; 3], alpha: f32) {
    for c in 0..3 {
        px[c] = px[c] * (1.0 - alpha) + color[c] * alpha;
    }
}

pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Vec<ImageRecord>> {
    (0..spec.count)
        .map(|k| {
            let seed = spec.seed.wrapping_mul(1_000_003).wrapping_add(k as u64);
            let source = PathBuf::from(format!("synthetic-{}-{k:03}", spec.seed));
            record(texture(spec.height, spec.width, seed), source, 32)
        })
        .collect()
}
