//! Synthetic crack images: a textured background with dark random-walk
//! polylines and their exact rasterised masks.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::data::{save_sample, Mask, SampleRecord};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

// Background: base gray level, per-channel tint, a 5×5 grid of low-frequency
// noise interpolated over the image, and per-pixel grain.
const BASE_LEVEL: (f64, f64) = (0.45, 0.75);
const TINT: f64 = 0.04;
const LOW_FREQ_GRID: usize = 5;
const LOW_FREQ_AMPLITUDE: f64 = 0.08;
const GRAIN: f64 = 0.03;
// Cracks.
const CRACK_FREE_PROBABILITY: f64 = 0.1;
const MAX_CRACKS: usize = 3;
const WALK_STEPS: (usize, usize) = (6, 13);
const STEP_LENGTH: (f64, f64) = (2.0, 4.0);
const HEADING_JITTER: f64 = 0.3;
const FIRST_WIDTH: (usize, usize) = (3, 5);
const WIDTH: (usize, usize) = (1, 5);
const MAX_POSITIVE_FRACTION: f64 = 0.09;
// Crack pixels keep this fraction of their luminance.
const LUMINANCE_KEPT: (f64, f64) = (0.2, 0.4);

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    key[16..24].copy_from_slice(b"synthgen");
    ChaCha8Rng::from_seed(key)
}

fn low_frequency(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let g = LOW_FREQ_GRID;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.random_range(-1.0..1.0)).collect();
    let coord = |i: usize| {
        let t = if size > 1 {
            i as f64 * (g - 1) as f64 / (size - 1) as f64
        } else {
            0.0
        };
        let i0 = (t.floor() as usize).min(g - 2);
        (i0, t - i0 as f64)
    };
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let (y0, fy) = coord(y);
        for x in 0..size {
            let (x0, fx) = coord(x);
            let at = |yy: usize, xx: usize| grid[yy * g + xx];
            out[y * size + x] = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + at(y0 + 1, x0) * fy * (1.0 - fx)
                + at(y0, x0 + 1) * (1.0 - fy) * fx
                + at(y0 + 1, x0 + 1) * fy * fx;
        }
    }
    out
}

// Pixels whose centre lies within `width / 2` of the segment p-q.
fn stamp_segment(m: &mut [bool], size: usize, p: (f64, f64), q: (f64, f64), width: f64) {
    let (dx, dy) = (q.0 - p.0, q.1 - p.1);
    let len2 = dx * dx + dy * dy;
    let r = width / 2.0;
    let lo_x = (p.0.min(q.0) - r).floor().max(0.0) as usize;
    let hi_x = ((p.0.max(q.0) + r).ceil().max(0.0) as usize).min(size);
    let lo_y = (p.1.min(q.1) - r).floor().max(0.0) as usize;
    let hi_y = ((p.1.max(q.1) + r).ceil().max(0.0) as usize).min(size);
    for y in lo_y..hi_y {
        for x in lo_x..hi_x {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = if len2 > 0.0 {
                (((cx - p.0) * dx + (cy - p.1) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (ex, ey) = (cx - p.0 - t * dx, cy - p.1 - t * dy);
            if (ex * ex + ey * ey).sqrt() <= r {
                m[y * size + x] = true;
            }
        }
    }
}

fn crack_walk(rng: &mut ChaCha8Rng, size: usize, width: usize) -> Vec<bool> {
    let scale = (size as f64 / 64.0).max(1.0);
    let jitter = Normal::new(0.0, HEADING_JITTER).expect("finite");
    let mut m = vec![false; size * size];
    let mut p = (
        rng.random_range(0.0..size as f64),
        rng.random_range(0.0..size as f64),
    );
    let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
    let steps = rng.random_range(WALK_STEPS.0..=WALK_STEPS.1);
    for _ in 0..steps {
        heading += jitter.sample(rng);
        let len = rng.random_range(STEP_LENGTH.0..STEP_LENGTH.1) * scale;
        let q = (p.0 + len * heading.cos(), p.1 + len * heading.sin());
        stamp_segment(&mut m, size, p, q, width as f64);
        p = q;
    }
    m
}

/// Generate sample `index` of the dataset identified by `seed`.
pub fn synth_sample(seed: u64, index: usize, size: usize) -> Result<SampleRecord> {
    if size == 0 {
        return Err(Error::Config(
            "synthetic image size must be positive".into(),
        ));
    }
    let mut rng = stream(seed, index as u64);
    let base = rng.random_range(BASE_LEVEL.0..BASE_LEVEL.1);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-TINT..TINT));
    let lf = low_frequency(&mut rng, size);
    let plane = size * size;
    let mut img = vec![0.0f64; 3 * plane];
    for (c, t) in tint.iter().enumerate() {
        for p in 0..plane {
            img[c * plane + p] =
                base + t + LOW_FREQ_AMPLITUDE * lf[p] + rng.random_range(-GRAIN..GRAIN);
        }
    }
    let mut mask = vec![false; plane];
    if !rng.random_bool(CRACK_FREE_PROBABILITY) {
        let cracks = rng.random_range(1..=MAX_CRACKS);
        for k in 0..cracks {
            let (lo, hi) = if k == 0 { FIRST_WIDTH } else { WIDTH };
            let width = rng.random_range(lo..=hi);
            let walk = crack_walk(&mut rng, size, width);
            let union = mask.iter().zip(&walk).filter(|(a, b)| **a || **b).count();
            if (union as f64) < MAX_POSITIVE_FRACTION * plane as f64 {
                mask.iter_mut().zip(&walk).for_each(|(a, b)| *a |= *b);
            }
        }
    }
    let kept = rng.random_range(LUMINANCE_KEPT.0..LUMINANCE_KEPT.1);
    let data = (0..3 * plane)
        .map(|i| {
            let v = if mask[i % plane] {
                img[i] * kept
            } else {
                img[i]
            };
            ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
        })
        .collect();
    SampleRecord::new(
        format!("{index:05}"),
        Tensor::new([3, size, size], data)?,
        Mask::new(size, size, mask.into_iter().map(u8::from).collect())?,
    )
}

/// `n` samples, deterministic in `seed`.
pub fn synth_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<SampleRecord>> {
    if n == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    (0..n)
        .into_par_iter()
        .map(|i| synth_sample(seed, i, size))
        .collect()
}

/// Generate and write `<out>/images/*.png` and `<out>/masks/*.png`.
pub fn synth_generate(n: usize, size: usize, seed: u64, out: &Path) -> Result<Vec<SampleRecord>> {
    let samples = synth_dataset(n, size, seed)?;
    samples.par_iter().try_for_each(|s| save_sample(out, s))?;
    Ok(samples)
}
