//! Analytic renderer for grayscale silhouettes with known nuisance values.
//!
//! Each class is a 2-D region in canonical coordinates `[-1, 1]²`. A sample
//! point `q` in pixel space maps back to canonical space through
//! `p = (depth / h) · S⁻¹ (q − center)`, with `S = [[1, slant], [tilt, 1]]`,
//! `h` the half extent in pixels and `center` the image center plus
//! `(x_loc, y_loc)`. Pixel values are the covered fraction of 4×4 sample
//! points per pixel, laid out as a sheared grid so that all sixteen share no
//! row or column (each axis is resolved to 1/16 pixel).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, LatentLabels, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SHAPE_CLASSES: usize = 10;
pub const SHAPE_HALF_EXTENT: f64 = 6.0;
pub const SUPERSAMPLE: usize = 4;
const MIN_SIZE: usize = 32;

/// Inclusive sampling ranges per latent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentRanges {
    pub slant: (f64, f64),
    pub tilt: (f64, f64),
    pub x_loc: (f64, f64),
    pub y_loc: (f64, f64),
    pub depth: (f64, f64),
}

impl Default for LatentRanges {
    fn default() -> Self {
        LatentRanges { slant: (-0.5, 0.5), tilt: (-0.5, 0.5), x_loc: (-6.0, 6.0), y_loc: (-6.0, 6.0), depth: (1.0, 2.0) }
    }
}

impl LatentRanges {
    fn pairs(&self) -> [(f64, f64); 5] {
        [self.slant, self.tilt, self.x_loc, self.y_loc, self.depth]
    }

    pub fn contains(&self, l: &LatentLabels) -> bool {
        self.pairs().iter().zip(l.to_array()).all(|(&(lo, hi), v)| lo <= v && v <= hi)
    }

    /// Checks that the ranges are ordered and inside the renderable box
    /// (the default ranges).
    pub fn validate(&self) -> Result<()> {
        let outer = LatentRanges::default().pairs();
        for ((name, (lo, hi)), (olo, ohi)) in LatentLabels::NAMES.iter().zip(self.pairs()).zip(outer) {
            if !(olo <= lo && lo <= hi && hi <= ohi) {
                return Err(Error::Range(format!("{name} range [{lo}, {hi}] not inside [{olo}, {ohi}]")));
            }
        }
        Ok(())
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> LatentLabels {
        let mut v = [0.0; 5];
        for (out, (lo, hi)) in v.iter_mut().zip(self.pairs()) {
            *out = if lo < hi { rng.random_range(lo..=hi) } else { lo };
        }
        LatentLabels::from_array(v)
    }
}

fn inside(class: usize, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    let box_norm = u.abs().max(v.abs());
    match class {
        0 => r2 <= 1.0,
        1 => box_norm <= 0.8,
        2 => v <= 0.8 && u.abs() <= (v + 0.9) * (0.9 / 1.7),
        3 => (0.3025..=1.0).contains(&r2),
        4 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        5 => u.abs() + v.abs() <= 1.0,
        6 => r2.sqrt() <= 0.5 + 0.45 * (5.0 * v.atan2(u)).cos(),
        7 => r2 <= 1.0 && (u - 0.45) * (u - 0.45) + v * v > 0.49,
        8 => ((-0.8..=-0.3).contains(&u) && v.abs() <= 0.9) || ((0.4..=0.9).contains(&v) && u.abs() <= 0.8),
        _ => (0.55..=0.9).contains(&box_norm),
    }
}

/// Renders `class` under `latents` into a `[size, size, 1]` image.
pub fn synth_render(latents: &LatentLabels, class: usize, size: usize) -> Result<Tensor<f32>> {
    if class >= SHAPE_CLASSES {
        return Err(Error::Range(format!("shape class {class} (have {SHAPE_CLASSES})")));
    }
    if size < MIN_SIZE {
        return Err(Error::Range(format!("image size {size} below {MIN_SIZE}")));
    }
    if !LatentRanges::default().contains(latents) {
        return Err(Error::Range(format!("latents {latents:?} outside the renderable ranges")));
    }
    let LatentLabels { slant, tilt, x_loc, y_loc, depth } = *latents;
    let det = 1.0 - slant * tilt;
    let k = depth / (SHAPE_HALF_EXTENT * det);
    let (cx, cy) = (size as f64 / 2.0 + x_loc, size as f64 / 2.0 + y_loc);
    let fine = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let total = (SUPERSAMPLE * SUPERSAMPLE) as f32;
    let mut data = vec![0f32; size * size];
    for (i, row) in data.chunks_exact_mut(size).enumerate() {
        for (j, px) in row.iter_mut().enumerate() {
            let mut hits = 0u32;
            for a in 0..SUPERSAMPLE {
                for b in 0..SUPERSAMPLE {
                    let dy = (i as f64 + ((SUPERSAMPLE * a + b) as f64 + 0.5) / fine) - cy;
                    let dx = (j as f64 + ((SUPERSAMPLE * b + a) as f64 + 0.5) / fine) - cx;
                    let u = k * (dx - slant * dy);
                    let v = k * (dy - tilt * dx);
                    hits += inside(class, u, v) as u32;
                }
            }
            *px = hits as f32 / total;
        }
    }
    Tensor::new(vec![size, size, 1], data)
}

/// `count` renders of uniformly drawn classes (among the first `classes`)
/// with latents uniform in `ranges`. Deterministic per seed.
pub fn synth_dataset(count: usize, classes: usize, ranges: &LatentRanges, seed: u64) -> Result<Dataset> {
    if classes == 0 || classes > SHAPE_CLASSES {
        return Err(Error::Range(format!("{classes} classes requested, renderer has {SHAPE_CLASSES}")));
    }
    ranges.validate()?;
    let size = MIN_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = Vec::with_capacity(count);
    let mut latents = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * size * size);
    for _ in 0..count {
        let c = rng.random_range(0..classes);
        let l = ranges.draw(&mut rng);
        data.extend_from_slice(synth_render(&l, c, size)?.data());
        labels.push(c);
        latents.push(l);
    }
    Dataset::new(Tensor::new(vec![count, size, size, 1], data)?, Some(labels), Some(latents), Split::Whole)
}

/// Leading `len − len/6` items for training, the rest for testing.
pub fn split_train_test(d: &Dataset) -> Result<(Dataset, Dataset)> {
    let n = d.len();
    let cut = n - n / 6;
    let mut train = d.select(&(0..cut).collect::<Vec<_>>())?;
    let mut test = d.select(&(cut..n).collect::<Vec<_>>())?;
    train.split = Split::Train;
    test.split = Split::Test;
    Ok((train, test))
}
