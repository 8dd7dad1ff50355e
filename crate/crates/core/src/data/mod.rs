//! Datasets: IDX files, the raw CIFAR binary layout, latent sidecars and the
//! synthetic nuisance-labeled renderer.

mod cifar;
mod idx;
mod sidecar;
mod synth;

use std::fmt;

pub use cifar::{load_cifar_bin, parse_cifar_bin, CIFAR_RECORD};
pub use idx::{encode_idx_f32, encode_idx_labels, encode_idx_u8, load_idx, parse_idx_images, parse_idx_labels, write_idx_f32, write_idx_labels, write_idx_u8};
pub use sidecar::{decode_latents, decode_trace, encode_latents, encode_trace, read_latents, read_trace, write_latents, write_trace, LATENT_RECORD, TRACE_MAGIC};
pub use synth::{split_train_test, synth_dataset, synth_render, LatentRanges, SHAPE_CLASSES, SHAPE_HALF_EXTENT, SUPERSAMPLE};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ground-truth nuisance values of one synthetic image.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LatentLabels {
    /// Horizontal shear, radians.
    pub slant: f64,
    /// Vertical shear, radians.
    pub tilt: f64,
    /// Horizontal offset from the image center, pixels.
    pub x_loc: f64,
    /// Vertical offset from the image center, pixels.
    pub y_loc: f64,
    /// Inverse scale; 2 renders at half size.
    pub depth: f64,
}

impl LatentLabels {
    pub const NAMES: [&'static str; 5] = ["slant", "tilt", "x", "y", "depth"];

    pub fn to_array(self) -> [f64; 5] {
        [self.slant, self.tilt, self.x_loc, self.y_loc, self.depth]
    }

    pub fn from_array(v: [f64; 5]) -> Self {
        LatentLabels { slant: v[0], tilt: v[1], x_loc: v[2], y_loc: v[3], depth: v[4] }
    }

    /// Centered, unsheared, depth 1.
    pub fn identity() -> Self {
        LatentLabels { depth: 1.0, ..Default::default() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    #[default]
    Whole,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Whole => "whole",
        })
    }
}

/// Images `[N, H, W, C]` in `[0, 1]` with optional labels and latents.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Option<Vec<usize>>,
    pub latents: Option<Vec<LatentLabels>>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Option<Vec<usize>>, latents: Option<Vec<LatentLabels>>, split: Split) -> Result<Self> {
        let n = match images.shape() {
            [n, _, _, _] => *n,
            s => return Err(Error::dim(format!("images {s:?} are not [N, H, W, C]"))),
        };
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::dim(format!("{} labels for {n} images", l.len())));
            }
        }
        if let Some(l) = &latents {
            if l.len() != n {
                return Err(Error::dim(format!("{} latent records for {n} images", l.len())));
            }
        }
        Ok(Dataset { images, labels, latents, split })
    }

    /// Dataset with no items of the given shape, for
    /// zero-count corner cases.
    pub fn empty(shape: [usize; 3]) -> Self {
        Dataset { images: Tensor::zeros(&[0, shape[0], shape[1], shape[2]]), labels: Some(vec![]), latents: None, split: Split::Whole }
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[H, W, C]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels.as_deref().ok_or_else(|| Error::contract("dataset has no labels"))
    }

    pub fn latents(&self) -> Result<&[LatentLabels]> {
        self.latents.as_deref().ok_or_else(|| Error::contract("dataset has no latent labels"))
    }

    /// One more than the largest label.
    pub fn class_count(&self) -> usize {
        self.labels.as_ref().and_then(|l| l.iter().max()).map_or(0, |m| m + 1)
    }

    /// Items at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            images: self.images.select_outer(indices)?,
            labels: self.labels.as_ref().map(|v| indices.iter().map(|&i| v[i]).collect()),
            latents: self.latents.as_ref().map(|v| indices.iter().map(|&i| v[i]).collect()),
            split: self.split,
        })
    }

    /// The first `n` items.
    pub fn head(&self, n: usize) -> Result<Dataset> {
        self.select(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    /// Checks that every pixel lies in `[0, 1]`.
    pub fn check_pixels(&self) -> Result<()> {
        match self.images.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            Some(i) => Err(Error::Range(format!("pixel {i} has value {} outside [0, 1]", self.images.data()[i]))),
            None => Ok(()),
        }
    }
}
