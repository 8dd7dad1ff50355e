//! Pixel values as explicit sums over rendering paths.

use super::arch::{ArchitectureSpec, Layer};
use super::infer::{LatentTrace, Unpool};
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::{conv_padding, Real, Tensor};

/// Largest spatial extent accepted anywhere in the stack.
pub const MAX_PATH_EXTENT: usize = 8;
/// Largest number of convolutions accepted.
pub const MAX_PATH_CONVS: usize = 2;

struct Walk<'a> {
    arch: &'a ArchitectureSpec,
    filters: Vec<Option<(Vec<f64>, [usize; 4])>>,
    masks: Vec<Option<&'a [bool]>>,
    switches: Vec<Option<&'a [usize]>>,
    unpool: Unpool,
    item: usize,
}

impl Walk<'_> {
    /// Follows every path from unit `(y, x, ch)` of layer `layer`'s output
    /// down to the pixels, accumulating `weight` times the path product.
    fn descend(&self, layer: usize, y: usize, x: usize, ch: usize, weight: f64, image: &mut [f64]) {
        let [oh, ow, oc] = self.arch.shapes()[layer];
        let [ih, iw, ic] = self.arch.input_of(layer);
        let below = |img: &mut [f64], yy: usize, xx: usize, cc: usize, w: f64| {
            if layer == 0 {
                img[(yy * iw + xx) * ic + cc] += w;
            } else {
                self.descend(layer - 1, yy, xx, cc, w, img);
            }
        };
        match self.arch.layers()[layer] {
            Layer::Softmax => below(image, y, x, ch, weight),
            Layer::MeanPool(k) => {
                for dy in 0..k {
                    for dx in 0..k {
                        below(image, y * k + dy, x * k + dx, ch, weight);
                    }
                }
            }
            Layer::MaxPool2x2 => match self.unpool {
                Unpool::Nearest => {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            below(image, 2 * y + dy, 2 * x + dx, ch, weight);
                        }
                    }
                }
                Unpool::Switch => {
                    let sw = self.switches[layer].expect("checked")[((self.item * oh + y) * ow + x) * oc + ch];
                    below(image, 2 * y + sw / 2, 2 * x + sw % 2, ch, weight);
                }
            },
            Layer::Conv { mode, .. } => {
                if let Some(mask) = self.masks[layer] {
                    if !mask[((self.item * oh + y) * ow + x) * oc + ch] {
                        return;
                    }
                }
                let (f, [_, kh, kw, cin]) = self.filters[layer].as_ref().expect("conv layer");
                let (ph, pw) = (conv_padding(mode, *kh).expect("validated"), conv_padding(mode, *kw).expect("validated"));
                for dy in 0..*kh {
                    let Some(iy) = (y + dy).checked_sub(ph).filter(|&v| v < ih) else { continue };
                    for dx in 0..*kw {
                        let Some(ix) = (x + dx).checked_sub(pw).filter(|&v| v < iw) else { continue };
                        for ci in 0..*cin {
                            let lambda = f[((ch * kh + dy) * kw + dx) * cin + ci];
                            below(image, iy, ix, ci, weight * lambda);
                        }
                    }
                }
            }
        }
    }
}

/// Renders each item by enumerating every path from the class units to every
/// pixel, multiplying filter weights and unit activations along the way.
/// `class_vectors` is `[N, C]`. Restricted to stacks with at most
/// [`MAX_PATH_CONVS`] convolutions and spatial extents of at most
/// [`MAX_PATH_EXTENT`].
pub fn sum_over_paths<T: Real>(
    params: &ModelParams<T>,
    arch: &ArchitectureSpec,
    class_vectors: &Tensor<T>,
    trace: &LatentTrace<T>,
    unpool: Unpool,
) -> Result<Tensor<f64>> {
    let convs = arch.conv_layers().len();
    let widest = arch.shapes().iter().chain(std::iter::once(&arch.input())).map(|s| s[0].max(s[1])).max().unwrap_or(0);
    if convs > MAX_PATH_CONVS || widest > MAX_PATH_EXTENT {
        return Err(Error::Size(format!(
            "path enumeration limited to {MAX_PATH_CONVS} convolutions and extent {MAX_PATH_EXTENT}; got {convs} and {widest}"
        )));
    }
    params.validate(arch)?;
    trace.check(arch, unpool)?;
    let c = arch.classes();
    if class_vectors.shape() != [trace.batch, c] {
        return Err(Error::dim(format!("class vectors {:?}, expected {:?}", class_vectors.shape(), [trace.batch, c])));
    }

    let mut filters = vec![None; arch.layers().len()];
    for (k, &i) in arch.conv_layers().iter().enumerate() {
        let f = &params.convs[k].filters;
        let s = f.shape();
        filters[i] = Some((f.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(), [s[0], s[1], s[2], s[3]]));
    }
    let masks = trace.layers.iter().map(|l| l.mask.as_deref()).collect();
    let switch_index: Vec<Option<Vec<usize>>> = trace.layers.iter().map(|l| l.switches.as_ref().map(|s| s.iter().map(|&v| v as usize).collect())).collect();
    let switches = switch_index.iter().map(|s| s.as_deref()).collect();

    let [h, w, ch] = arch.input();
    let per_item = h * w * ch;
    let mut out = vec![0.0; trace.batch * per_item];
    let mut walk = Walk { arch, filters, masks, switches, unpool, item: 0 };
    let top = arch.layers().len() - 1;
    for item in 0..trace.batch {
        walk.item = item;
        let image = &mut out[item * per_item..(item + 1) * per_item];
        for class in 0..c {
            let v = class_vectors.data()[item * c + class].to_f64().unwrap_or(f64::NAN);
            if v != 0.0 {
                walk.descend(top, 0, 0, class, v, image);
            }
        }
    }
    Tensor::new(vec![trace.batch, h, w, ch], out)
}
