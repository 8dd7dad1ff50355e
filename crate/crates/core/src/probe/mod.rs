//! Linear decodability of generative latents from layer activations.

mod bins;
mod decode;
mod pca;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use bins::{quantize_bins, BinEdges};
pub use decode::{decode_coordinates, error_rate, linear_decode, standardized_coordinates, DecodeOptions, Logistic};
pub use pca::{pca_fit, pca_fit_exact, pca_fit_randomized, Pca, EXACT_FEATURES, OVERSAMPLE, SUBSPACE_ITERATIONS};

use crate::data::{split_train_test, Dataset, LatentLabels};
use crate::error::{Error, Result};
use crate::model::{bottom_up, ArchitectureSpec, Layer, ModelParams, Phase};
use crate::tensor::Tensor;

pub const CLASS_LATENT: &str = "class";
pub const REPORT_HEADER: &str = "layer\tlatent\terror\tchance\tcontrol";

/// Row-major `[rows, cols]` activation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Features {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows * cols != data.len() || cols == 0 {
            return Err(Error::dim(format!("{} values cannot form {rows}x{cols} features", data.len())));
        }
        Ok(Features { rows, cols, data })
    }

    /// One row per outer index, every other axis flattened.
    pub fn flatten(t: &Tensor<f32>) -> Result<Self> {
        let rows = *t.shape().first().ok_or_else(|| Error::dim("scalar tensor has no items"))?;
        let cols = t.shape()[1..].iter().product();
        Features::new(rows, cols, t.data().to_vec())
    }

    /// Per-channel mean over the spatial axes of an NHWC tensor.
    pub fn pooled(t: &Tensor<f32>) -> Result<Self> {
        let (n, h, w, c) = t.nhwc()?;
        let mut data = vec![0.0f32; n * c];
        for (item, out) in t.data().chunks_exact(h * w * c).zip(data.chunks_exact_mut(c)) {
            for px in item.chunks_exact(c) {
                out.iter_mut().zip(px).for_each(|(o, &v)| *o += v);
            }
            out.iter_mut().for_each(|o| *o /= (h * w) as f32);
        }
        Features::new(n, c, data)
    }

    fn append(&mut self, other: Features) -> Result<()> {
        if self.rows > 0 && other.cols != self.cols {
            return Err(Error::dim(format!("cannot append {} features to {}", other.cols, self.cols)));
        }
        self.cols = other.cols;
        self.rows += other.rows;
        self.data.extend(other.data);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeOptions {
    pub decode: DecodeOptions,
    pub bins: usize,
    /// Average activations over space instead of flattening them.
    pub pooled: bool,
    /// Items per bottom-up pass.
    pub chunk: usize,
    /// Seed of the permuted-label control.
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions { decode: DecodeOptions::default(), bins: 10, pooled: false, chunk: 500, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    /// 0 is the image, `i + 1` the output of layer `i`.
    pub depth: usize,
    pub layer: String,
    pub latent: String,
    /// Test error (%).
    pub error: f64,
    /// Test error (%) with labels shuffled within each split.
    pub control: f64,
}

/// Decoding errors per (layer, latent).
#[derive(Clone, Debug, PartialEq)]
pub struct DecodingReport {
    pub chance: f64,
    pub test_items: usize,
    pub rows: Vec<ProbeRow>,
}

impl DecodingReport {
    pub fn get(&self, depth: usize, latent: &str) -> Option<&ProbeRow> {
        self.rows.iter().find(|r| r.depth == depth && r.latent == latent)
    }

    /// Standard error (percentage points) of an error rate at chance.
    pub fn chance_standard_error(&self) -> f64 {
        let p = self.chance / 100.0;
        100.0 * (p * (1.0 - p) / self.test_items as f64).sqrt()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            writeln!(s, "{}\t{}\t{}\t{}\t{}", r.layer, r.latent, r.error, self.chance, r.control).expect("writing to a string");
        }
        s
    }
}

/// Activations entering the probe at `depth`: the images for 0, otherwise
/// the eval-mode output of layer `depth - 1`.
pub fn layer_features(params: &ModelParams<f32>, arch: &ArchitectureSpec, images: &Tensor<f32>, depth: usize, pooled: bool, chunk: usize) -> Result<Features> {
    let convert = |t: &Tensor<f32>| if pooled { Features::pooled(t) } else { Features::flatten(t) };
    if depth == 0 {
        return convert(images);
    }
    let n = images.shape()[0];
    let mut out = Features { rows: 0, cols: 0, data: Vec::new() };
    let mut start = 0;
    while start < n {
        let end = (start + chunk.max(1)).min(n);
        let trace = bottom_up(params, arch, &images.slice_outer(start, end)?, Phase::Eval)?;
        let act = trace.layers[depth - 1].activation.as_ref().expect("bottom-up records activations");
        out.append(convert(act)?)?;
        start = end;
    }
    Ok(out)
}

fn permuted(labels: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v = labels.to_vec();
    v.shuffle(rng);
    v
}

struct Target {
    name: String,
    classes: usize,
    train: Vec<usize>,
    test: Vec<usize>,
    train_control: Vec<usize>,
    test_control: Vec<usize>,
}

fn targets(train: &Dataset, test: &Dataset, opts: &ProbeOptions) -> Result<Vec<Target>> {
    let lat_tr = train.latents()?;
    let lat_te = test.latents()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::new();
    for (j, name) in LatentLabels::NAMES.iter().enumerate() {
        let vtr: Vec<f64> = lat_tr.iter().map(|l| l.to_array()[j]).collect();
        let vte: Vec<f64> = lat_te.iter().map(|l| l.to_array()[j]).collect();
        let edges = BinEdges::fit(&vtr, opts.bins)?;
        let (tr, te) = (edges.assign_all(&vtr), edges.assign_all(&vte));
        out.push(Target {
            name: (*name).to_string(),
            classes: opts.bins,
            train_control: permuted(&tr, &mut rng),
            test_control: permuted(&te, &mut rng),
            train: tr,
            test: te,
        });
    }
    let (ctr, cte) = (train.labels()?.to_vec(), test.labels()?.to_vec());
    let classes = ctr.iter().chain(&cte).max().map_or(0, |m| m + 1);
    out.push(Target {
        name: CLASS_LATENT.to_string(),
        classes,
        train_control: permuted(&ctr, &mut rng),
        test_control: permuted(&cte, &mut rng),
        train: ctr,
        test: cte,
    });
    Ok(out)
}

/// Splits `data` into probe train and test parts, extracts activations at
/// the image and at every layer below the softmax, and decodes each of the
/// five latents (binned) and the class from the leading principal
/// components.
pub fn run_probe(params: &ModelParams<f32>, arch: &ArchitectureSpec, data: &Dataset, opts: &ProbeOptions) -> Result<DecodingReport> {
    params.validate(arch)?;
    if data.image_shape() != arch.input() {
        return Err(Error::contract(format!("dataset images {:?} do not match architecture input {:?}", data.image_shape(), arch.input())));
    }
    let (train, test) = split_train_test(data)?;
    if test.is_empty() {
        return Err(Error::config(format!("{} items leave no probe test split", data.len())));
    }
    let targets = targets(&train, &test, opts)?;
    let mut names = vec!["0:input".to_string()];
    for (i, layer) in arch.layers().iter().enumerate() {
        if *layer != Layer::Softmax {
            names.push(format!("{}:{layer}", i + 1));
        }
    }
    let mut rows = Vec::new();
    for (depth, name) in names.iter().enumerate() {
        let ftr = layer_features(params, arch, &train.images, depth, opts.pooled, opts.chunk)?;
        let fte = layer_features(params, arch, &test.images, depth, opts.pooled, opts.chunk)?;
        let k = opts.decode.components.min(ftr.cols);
        let pca = pca_fit(&ftr, k)?;
        let ztr = standardized_coordinates(&pca, &ftr)?;
        let zte = standardized_coordinates(&pca, &fte)?;
        drop((ftr, fte));
        for t in &targets {
            let error = decode_coordinates(&ztr, &zte, k, &t.train, &t.test, t.classes, &opts.decode)?;
            let control = decode_coordinates(&ztr, &zte, k, &t.train_control, &t.test_control, t.classes, &opts.decode)?;
            rows.push(ProbeRow { depth, layer: name.clone(), latent: t.name.clone(), error, control });
        }
    }
    Ok(DecodingReport { chance: 100.0 * (1.0 - 1.0 / opts.bins as f64), test_items: test.len(), rows })
}

#[cfg(test)]
mod tests;
