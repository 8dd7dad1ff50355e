use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rows of one batch: `labeled` indexes the labeled set, `unlabeled` the
/// unlabeled set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchIndices {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Images with the labeled half first.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<Option<usize>>,
}

fn epoch_rng(seed: u64, epoch: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * epoch + stream);
    rng
}

/// One epoch of batches. The labeled indices are tiled up to the size of
/// the unlabeled set; both lists are shuffled with epoch-dependent streams
/// and cut into halves of `batch_size / 2`; a trailing remainder is dropped.
pub fn make_batches(n_labeled: usize, n_unlabeled: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<BatchIndices>> {
    if n_labeled == 0 || n_unlabeled == 0 {
        return Err(Error::config(format!("need labeled and unlabeled items, have {n_labeled} and {n_unlabeled}")));
    }
    if batch_size < 2 || !batch_size.is_multiple_of(2) {
        return Err(Error::config(format!("batch_size {batch_size} must be even and at least 2")));
    }
    let half = batch_size / 2;
    if half > n_unlabeled {
        return Err(Error::config(format!("half batch {half} exceeds the {n_unlabeled} unlabeled items")));
    }
    let mut tiled: Vec<usize> = (0..n_unlabeled).map(|i| i % n_labeled).collect();
    let mut unlabeled: Vec<usize> = (0..n_unlabeled).collect();
    tiled.shuffle(&mut epoch_rng(seed, epoch, 0));
    unlabeled.shuffle(&mut epoch_rng(seed, epoch, 1));
    Ok(tiled
        .chunks_exact(half)
        .zip(unlabeled.chunks_exact(half))
        .map(|(l, u)| BatchIndices { labeled: l.to_vec(), unlabeled: u.to_vec() })
        .collect())
}

pub fn assemble_batch(labeled: &Dataset, unlabeled: &Dataset, idx: &BatchIndices) -> Result<Batch> {
    let l = labeled.select(&idx.labeled)?;
    let u = unlabeled.select(&idx.unlabeled)?;
    let images = Tensor::concat_outer(&[&l.images, &u.images])?;
    let mut labels: Vec<Option<usize>> = l.labels()?.iter().map(|&c| Some(c)).collect();
    labels.resize(labels.len() + idx.unlabeled.len(), None);
    Ok(Batch { images, labels })
}

/// `n_labeled / classes` indices per class, drawn without replacement and
/// returned in ascending order.
pub fn select_labeled_subset(labels: &[usize], classes: usize, n_labeled: usize, seed: u64) -> Result<Vec<usize>> {
    if classes == 0 || !n_labeled.is_multiple_of(classes) {
        return Err(Error::config(format!("{n_labeled} labeled items cannot be split evenly over {classes} classes")));
    }
    let per_class = n_labeled / classes;
    let mut by_class = vec![Vec::new(); classes];
    for (i, &c) in labels.iter().enumerate() {
        by_class.get_mut(c).ok_or_else(|| Error::dim(format!("label {c} out of range for {classes} classes")))?.push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_labeled);
    for (c, items) in by_class.iter_mut().enumerate() {
        if items.len() < per_class {
            return Err(Error::config(format!("class {c} has {} items, {per_class} requested", items.len())));
        }
        let (chosen, _) = items.partial_shuffle(&mut rng, per_class);
        out.extend_from_slice(chosen);
    }
    out.sort_unstable();
    Ok(out)
}

/// Labeled and unlabeled training sets drawn from `train`: a class-balanced
/// labeled subset of `n_labeled` items and a uniform unlabeled subset of
/// `n_unlabeled` items (all of `train` when `None` or larger), both in
/// ascending index order. The unlabeled set carries no labels.
pub fn semi_supervised_sets(train: &Dataset, classes: usize, n_labeled: usize, n_unlabeled: Option<usize>, seed: u64) -> Result<(Dataset, Dataset)> {
    let labeled = train.select(&select_labeled_subset(train.labels()?, classes, n_labeled, seed)?)?;
    let n = train.len();
    let picked = match n_unlabeled {
        Some(k) if k < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1);
            let mut v = index::sample(&mut rng, n, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    };
    let pool = train.select(&picked)?;
    let unlabeled = Dataset::new(pool.images, None, pool.latents, pool.split)?;
    Ok((labeled, unlabeled))
}
