//! Ancestral sampling from the rendering model.

use rand::distr::weighted::WeightedIndex;
use rand::distr::{Bernoulli, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use super::arch::{ArchitectureSpec, Layer};
use super::infer::{top_down, LatentTrace, LayerLatents, TopDownOptions, Unpool};
use super::params::{check_prior, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{Real, Switch, Tensor};

/// Priors of the generative process.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerativeConfig {
    pub class_prior: Vec<f64>,
    /// Probabilities of UL, UR, LL, LR at every pooling cell.
    pub switch_prior: [f64; 4],
    /// Probability that a rectified unit is active.
    pub mask_prob: f64,
    /// Variance of the isotropic pixel noise.
    pub noise_var: f64,
    /// Top-level template per class (length `C` each). One-hot when absent.
    pub class_templates: Option<Vec<Vec<f64>>>,
    pub unpool: Unpool,
}

impl GenerativeConfig {
    /// Uniform priors, mask probability ½, no noise, switch placement.
    pub fn uniform(classes: usize) -> Self {
        GenerativeConfig {
            class_prior: vec![1.0 / classes as f64; classes],
            switch_prior: [0.25; 4],
            mask_prob: 0.5,
            noise_var: 0.0,
            class_templates: None,
            unpool: Unpool::Switch,
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        check_prior(&self.class_prior, classes).map_err(|e| Error::config(format!("class prior: {e}")))?;
        let total: f64 = self.switch_prior.iter().sum();
        if self.switch_prior.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::config(format!("switch prior {:?} is not a distribution", self.switch_prior)));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::config(format!("mask probability {} outside [0, 1]", self.mask_prob)));
        }
        if !(self.noise_var >= 0.0) || !self.noise_var.is_finite() {
            return Err(Error::config(format!("noise variance {} must be a finite non-negative number", self.noise_var)));
        }
        if let Some(t) = &self.class_templates {
            if t.len() != classes || t.iter().any(|row| row.len() != classes || row.iter().any(|v| !v.is_finite())) {
                return Err(Error::config(format!("class templates must be {classes} finite vectors of length {classes}")));
            }
        }
        Ok(())
    }

    /// Top-level vectors `[N, C]` for the given classes.
    pub fn class_vectors<T: Real>(&self, classes: &[usize], count: usize) -> Result<Tensor<T>> {
        let mut t = Tensor::zeros(&[classes.len(), count]);
        for (n, &c) in classes.iter().enumerate() {
            if c >= count {
                return Err(Error::dim(format!("class {c} out of range for {count} classes")));
            }
            let row = &mut t.data_mut()[n * count..(n + 1) * count];
            match &self.class_templates {
                Some(tpl) => row.iter_mut().zip(&tpl[c]).for_each(|(r, &v)| *r = T::from_f64_lossy(v)),
                None => row[c] = T::one(),
            }
        }
        Ok(t)
    }
}

/// Output of [`sample`].
#[derive(Clone, Debug)]
pub struct Sample<T: Real = f32> {
    pub images: Tensor<T>,
    /// Noise-free renders.
    pub means: Tensor<T>,
    /// Drawn classes, masks and switches.
    pub latents: LatentTrace<T>,
}

/// Draws `count` images: a class from the class prior, a Bernoulli mask for
/// every rectified unit, a switch for every pooling cell, a top-down render
/// of the class template and finally Gaussian pixel noise.
pub fn sample<T: Real>(config: &GenerativeConfig, params: &ModelParams<T>, arch: &ArchitectureSpec, count: usize, seed: u64) -> Result<Sample<T>> {
    let c = arch.classes();
    config.validate(c)?;
    params.validate(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class_dist = WeightedIndex::new(&config.class_prior).map_err(|e| Error::config(format!("class prior: {e}")))?;
    let switch_dist = WeightedIndex::new(config.switch_prior).map_err(|e| Error::config(format!("switch prior: {e}")))?;
    let mask_dist = Bernoulli::new(config.mask_prob).map_err(|e| Error::config(format!("mask probability: {e}")))?;

    let classes: Vec<usize> = (0..count).map(|_| class_dist.sample(&mut rng)).collect();
    let mut layers = Vec::with_capacity(arch.layers().len());
    for (i, layer) in arch.layers().iter().enumerate() {
        let len = count * arch.shapes()[i].iter().product::<usize>();
        let mut lat = LayerLatents::default();
        match layer {
            Layer::Conv { relu: true, .. } => lat.mask = Some((0..len).map(|_| mask_dist.sample(&mut rng)).collect()),
            Layer::MaxPool2x2 => lat.switches = Some((0..len).map(|_| Switch::ALL[switch_dist.sample(&mut rng)]).collect()),
            _ => {}
        }
        layers.push(lat);
    }
    let latents = LatentTrace { batch: count, layers, classes, posterior: None };
    let vectors = config.class_vectors::<T>(&latents.classes, c)?;
    let (means, _) = top_down(params, arch, &vectors, &latents, TopDownOptions::with_unpool(config.unpool))?;

    let mut images = means.clone();
    if config.noise_var > 0.0 {
        let noise = Normal::new(0.0, config.noise_var.sqrt()).map_err(|e| Error::config(format!("noise: {e}")))?;
        for v in images.data_mut() {
            *v = *v + T::from_f64_lossy(noise.sample(&mut rng));
        }
    }
    Ok(Sample { images, means, latents })
}
