use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arch::{ArchitectureSpec, Layer};
use crate::error::{Error, Result};
use crate::tensor::{Real, RunningStats, Tape, Tensor, Var};

/// Filters and batch-norm state of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T: Real = f32> {
    /// `[out, kh, kw, in]`, shared by the bottom-up and top-down passes.
    pub filters: Tensor<T>,
    pub gamma: Option<Tensor<T>>,
    pub beta: Option<Tensor<T>>,
    pub running: Option<RunningStats<T>>,
}

/// All learnable state of a model, one [`ConvParams`] per convolution in
/// layer order, plus the class prior.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    pub convs: Vec<ConvParams<T>>,
    pub class_prior: Vec<f64>,
}

impl<T: Real> ModelParams<T> {
    /// Filters drawn from `U(-1/√fan_in, 1/√fan_in)`, batch-norm scale 1 and
    /// shift 0, uniform class prior.
    pub fn init(arch: &ArchitectureSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        for (i, layer) in arch.layers().iter().enumerate() {
            if let Layer::Conv { out_channels, kh, kw, batchnorm, .. } = *layer {
                let cin = arch.input_of(i)[2];
                let bound = 1.0 / ((kh * kw * cin) as f64).sqrt();
                let filters = Tensor::from_fn(&[out_channels, kh, kw, cin], |_| T::from_f64_lossy(rng.random_range(-bound..bound))).with_grad();
                let (gamma, beta, running) = if batchnorm {
                    (
                        Some(Tensor::full(&[out_channels], T::one()).with_grad()),
                        Some(Tensor::zeros(&[out_channels]).with_grad()),
                        Some(RunningStats::new(out_channels)),
                    )
                } else {
                    (None, None, None)
                };
                convs.push(ConvParams { filters, gamma, beta, running });
            }
        }
        let classes = arch.classes();
        ModelParams { convs, class_prior: vec![1.0 / classes as f64; classes] }
    }

    /// Checks tensor shapes against `arch` and validates the class prior.
    pub fn validate(&self, arch: &ArchitectureSpec) -> Result<()> {
        let conv_layers = arch.conv_layers();
        if conv_layers.len() != self.convs.len() {
            return Err(Error::contract(format!("architecture has {} convolutions, parameters have {}", conv_layers.len(), self.convs.len())));
        }
        for (p, &i) in self.convs.iter().zip(&conv_layers) {
            let Layer::Conv { out_channels, kh, kw, batchnorm, .. } = arch.layers()[i] else { unreachable!() };
            let cin = arch.input_of(i)[2];
            if p.filters.shape() != [out_channels, kh, kw, cin] {
                return Err(Error::contract(format!("layer {i}: filters {:?}, expected {:?}", p.filters.shape(), [out_channels, kh, kw, cin])));
            }
            let bn_ok = match (&p.gamma, &p.beta, &p.running) {
                (Some(g), Some(b), Some(r)) => {
                    batchnorm && g.shape() == [out_channels] && b.shape() == [out_channels] && r.mean.len() == out_channels && r.var.len() == out_channels
                }
                (None, None, None) => !batchnorm,
                _ => false,
            };
            if !bn_ok {
                return Err(Error::contract(format!("layer {i}: batch-norm parameters do not match the architecture")));
            }
        }
        check_prior(&self.class_prior, arch.classes())
    }

    /// Trainable tensors in a fixed order: per convolution, filters then
    /// scale then shift.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.filters);
            if let Some(g) = &mut c.gamma {
                out.push(g);
            }
            if let Some(b) = &mut c.beta {
                out.push(b);
            }
        }
        out
    }

    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.push(&c.filters);
            out.extend(c.gamma.as_ref());
            out.extend(c.beta.as_ref());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.trainable().iter().all(|t| t.is_finite())
            && self.convs.iter().filter_map(|c| c.running.as_ref()).all(|r| r.mean.iter().chain(&r.var).all(|v| v.is_finite()))
    }

    /// Element-type conversion of every tensor and running statistic.
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let conv = |r: &RunningStats<T>| RunningStats {
            mean: r.mean.iter().map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN))).collect(),
            var: r.var.iter().map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN))).collect(),
        };
        ModelParams {
            convs: self
                .convs
                .iter()
                .map(|c| ConvParams {
                    filters: c.filters.cast(),
                    gamma: c.gamma.as_ref().map(Tensor::cast),
                    beta: c.beta.as_ref().map(Tensor::cast),
                    running: c.running.as_ref().map(conv),
                })
                .collect(),
            class_prior: self.class_prior.clone(),
        }
    }
}

pub(crate) fn check_prior(prior: &[f64], classes: usize) -> Result<()> {
    if prior.len() != classes {
        return Err(Error::contract(format!("class prior has {} entries for {classes} classes", prior.len())));
    }
    if prior.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
        return Err(Error::contract("class prior entries must be positive"));
    }
    let total: f64 = prior.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::contract(format!("class prior sums to {total}")));
    }
    Ok(())
}

/// Tape handles of one convolution's parameters.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub filters: Var,
    pub gamma: Option<Var>,
    pub beta: Option<Var>,
}

/// Parameters placed on a tape, in the order of [`ModelParams::convs`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub convs: Vec<ConvVars>,
}

impl ParamVars {
    /// Registers every parameter tensor. Tensors flagged `requires_grad`
    /// become differentiable leaves when `trainable` is set; otherwise all
    /// are constants.
    pub fn register<T: Real>(tape: &mut Tape<T>, params: &ModelParams<T>, trainable: bool) -> ParamVars {
        let mut put = |t: &Tensor<T>| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        let convs = params
            .convs
            .iter()
            .map(|c| ConvVars { filters: put(&c.filters), gamma: c.gamma.as_ref().map(&mut put), beta: c.beta.as_ref().map(&mut put) })
            .collect();
        ParamVars { convs }
    }

    /// Rebuilds the handles from a flat list in
    /// [`ModelParams::trainable_mut`] order.
    pub fn from_trainable<T: Real>(params: &ModelParams<T>, vars: &[Var]) -> Result<ParamVars> {
        let expected = params.trainable().len();
        if vars.len() != expected {
            return Err(Error::contract(format!("{} handles for {expected} trainable tensors", vars.len())));
        }
        let mut it = vars.iter().copied();
        let convs = params
            .convs
            .iter()
            .map(|c| ConvVars {
                filters: it.next().expect("counted"),
                gamma: c.gamma.as_ref().map(|_| it.next().expect("counted")),
                beta: c.beta.as_ref().map(|_| it.next().expect("counted")),
            })
            .collect();
        Ok(ParamVars { convs })
    }

    /// Handles in [`ModelParams::trainable_mut`] order.
    pub fn trainable(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.push(c.filters);
            out.extend(c.gamma);
            out.extend(c.beta);
        }
        out
    }
}
