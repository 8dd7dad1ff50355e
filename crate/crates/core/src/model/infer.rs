//! Bottom-up inference and top-down rendering.

use std::fmt;
use std::str::FromStr;

use super::arch::{ArchitectureSpec, Layer};
use super::params::{ModelParams, ParamVars};
use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, BatchStats, ConvMode, Real, Switch, Tape, Tensor, Var, BN_EPS};

/// How a max-pool stage is inverted on the way down.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Unpool {
    /// Replicate each value into its 2×2 block.
    #[default]
    Nearest,
    /// Place each value at its recorded argmax, zeros elsewhere.
    Switch,
}

impl Unpool {
    pub fn name(self) -> &'static str {
        match self {
            Unpool::Nearest => "nearest",
            Unpool::Switch => "switch",
        }
    }
}

impl fmt::Display for Unpool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Unpool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Unpool::Nearest),
            "switch" => Ok(Unpool::Switch),
            other => Err(Error::config(format!("unknown unpool mode {other:?}; expected nearest or switch"))),
        }
    }
}

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Latents recorded at one layer. Which fields are set depends on the layer:
/// switches at max pools, masks at rectified convolutions, activations
/// everywhere a bottom-up pass has run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerLatents<T: Real = f32> {
    pub switches: Option<Vec<Switch>>,
    pub mask: Option<Vec<bool>>,
    /// Input to the rectifier (after batch norm).
    pub pre_activation: Option<Tensor<T>>,
    pub activation: Option<Tensor<T>>,
}

/// Hard E-step output for a batch: per-layer latents, the chosen class per
/// item and, after inference, the class posterior `[N, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTrace<T: Real = f32> {
    pub batch: usize,
    pub layers: Vec<LayerLatents<T>>,
    pub classes: Vec<usize>,
    pub posterior: Option<Tensor<T>>,
}

impl<T: Real> LatentTrace<T> {
    /// Checks that every latent the top-down pass will read is present and
    /// sized for `arch`.
    pub fn check(&self, arch: &ArchitectureSpec, unpool: Unpool) -> Result<()> {
        if self.layers.len() != arch.layers().len() {
            return Err(Error::contract(format!("trace has {} layers, architecture {}", self.layers.len(), arch.layers().len())));
        }
        if self.classes.len() != self.batch {
            return Err(Error::contract(format!("trace has {} classes for {} items", self.classes.len(), self.batch)));
        }
        for (i, (layer, lat)) in arch.layers().iter().zip(&self.layers).enumerate() {
            let len = self.batch * arch.shapes()[i].iter().product::<usize>();
            let need = |what: &str, have: Option<usize>| match have {
                Some(n) if n == len => Ok(()),
                Some(n) => Err(Error::contract(format!("layer {i} ({layer}): {what} has {n} entries, expected {len}"))),
                None => Err(Error::contract(format!("layer {i} ({layer}): trace has no {what}"))),
            };
            match layer {
                Layer::Conv { relu: true, .. } => need("mask", lat.mask.as_ref().map(Vec::len))?,
                Layer::MaxPool2x2 if unpool == Unpool::Switch => need("switches", lat.switches.as_ref().map(Vec::len))?,
                _ => {}
            }
        }
        Ok(())
    }

    /// Fraction of negative entries per tensor.
    pub fn negative_fraction(values: &[Tensor<T>]) -> Vec<f64> {
        values
            .iter()
            .map(|t| if t.is_empty() { 0.0 } else { t.data().iter().filter(|&&v| v < T::zero()).count() as f64 / t.len() as f64 })
            .collect()
    }
}

/// Index of the largest entry in every row of length `width`; ties go to the
/// lowest index.
pub fn argmax_rows<T: Real>(values: &[T], width: usize) -> Vec<usize> {
    values
        .chunks(width)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Handles produced by [`bottom_up_pass`].
#[derive(Debug)]
pub struct BottomUpPass<T: Real = f32> {
    /// Class scores entering the softmax, `[N, 1, 1, C]`.
    pub logits: Var,
    pub posterior: Var,
    /// Output of every layer.
    pub outputs: Vec<Var>,
    pub trace: LatentTrace<T>,
    /// Batch statistics of every convolution with batch norm, train phase only.
    pub batch_stats: Vec<Option<BatchStats<T>>>,
}

fn check_images(arch: &ArchitectureSpec, shape: &[usize]) -> Result<usize> {
    match shape {
        [n, h, w, c] if [*h, *w, *c] == arch.input() => Ok(*n),
        _ => Err(Error::dim(format!("images {shape:?} do not match architecture input {:?}", arch.input()))),
    }
}

/// Runs the convolution / batch-norm / rectifier / pooling stack on `images`
/// and records latents.
///
/// With `fixed` set, rectifier masks, pooling switches and chosen classes are
/// taken from that trace instead of being inferred, which makes the pass a
/// smooth function of its inputs.
pub fn bottom_up_pass<T: Real>(
    tape: &mut Tape<T>,
    arch: &ArchitectureSpec,
    params: &ModelParams<T>,
    vars: &ParamVars,
    images: Var,
    phase: Phase,
    fixed: Option<&LatentTrace<T>>,
) -> Result<BottomUpPass<T>> {
    let n = check_images(arch, tape.shape(images))?;
    if let Some(f) = fixed {
        f.check(arch, Unpool::Switch)?;
        if f.batch != n {
            return Err(Error::contract(format!("fixed trace covers {} items, batch has {n}", f.batch)));
        }
    }
    let eps = T::from_f64_lossy(BN_EPS);
    let mut x = images;
    let mut logits = None;
    let mut outputs = Vec::with_capacity(arch.layers().len());
    let mut layers = Vec::with_capacity(arch.layers().len());
    let mut batch_stats = Vec::new();
    let mut conv_index = 0;
    for (i, layer) in arch.layers().iter().enumerate() {
        let mut lat = LayerLatents::default();
        x = match *layer {
            Layer::Conv { mode, batchnorm, relu, .. } => {
                let cv = vars.convs[conv_index];
                let mut y = tape.conv2d(x, cv.filters, mode)?;
                let mut stats = None;
                if batchnorm {
                    let (g, b) = (cv.gamma.expect("validated"), cv.beta.expect("validated"));
                    let running = params.convs[conv_index].running.as_ref().expect("validated");
                    let bn_mode = match phase {
                        Phase::Train => BatchNormMode::Train { eps },
                        Phase::Eval => running.mode(eps),
                    };
                    let (out, s) = tape.batchnorm(y, g, b, bn_mode)?;
                    y = out;
                    stats = s;
                }
                batch_stats.push(stats);
                conv_index += 1;
                if relu {
                    lat.pre_activation = Some(tape.value(y).clone());
                    let (out, mask) = match fixed {
                        Some(f) => {
                            let mask = f.layers[i].mask.clone().expect("checked");
                            (tape.apply_mask(y, &mask)?, mask)
                        }
                        None => tape.relu(y),
                    };
                    lat.mask = Some(mask);
                    out
                } else {
                    y
                }
            }
            Layer::MaxPool2x2 => match fixed.and_then(|f| f.layers[i].switches.as_ref()) {
                Some(sw) => {
                    lat.switches = Some(sw.clone());
                    tape.maxpool2x2_fixed(x, sw)?
                }
                None => {
                    let (out, sw) = tape.maxpool2x2(x)?;
                    lat.switches = Some(sw);
                    out
                }
            },
            Layer::MeanPool(k) => tape.meanpool(x, k)?,
            Layer::Softmax => {
                logits = Some(x);
                tape.softmax(x)?
            }
        };
        tape.value(x).ensure_finite(&format!("bottom-up layer {i} ({layer})"))?;
        lat.activation = Some(tape.value(x).clone());
        outputs.push(x);
        layers.push(lat);
    }
    let classes_count = arch.classes();
    let q = tape.value(x).clone().reshape(vec![n, classes_count])?;
    let classes = match fixed {
        Some(f) => f.classes.clone(),
        None => argmax_rows(q.data(), classes_count),
    };
    Ok(BottomUpPass {
        logits: logits.expect("architecture ends in softmax"),
        posterior: x,
        outputs,
        trace: LatentTrace { batch: n, layers, classes, posterior: Some(q) },
        batch_stats,
    })
}

/// Bottom-up inference on a constant tape. Train phase normalizes with batch
/// statistics but leaves the running statistics untouched.
pub fn bottom_up<T: Real>(params: &ModelParams<T>, arch: &ArchitectureSpec, images: &Tensor<T>, phase: Phase) -> Result<LatentTrace<T>> {
    params.validate(arch)?;
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, false);
    let x = tape.constant(images.clone());
    Ok(bottom_up_pass(&mut tape, arch, params, &vars, x, phase, None)?.trace)
}

/// Top-down options.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TopDownOptions {
    pub unpool: Unpool,
    /// Negates the filters of the transposed convolution that produces the
    /// image. Fault injection for the verification suites only.
    #[doc(hidden)]
    pub deconv_sign_fault: bool,
}

impl TopDownOptions {
    pub fn with_unpool(unpool: Unpool) -> Self {
        TopDownOptions { unpool, deconv_sign_fault: false }
    }
}

/// Handles produced by [`top_down_pass`].
#[derive(Debug)]
pub struct TopDownPass {
    pub reconstruction: Var,
    /// Rendered templates between the class vector and the image, coarsest
    /// first: the output of every transposed convolution except the one that
    /// produces the image.
    pub intermediates: Vec<Var>,
}

/// One-hot class vectors `[N, C]`.
pub fn one_hot<T: Real>(classes: &[usize], count: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(&[classes.len(), count]);
    for (n, &c) in classes.iter().enumerate() {
        if c >= count {
            return Err(Error::dim(format!("class {c} out of range for {count} classes")));
        }
        t.data_mut()[n * count + c] = T::one();
    }
    Ok(t)
}

/// Renders from class vectors `[N, 1, 1, C]` down to image space through the
/// tied filters, using the masks and switches in `trace`. No batch norm.
pub fn top_down_pass<T: Real>(
    tape: &mut Tape<T>,
    arch: &ArchitectureSpec,
    vars: &ParamVars,
    class_vectors: Var,
    trace: &LatentTrace<T>,
    options: TopDownOptions,
) -> Result<TopDownPass> {
    trace.check(arch, options.unpool)?;
    let c = arch.classes();
    if tape.shape(class_vectors) != [trace.batch, 1, 1, c] {
        return Err(Error::dim(format!("class vectors {:?}, expected {:?}", tape.shape(class_vectors), [trace.batch, 1, 1, c])));
    }
    let mut z = class_vectors;
    let mut intermediates = Vec::new();
    let mut conv_index = vars.convs.len();
    for (i, layer) in arch.layers().iter().enumerate().rev() {
        z = match *layer {
            Layer::Softmax => z,
            Layer::MeanPool(k) => tape.upsample_nn(z, k)?,
            Layer::MaxPool2x2 => match options.unpool {
                Unpool::Nearest => tape.upsample_nn(z, 2)?,
                Unpool::Switch => tape.unpool_switch(z, trace.layers[i].switches.as_ref().expect("checked"))?,
            },
            Layer::Conv { mode, relu, .. } => {
                conv_index -= 1;
                if relu {
                    z = tape.apply_mask(z, trace.layers[i].mask.as_ref().expect("checked"))?;
                }
                let mut filters = vars.convs[conv_index].filters;
                if options.deconv_sign_fault && conv_index == 0 {
                    filters = tape.scale(filters, -T::one());
                }
                let out = tape.conv2d_transpose(z, filters, mode)?;
                if i > 0 {
                    intermediates.push(out);
                }
                out
            }
        };
    }
    let [h, w, ch] = arch.input();
    if tape.shape(z) != [trace.batch, h, w, ch] {
        return Err(Error::contract(format!("rendered {:?}, expected {:?}", tape.shape(z), [trace.batch, h, w, ch])));
    }
    Ok(TopDownPass { reconstruction: z, intermediates })
}

/// Top-down rendering on a constant tape. `class_vectors` is `[N, C]`.
/// Returns the rendered image batch and the intermediate templates.
pub fn top_down<T: Real>(
    params: &ModelParams<T>,
    arch: &ArchitectureSpec,
    class_vectors: &Tensor<T>,
    trace: &LatentTrace<T>,
    options: TopDownOptions,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    params.validate(arch)?;
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, false);
    let n = class_vectors.shape().first().copied().unwrap_or(0);
    let cv = tape.constant(class_vectors.clone().reshape(vec![n, 1, 1, arch.classes()])?);
    let pass = top_down_pass(&mut tape, arch, &vars, cv, trace, options)?;
    let inter = pass.intermediates.iter().map(|v| tape.value(*v).clone()).collect();
    Ok((tape.value(pass.reconstruction).clone(), inter))
}

/// Where values of a pooled map land when a pooling stage is inverted.
#[derive(Clone, Copy, Debug)]
pub enum Placement<'a> {
    /// No pooling stage between this layer and the one above.
    Direct,
    Nearest,
    Switches(&'a [Switch]),
}

/// One rendering step: place `z_above` (undoing a 2×2 pool if any), zero the
/// inactive units given by `mask`, then apply the transpose of the
/// convolution with `filters`.
pub fn drmm_layer_render<T: Real>(
    z_above: &Tensor<T>,
    placement: Placement<'_>,
    mask: Option<&[bool]>,
    filters: &Tensor<T>,
    mode: ConvMode,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let mut z = tape.constant(z_above.clone());
    z = match placement {
        Placement::Direct => z,
        Placement::Nearest => tape.upsample_nn(z, 2)?,
        Placement::Switches(sw) => tape.unpool_switch(z, sw)?,
    };
    if let Some(m) = mask {
        z = tape.apply_mask(z, m)?;
    }
    let f = tape.constant(filters.clone());
    let out = tape.conv2d_transpose(z, f, mode)?;
    Ok(tape.value(out).clone())
}
