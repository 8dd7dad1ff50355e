//! Layer stacks and the named presets.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{conv_output_extent, ConvMode};

/// One stage of the bottom-up pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv { out_channels: usize, kh: usize, kw: usize, mode: ConvMode, batchnorm: bool, relu: bool },
    MaxPool2x2,
    MeanPool(usize),
    Softmax,
}

impl Layer {
    /// Convolution followed by batch norm and a rectifier.
    pub fn conv(out_channels: usize, k: usize, mode: ConvMode) -> Layer {
        Layer::Conv { out_channels, kh: k, kw: k, mode, batchnorm: true, relu: true }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, Layer::Conv { .. })
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Layer::Conv { out_channels, kh, kw, mode, batchnorm, relu } => {
                write!(f, "conv{out_channels}x{kh}x{kw}:{}", mode.name())?;
                if batchnorm {
                    f.write_str(":bn")?;
                }
                if relu {
                    f.write_str(":relu")?;
                }
                Ok(())
            }
            Layer::MaxPool2x2 => f.write_str("maxpool2x2"),
            Layer::MeanPool(k) => write!(f, "meanpool{k}"),
            Layer::Softmax => f.write_str("softmax"),
        }
    }
}

fn parse_dims(s: &str, count: usize, what: &str) -> Result<Vec<usize>> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|p| p.parse::<usize>().map_err(|_| Error::config(format!("bad {what} extent {p:?} in {s:?}"))))
        .collect::<Result<_>>()?;
    if dims.len() != count || dims.contains(&0) {
        return Err(Error::config(format!("{what} needs {count} positive extents, got {s:?}")));
    }
    Ok(dims)
}

impl FromStr for Layer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Layer> {
        let s = s.trim();
        if s == "maxpool2x2" {
            return Ok(Layer::MaxPool2x2);
        }
        if s == "softmax" {
            return Ok(Layer::Softmax);
        }
        if let Some(k) = s.strip_prefix("meanpool") {
            let k = parse_dims(k, 1, "meanpool")?[0];
            return Ok(Layer::MeanPool(k));
        }
        if let Some(rest) = s.strip_prefix("conv") {
            let mut parts = rest.split(':');
            let dims = parse_dims(parts.next().unwrap_or(""), 3, "conv")?;
            let mode: ConvMode = parts.next().ok_or_else(|| Error::config(format!("conv layer {s:?} has no mode")))?.parse()?;
            let (mut batchnorm, mut relu) = (false, false);
            for flag in parts {
                match flag {
                    "bn" if !batchnorm => batchnorm = true,
                    "relu" if !relu => relu = true,
                    other => return Err(Error::config(format!("unknown conv flag {other:?} in {s:?}"))),
                }
            }
            return Ok(Layer::Conv { out_channels: dims[0], kh: dims[1], kw: dims[2], mode, batchnorm, relu });
        }
        Err(Error::config(format!("unknown layer {s:?}")))
    }
}

/// Ordered layer list with a fixed input extent. Construction verifies that
/// every stage accepts the shape produced by the one before it and that the
/// stack ends in a softmax over a 1×1 class map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchitectureSpec {
    input: [usize; 3],
    layers: Vec<Layer>,
    shapes: Vec<[usize; 3]>,
}

impl ArchitectureSpec {
    pub fn new(input: [usize; 3], layers: Vec<Layer>) -> Result<Self> {
        if input.contains(&0) {
            return Err(Error::dim(format!("input extent {input:?} has a zero")));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut cur = input;
        for (i, layer) in layers.iter().enumerate() {
            let [h, w, c] = cur;
            cur = match *layer {
                Layer::Conv { out_channels, kh, kw, mode, .. } => {
                    if out_channels == 0 || kh == 0 || kw == 0 {
                        return Err(Error::dim(format!("layer {i} ({layer}) has a zero extent")));
                    }
                    let wrap = |e: Error| Error::dim(format!("layer {i} ({layer}) on {h}x{w}x{c}: {e}"));
                    [conv_output_extent(mode, h, kh).map_err(wrap)?, conv_output_extent(mode, w, kw).map_err(wrap)?, out_channels]
                }
                Layer::MaxPool2x2 => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::dim(format!("layer {i} (maxpool2x2) on odd extent {h}x{w}")));
                    }
                    [h / 2, w / 2, c]
                }
                Layer::MeanPool(k) => {
                    if k == 0 || h % k != 0 || w % k != 0 {
                        return Err(Error::dim(format!("layer {i} (meanpool{k}) does not tile {h}x{w}")));
                    }
                    [h / k, w / k, c]
                }
                Layer::Softmax => {
                    if i + 1 != layers.len() {
                        return Err(Error::dim(format!("softmax at layer {i} is not the final layer")));
                    }
                    if h != 1 || w != 1 {
                        return Err(Error::dim(format!("softmax needs a 1x1 class map, got {h}x{w}x{c}")));
                    }
                    cur
                }
            };
            shapes.push(cur);
        }
        if layers.last() != Some(&Layer::Softmax) {
            return Err(Error::dim("the final layer must be a softmax"));
        }
        if cur[2] < 2 {
            return Err(Error::dim(format!("softmax over {} classes", cur[2])));
        }
        Ok(ArchitectureSpec { input, layers, shapes })
    }

    pub fn input(&self) -> [usize; 3] {
        self.input
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Output extent `[h, w, c]` of every layer.
    pub fn shapes(&self) -> &[[usize; 3]] {
        &self.shapes
    }

    /// Extent entering layer `i`.
    pub fn input_of(&self, i: usize) -> [usize; 3] {
        if i == 0 {
            self.input
        } else {
            self.shapes[i - 1]
        }
    }

    pub fn classes(&self) -> usize {
        self.shapes.last().expect("validated non-empty")[2]
    }

    /// Layer indices of the convolutions, in order.
    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers.iter().enumerate().filter(|(_, l)| l.is_conv()).map(|(i, _)| i).collect()
    }

    /// Input channel count of every convolution.
    pub fn conv_inputs(&self) -> Vec<usize> {
        self.conv_layers().into_iter().map(|i| self.input_of(i)[2]).collect()
    }

    pub fn preset(name: &str) -> Result<Self> {
        let p = Preset::from_str(name)?;
        Ok(p.arch())
    }
}

impl fmt::Display for ArchitectureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [h, w, c] = self.input;
        write!(f, "{h}x{w}x{c}")?;
        for layer in &self.layers {
            write!(f, ",{layer}")?;
        }
        Ok(())
    }
}

impl FromStr for ArchitectureSpec {
    type Err = Error;

    /// Parses `HxWxC,layer,layer,...`, for example
    /// `28x28x1,conv8x3x3:half:bn:relu,maxpool2x2,conv10x1x1:valid,meanpool14,softmax`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(',');
        let dims = parse_dims(parts.next().unwrap_or("").trim(), 3, "input")?;
        let layers = parts.map(Layer::from_str).collect::<Result<Vec<_>>>()?;
        ArchitectureSpec::new([dims[0], dims[1], dims[2]], layers)
    }
}

/// Loss weights and schedule endpoints attached to a preset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PresetDefaults {
    pub alpha_h: f64,
    pub alpha_rc: f64,
    pub alpha_kl: f64,
    pub alpha_nn: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    MnistConvSmall,
    SvhnConvLarge,
    Cifar10ConvLarge,
    SyntheticConvLarge,
    ConvTinyCi,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::MnistConvSmall, Preset::SvhnConvLarge, Preset::Cifar10ConvLarge, Preset::SyntheticConvLarge, Preset::ConvTinyCi];

    pub fn name(self) -> &'static str {
        match self {
            Preset::MnistConvSmall => "mnist-convsmall",
            Preset::SvhnConvLarge => "svhn-convlarge",
            Preset::Cifar10ConvLarge => "cifar10-convlarge",
            Preset::SyntheticConvLarge => "synthetic-convlarge",
            Preset::ConvTinyCi => "convtiny-ci",
        }
    }

    pub fn arch(self) -> ArchitectureSpec {
        match self {
            Preset::MnistConvSmall => conv_small([28, 28, 1]),
            Preset::SvhnConvLarge | Preset::Cifar10ConvLarge => conv_large([32, 32, 3]),
            Preset::SyntheticConvLarge => conv_large([32, 32, 1]),
            Preset::ConvTinyCi => conv_tiny([32, 32, 1]),
        }
    }

    pub fn defaults(self) -> PresetDefaults {
        let (alpha_rc, alpha_kl, alpha_nn, epochs) = match self {
            Preset::MnistConvSmall => (0.2, 1.0, 1.0, 500),
            Preset::ConvTinyCi => (0.2, 1.0, 1.0, 20),
            _ => (0.5, 0.2, 0.5, 500),
        };
        let lr_start = if self == Preset::ConvTinyCi { 0.01 } else { 0.2 };
        PresetDefaults { alpha_h: 1.0, alpha_rc, alpha_kl, alpha_nn, lr_start, lr_end: 0.0001, epochs, batch_size: 100 }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Preset> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
            Error::config(format!("unknown preset {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

/// Five conv layers, two max pools and a 6×6 mean-pool head; 28×28 inputs.
pub fn conv_small(input: [usize; 3]) -> ArchitectureSpec {
    use ConvMode::*;
    ArchitectureSpec::new(
        input,
        vec![
            Layer::conv(32, 5, Full),
            Layer::MaxPool2x2,
            Layer::conv(64, 3, Valid),
            Layer::conv(64, 3, Full),
            Layer::MaxPool2x2,
            Layer::conv(128, 3, Valid),
            Layer::conv(10, 1, Valid),
            Layer::MeanPool(6),
            Layer::Softmax,
        ],
    )
    .expect("conv-small is consistent for its input")
}

/// Nine conv layers, two max pools and a 6×6 mean-pool head; 32×32 inputs.
pub fn conv_large(input: [usize; 3]) -> ArchitectureSpec {
    use ConvMode::*;
    ArchitectureSpec::new(
        input,
        vec![
            Layer::conv(96, 3, Half),
            Layer::conv(96, 3, Full),
            Layer::conv(96, 3, Full),
            Layer::MaxPool2x2,
            Layer::conv(192, 3, Valid),
            Layer::conv(192, 3, Full),
            Layer::conv(192, 3, Valid),
            Layer::MaxPool2x2,
            Layer::conv(192, 3, Valid),
            Layer::conv(192, 1, Valid),
            Layer::conv(10, 1, Valid),
            Layer::MeanPool(6),
            Layer::Softmax,
        ],
    )
    .expect("conv-large is consistent for its input")
}

/// Desk-scale stack: one 3×3 conv, a max pool, a 3×3 valid conv and a 1×1
/// class conv averaged over the remaining map. Needs an even input extent of
/// at least 6.
pub fn conv_tiny(input: [usize; 3]) -> ArchitectureSpec {
    use ConvMode::*;
    let head = input[0] / 2 - 2;
    ArchitectureSpec::new(
        input,
        vec![
            Layer::conv(16, 3, Half),
            Layer::MaxPool2x2,
            Layer::conv(32, 3, Valid),
            Layer::conv(10, 1, Valid),
            Layer::MeanPool(head),
            Layer::Softmax,
        ],
    )
    .expect("conv-tiny needs a square even input of at least 6")
}
