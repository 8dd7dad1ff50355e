//! Seeded random instances for the oracle suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{ArchitectureSpec, Layer, LatentTrace, LayerLatents, ModelParams, Unpool, MAX_PATH_EXTENT};
use crate::tensor::{conv_output_extent, ConvMode, Switch, Tensor};

/// A small network with filters, latents and class vectors, all random.
#[derive(Clone, Debug)]
pub struct TinyInstance {
    pub arch: ArchitectureSpec,
    pub params: ModelParams<f64>,
    pub trace: LatentTrace<f64>,
    /// `[N, C]`.
    pub class_vectors: Tensor<f64>,
    pub unpool: Unpool,
}

fn random_mode(rng: &mut ChaCha8Rng) -> ConvMode {
    [ConvMode::Full, ConvMode::Half, ConvMode::Valid][rng.random_range(0..3)]
}

fn random_conv(rng: &mut ChaCha8Rng, out_channels: usize) -> Layer {
    let k = [1, 2, 3][rng.random_range(0..3)];
    let mut mode = random_mode(rng);
    if k % 2 == 0 && mode == ConvMode::Half {
        mode = ConvMode::Valid;
    }
    Layer::Conv { out_channels, kh: k, kw: k, mode, batchnorm: rng.random_bool(0.5), relu: rng.random_bool(0.75) }
}

/// Random stack of one or two convolutions with an optional max pool, a
/// mean-pool head and a softmax, every extent at most [`MAX_PATH_EXTENT`].
pub fn tiny_arch(rng: &mut ChaCha8Rng) -> ArchitectureSpec {
    'retry: loop {
        let side = [2, 4, 6, 8][rng.random_range(0..4)];
        let channels = rng.random_range(1..=2);
        let classes = rng.random_range(2..=4);
        let mut layers = Vec::new();
        if rng.random_bool(0.7) {
            let hidden = rng.random_range(1..=3);
            layers.push(random_conv(rng, hidden));
            if rng.random_bool(0.6) {
                layers.push(Layer::MaxPool2x2);
            }
        } else if rng.random_bool(0.4) {
            layers.push(Layer::MaxPool2x2);
        }
        layers.push(random_conv(rng, classes));
        let mut extent = side;
        for layer in &layers {
            extent = match *layer {
                Layer::Conv { kh, mode, .. } => match conv_output_extent(mode, extent, kh) {
                    Ok(e) if e <= MAX_PATH_EXTENT => e,
                    _ => continue 'retry,
                },
                Layer::MaxPool2x2 if extent % 2 == 0 => extent / 2,
                _ => continue 'retry,
            };
        }
        if extent > 1 {
            layers.push(Layer::MeanPool(extent));
        }
        layers.push(Layer::Softmax);
        return ArchitectureSpec::new([side, side, channels], layers).expect("extents checked");
    }
}

/// Random masks (active with probability 0.6), switches and classes for
/// `batch` items.
pub fn random_trace(arch: &ArchitectureSpec, batch: usize, rng: &mut ChaCha8Rng) -> LatentTrace<f64> {
    let layers = arch
        .layers()
        .iter()
        .zip(arch.shapes())
        .map(|(layer, shape)| {
            let len = batch * shape.iter().product::<usize>();
            let mut lat = LayerLatents::default();
            match layer {
                Layer::Conv { relu: true, .. } => lat.mask = Some((0..len).map(|_| rng.random_bool(0.6)).collect()),
                Layer::MaxPool2x2 => lat.switches = Some((0..len).map(|_| Switch::ALL[rng.random_range(0..4)]).collect()),
                _ => {}
            }
            lat
        })
        .collect();
    let classes = (0..batch).map(|_| rng.random_range(0..arch.classes())).collect();
    LatentTrace { batch, layers, classes, posterior: None }
}

/// Random filters in `[-1, 1]`.
pub fn random_params(arch: &ArchitectureSpec, rng: &mut ChaCha8Rng) -> ModelParams<f64> {
    let mut params = ModelParams::init(arch, rng.random());
    for c in &mut params.convs {
        c.filters.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    params
}

/// Deterministic tiny instance for `seed`. Half the instances use one-hot
/// class vectors, the rest dense random ones.
pub fn tiny_instance(seed: u64) -> TinyInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = tiny_arch(&mut rng);
    let params = random_params(&arch, &mut rng);
    let batch = 2;
    let trace = random_trace(&arch, batch, &mut rng);
    let c = arch.classes();
    let class_vectors = if rng.random_bool(0.5) {
        crate::model::one_hot(&trace.classes, c).expect("classes in range")
    } else {
        Tensor::from_fn(&[batch, c], |_| rng.random_range(-1.0..1.0))
    };
    let unpool = if rng.random_bool(0.5) { Unpool::Nearest } else { Unpool::Switch };
    TinyInstance { arch, params, trace, class_vectors, unpool }
}
