use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::fixtures::{random_params, random_trace, tiny_instance};
use crate::tensor::{conv_padding, ConvMode, Switch, Tensor};

fn random_images<T: crate::tensor::Real>(arch: &ArchitectureSpec, n: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [h, w, c] = arch.input();
    Tensor::from_fn(&[n, h, w, c], |_| T::from_f64_lossy(rng.random_range(0.0..1.0)))
}

#[test]
fn bottom_up_reproduces_conv_small_layer_shapes() {
    let arch = Preset::MnistConvSmall.arch();
    let params = ModelParams::<f32>::init(&arch, 1);
    let trace = bottom_up(&params, &arch, &random_images(&arch, 2, 2), Phase::Train).unwrap();
    let shapes: Vec<Vec<usize>> = trace.layers.iter().map(|l| l.activation.as_ref().unwrap().shape().to_vec()).collect();
    let expected: Vec<Vec<usize>> = [[32, 32, 32], [16, 16, 32], [14, 14, 64], [16, 16, 64], [8, 8, 64], [6, 6, 128], [6, 6, 10], [1, 1, 10], [1, 1, 10]]
        .iter()
        .map(|s| vec![2, s[0], s[1], s[2]])
        .collect();
    assert_eq!(shapes, expected);
    let q = trace.posterior.as_ref().unwrap();
    assert_eq!(q.shape(), &[2, 10]);
    for row in q.data().chunks(10) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&v| v > 0.0));
    }
    assert_eq!(trace.layers[1].switches.as_ref().unwrap().len(), 2 * 16 * 16 * 32);
    assert_eq!(trace.layers[0].mask.as_ref().unwrap().len(), 2 * 32 * 32 * 32);
}

#[test]
fn bottom_up_rejects_wrong_image_shape() {
    let arch = Preset::MnistConvSmall.arch();
    let params = ModelParams::<f32>::init(&arch, 1);
    let err = bottom_up(&params, &arch, &Tensor::zeros(&[1, 32, 32, 1]), Phase::Eval).unwrap_err();
    assert!(matches!(err, Error::Dimension(_)));
}

#[test]
fn zero_image_gives_uniform_posterior() {
    let arch = Preset::MnistConvSmall.arch();
    let params = ModelParams::<f64>::init(&arch, 3);
    for phase in [Phase::Train, Phase::Eval] {
        let trace = bottom_up(&params, &arch, &Tensor::zeros(&[3, 28, 28, 1]), phase).unwrap();
        assert!(trace.posterior.unwrap().data().iter().all(|&v| (v - 0.1).abs() < 1e-12));
        assert_eq!(trace.classes, vec![0, 0, 0]);
    }
}

#[test]
fn masks_match_positivity_of_retained_pre_activations() {
    let arch = Preset::ConvTinyCi.arch();
    let params = ModelParams::<f32>::init(&arch, 4);
    let trace = bottom_up(&params, &arch, &random_images(&arch, 3, 5), Phase::Train).unwrap();
    let mut checked = 0;
    for lat in &trace.layers {
        if let (Some(mask), Some(pre)) = (&lat.mask, &lat.pre_activation) {
            let recomputed: Vec<bool> = pre.data().iter().map(|&v| v > 0.0).collect();
            assert_eq!(mask, &recomputed);
            checked += 1;
        }
    }
    assert_eq!(checked, 3);
}

#[test]
fn bottom_up_is_bitwise_deterministic() {
    let arch = Preset::ConvTinyCi.arch();
    let params = ModelParams::<f32>::init(&arch, 6);
    let images = random_images(&arch, 4, 7);
    for phase in [Phase::Train, Phase::Eval] {
        assert_eq!(bottom_up(&params, &arch, &images, phase).unwrap(), bottom_up(&params, &arch, &images, phase).unwrap());
    }
}

#[test]
fn argmax_breaks_ties_toward_lowest_index() {
    assert_eq!(argmax_rows(&[0.2, 0.5, 0.5, 0.1, 0.3, 0.3, 0.3, 0.1], 4), vec![1, 0]);
}

#[test]
fn layer_render_with_inactive_mask_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z = Tensor::from_fn(&[1, 3, 3, 2], |_| rng.random_range(-1.0..1.0));
    let f = Tensor::from_fn(&[2, 3, 3, 4], |_| rng.random_range(-1.0..1.0));
    let out = drmm_layer_render(&z, Placement::Direct, Some(&[false; 18]), &f, ConvMode::Full).unwrap();
    assert_eq!(out.shape(), &[1, 1, 1, 4]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_render_with_identity_filter_is_identity() {
    let z = Tensor::new(vec![1, 1, 1, 3], vec![0.5, -2.0, 7.0]).unwrap();
    let f = Tensor::from_fn(&[3, 1, 1, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let out = drmm_layer_render(&z, Placement::Direct, Some(&[true; 3]), &f, ConvMode::Valid).unwrap();
    assert_eq!(out, z);
}

#[test]
fn layer_render_rejects_mismatched_mask() {
    let z = Tensor::<f64>::zeros(&[1, 2, 2, 1]);
    let f = Tensor::zeros(&[1, 1, 1, 1]);
    assert!(matches!(drmm_layer_render(&z, Placement::Direct, Some(&[true; 3]), &f, ConvMode::Valid), Err(Error::Dimension(_))));
}

fn flat(y: usize, x: usize, c: usize, w: usize, channels: usize) -> usize {
    (y * w + x) * channels + c
}

/// Dense `Λ = Crop · Σ_x T_x · Z · Γ · S_x · M`, mapping a rendered map of
/// extent `out` to extent `inp`. `S_x` keeps the units at position `x`, `Γ`
/// holds each channel's template, `Z` embeds a template at the origin of the
/// padded canvas, `T_x` translates it to `x` and `Crop` removes the padding.
fn dense_layer(filters: &Tensor<f64>, mode: ConvMode, inp: [usize; 3], out: [usize; 3], mask: Option<&[bool]>) -> DMatrix<f64> {
    let [h, w, cin] = inp;
    let [ho, wo, cout] = out;
    let (kh, kw) = (filters.shape()[1], filters.shape()[2]);
    let (ph, pw) = (conv_padding(mode, kh).unwrap(), conv_padding(mode, kw).unwrap());
    let (hp, wp) = (h + 2 * ph, w + 2 * pw);
    let d_out = ho * wo * cout;
    let d_pad = hp * wp * cin;
    let f_len = kh * kw * cin;

    let gamma = DMatrix::from_fn(f_len, d_out, |f, u| filters.data()[(u % cout) * f_len + f]);
    let m = DMatrix::from_diagonal(&DVector::from_fn(d_out, |u, _| if mask.is_none_or(|m| m[u]) { 1.0 } else { 0.0 }));
    let mut zpad = DMatrix::zeros(d_pad, f_len);
    for dy in 0..kh {
        for dx in 0..kw {
            for ci in 0..cin {
                zpad[(flat(dy, dx, ci, wp, cin), (dy * kw + dx) * cin + ci)] = 1.0;
            }
        }
    }
    let mut crop = DMatrix::zeros(h * w * cin, d_pad);
    for y in 0..h {
        for x in 0..w {
            for c in 0..cin {
                crop[(flat(y, x, c, w, cin), flat(y + ph, x + pw, c, wp, cin))] = 1.0;
            }
        }
    }
    let mut sum = DMatrix::zeros(d_pad, d_out);
    for oy in 0..ho {
        for ox in 0..wo {
            let mut t = DMatrix::zeros(d_pad, d_pad);
            for y in 0..hp {
                for x in 0..wp {
                    if y + oy < hp && x + ox < wp {
                        for c in 0..cin {
                            t[(flat(y + oy, x + ox, c, wp, cin), flat(y, x, c, wp, cin))] = 1.0;
                        }
                    }
                }
            }
            let sel = DMatrix::from_diagonal(&DVector::from_fn(d_out, |u, _| if u / cout == oy * wo + ox { 1.0 } else { 0.0 }));
            sum += &t * &zpad * &gamma * sel * &m;
        }
    }
    crop * sum
}

/// Dense inverse of a 2×2 pool from a coarse `[h, w, c]` map.
fn dense_unpool(coarse: [usize; 3], switches: Option<&[Switch]>) -> DMatrix<f64> {
    let [h, w, c] = coarse;
    let mut u = DMatrix::zeros(4 * h * w * c, h * w * c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let src = flat(y, x, ch, w, c);
                for s in Switch::ALL {
                    if switches.is_none_or(|sw| sw[src] == s) {
                        let (dy, dx) = s.offset();
                        u[(flat(2 * y + dy, 2 * x + dx, ch, 2 * w, c), src)] = 1.0;
                    }
                }
            }
        }
    }
    u
}

#[test]
fn top_down_matches_dense_matrix_products() {
    for (text, seed) in [
        ("4x4x1,conv2x3x3:half:relu,maxpool2x2,conv3x2x2:valid:relu,softmax", 9),
        ("4x4x2,conv2x3x3:full:bn:relu,maxpool2x2,conv3x3x3:valid:relu,softmax", 10),
    ] {
        let arch: ArchitectureSpec = text.parse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = random_params(&arch, &mut rng);
        let trace = random_trace(&arch, 2, &mut rng);
        let classes = Tensor::from_fn(&[2, 3], |_| rng.random_range(-1.0..1.0));
        for unpool in [Unpool::Nearest, Unpool::Switch] {
            let (rendered, inter) = top_down(&params, &arch, &classes, &trace, TopDownOptions::with_unpool(unpool)).unwrap();
            assert_eq!(inter.len(), 1);
            let s = arch.shapes();
            let d = |sh: [usize; 3]| sh.iter().product::<usize>();
            for item in 0..2 {
                let part = |v: &Option<Vec<bool>>, len: usize| v.as_ref().unwrap()[item * len..(item + 1) * len].to_vec();
                let m0 = part(&trace.layers[0].mask, d(s[0]));
                let m2 = part(&trace.layers[2].mask, d(s[2]));
                let sw = trace.layers[1].switches.as_ref().unwrap()[item * d(s[1])..(item + 1) * d(s[1])].to_vec();
                let lower = dense_layer(&params.convs[0].filters, arch_mode(&arch, 0), arch.input(), s[0], Some(&m0));
                let pool = dense_unpool(s[1], if unpool == Unpool::Switch { Some(&sw) } else { None });
                let upper = dense_layer(&params.convs[1].filters, arch_mode(&arch, 2), s[1], s[2], Some(&m2));
                let top = DVector::from_column_slice(&classes.data()[item * 3..item * 3 + 3]);
                let z1 = &upper * &top;
                let image = &lower * &pool * &z1;
                let n_img = d(arch.input());
                for (a, b) in rendered.data()[item * n_img..(item + 1) * n_img].iter().zip(image.iter()) {
                    assert!((a - b).abs() < 1e-12, "{text} {unpool}");
                }
                for (a, b) in inter[0].data()[item * d(s[1])..(item + 1) * d(s[1])].iter().zip(z1.iter()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}

fn arch_mode(arch: &ArchitectureSpec, i: usize) -> ConvMode {
    match arch.layers()[i] {
        Layer::Conv { mode, .. } => mode,
        _ => panic!("layer {i} is not a convolution"),
    }
}

#[test]
fn reconstruction_has_image_shape_for_presets() {
    for preset in [Preset::MnistConvSmall, Preset::SvhnConvLarge, Preset::ConvTinyCi] {
        let arch = preset.arch();
        let params = ModelParams::<f32>::init(&arch, 12);
        let trace = bottom_up(&params, &arch, &random_images(&arch, 1, 13), Phase::Eval).unwrap();
        let classes = one_hot(&trace.classes, 10).unwrap();
        for unpool in [Unpool::Nearest, Unpool::Switch] {
            let (rendered, inter) = top_down(&params, &arch, &classes, &trace, TopDownOptions::with_unpool(unpool)).unwrap();
            let [h, w, c] = arch.input();
            assert_eq!(rendered.shape(), &[1, h, w, c]);
            assert_eq!(inter.len(), arch.conv_layers().len() - 1);
        }
    }
}

#[test]
fn zero_class_vector_renders_zero_everywhere() {
    let arch = Preset::MnistConvSmall.arch();
    let params = ModelParams::<f32>::init(&arch, 14);
    let trace = bottom_up(&params, &arch, &random_images(&arch, 2, 15), Phase::Eval).unwrap();
    let (rendered, inter) = top_down(&params, &arch, &Tensor::zeros(&[2, 10]), &trace, TopDownOptions::default()).unwrap();
    assert!(rendered.data().iter().all(|&v| v == 0.0));
    assert!(inter.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    assert!(LatentTrace::negative_fraction(&inter).iter().all(|&f| f == 0.0));
}

#[test]
fn top_down_is_linear_in_the_class_vector() {
    let arch = Preset::ConvTinyCi.arch();
    let params = ModelParams::<f64>::init(&arch, 16);
    let trace = bottom_up(&params, &arch, &random_images(&arch, 2, 17), Phase::Eval).unwrap();
    let e = one_hot(&trace.classes, 10).unwrap();
    let (base, _) = top_down(&params, &arch, &e, &trace, TopDownOptions::default()).unwrap();
    for alpha in [-3.0, 0.5, 2.25] {
        let (scaled, _) = top_down(&params, &arch, &e.scaled(alpha), &trace, TopDownOptions::default()).unwrap();
        for (a, b) in scaled.data().iter().zip(base.data()) {
            assert!((a - alpha * b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn top_down_rejects_trace_from_another_architecture() {
    let tiny = Preset::ConvTinyCi.arch();
    let small = Preset::MnistConvSmall.arch();
    let trace = bottom_up(&ModelParams::<f32>::init(&small, 0), &small, &random_images(&small, 1, 0), Phase::Eval).unwrap();
    let err = top_down(&ModelParams::<f32>::init(&tiny, 0), &tiny, &Tensor::zeros(&[1, 10]), &trace, TopDownOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
    let mut partial = trace.clone();
    partial.layers[1].switches = None;
    let params = ModelParams::<f32>::init(&small, 0);
    let err = top_down(&params, &small, &Tensor::zeros(&[1, 10]), &partial, TopDownOptions::with_unpool(Unpool::Switch)).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn single_path_renders_weight_times_template() {
    let arch: ArchitectureSpec = "1x1x1,conv2x1x1:valid:relu,softmax".parse().unwrap();
    let mut params = ModelParams::<f64>::init(&arch, 0);
    params.convs[0].filters = Tensor::new(vec![2, 1, 1, 1], vec![0.75, -1.5]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut trace = random_trace(&arch, 1, &mut rng);
    trace.layers[0].mask = Some(vec![true, true]);
    let template = Tensor::new(vec![1, 2], vec![0.0, 2.0]).unwrap();
    let out = sum_over_paths(&params, &arch, &template, &trace, Unpool::Nearest).unwrap();
    assert_eq!(out.data(), &[-3.0]);
    trace.layers[0].mask = Some(vec![false, false]);
    let out = sum_over_paths(&params, &arch, &template, &trace, Unpool::Nearest).unwrap();
    assert_eq!(out.data(), &[0.0]);
}

#[test]
fn all_masks_inactive_means_no_active_paths() {
    let mut inst = tiny_instance(3);
    for lat in &mut inst.trace.layers {
        if let Some(m) = &mut lat.mask {
            m.iter_mut().for_each(|v| *v = false);
        }
    }
    let has_mask = inst.trace.layers.iter().any(|l| l.mask.is_some());
    let out = sum_over_paths(&inst.params, &inst.arch, &inst.class_vectors, &inst.trace, inst.unpool).unwrap();
    if has_mask {
        assert!(out.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn path_enumeration_refuses_large_stacks() {
    let arch = Preset::MnistConvSmall.arch();
    let params = ModelParams::<f64>::init(&arch, 0);
    let trace = bottom_up(&params, &arch, &random_images(&arch, 1, 0), Phase::Eval).unwrap();
    let err = sum_over_paths(&params, &arch, &Tensor::zeros(&[1, 10]), &trace, Unpool::Nearest).unwrap_err();
    assert!(matches!(err, Error::Size(_)));
}

#[test]
fn sign_fault_breaks_path_agreement() {
    let mut broken = 0;
    for seed in 0..10 {
        let inst = tiny_instance(seed);
        let oracle = sum_over_paths(&inst.params, &inst.arch, &inst.class_vectors, &inst.trace, inst.unpool).unwrap();
        let opts = TopDownOptions { unpool: inst.unpool, deconv_sign_fault: true };
        let (faulty, _) = top_down(&inst.params, &inst.arch, &inst.class_vectors, &inst.trace, opts).unwrap();
        if faulty.max_abs_diff(&oracle).unwrap() > 1e-6 {
            broken += 1;
        }
    }
    assert!(broken >= 5, "fault detected on only {broken} of 10 instances");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn top_down_equals_path_sum(seed in any::<u64>()) {
        let inst = tiny_instance(seed);
        let oracle = sum_over_paths(&inst.params, &inst.arch, &inst.class_vectors, &inst.trace, inst.unpool).unwrap();
        let (rendered, _) = top_down(&inst.params, &inst.arch, &inst.class_vectors, &inst.trace, TopDownOptions::with_unpool(inst.unpool)).unwrap();
        prop_assert!(rendered.max_abs_diff(&oracle).unwrap() < 1e-6, "{}", inst.arch);
    }

    #[test]
    fn zero_noise_samples_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = crate::fixtures::tiny_arch(&mut rng);
        let params = random_params(&arch, &mut rng);
        let mut config = GenerativeConfig::uniform(arch.classes());
        config.unpool = if rng.random_bool(0.5) { Unpool::Switch } else { Unpool::Nearest };
        let s = sample(&config, &params, &arch, 3, seed).unwrap();
        prop_assert_eq!(&s.images, &s.means);
        let vectors = config.class_vectors(&s.latents.classes, arch.classes()).unwrap();
        let (again, _) = top_down(&params, &arch, &vectors, &s.latents, TopDownOptions::with_unpool(config.unpool)).unwrap();
        prop_assert!(again.max_abs_diff(&s.images).unwrap() < 1e-5);
    }
}

#[test]
fn sampler_with_closed_masks_draws_blank_images() {
    let arch = Preset::ConvTinyCi.arch();
    let params = ModelParams::<f32>::init(&arch, 0);
    let mut config = GenerativeConfig::uniform(10);
    config.mask_prob = 0.0;
    let s = sample(&config, &params, &arch, 4, 1).unwrap();
    assert!(s.images.data().iter().all(|&v| v == 0.0));
}

#[test]
fn sampled_class_frequencies_follow_the_prior() {
    let arch: ArchitectureSpec = "2x2x1,conv4x1x1:valid:relu,meanpool2,softmax".parse().unwrap();
    let params = ModelParams::<f64>::init(&arch, 0);
    let mut config = GenerativeConfig::uniform(4);
    config.class_prior = vec![0.1, 0.2, 0.3, 0.4];
    let n = 10_000;
    let s = sample(&config, &params, &arch, n, 99).unwrap();
    for (c, &p) in config.class_prior.iter().enumerate() {
        let count = s.latents.classes.iter().filter(|&&k| k == c).count() as f64;
        let se = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((count - n as f64 * p).abs() < 3.0 * se, "class {c}: {count}");
    }
}

#[test]
fn sampler_noise_has_requested_variance() {
    let arch = Preset::ConvTinyCi.arch();
    let params = ModelParams::<f64>::init(&arch, 0);
    let mut config = GenerativeConfig::uniform(10);
    config.noise_var = 0.04;
    let s = sample(&config, &params, &arch, 20, 5).unwrap();
    let resid: Vec<f64> = s.images.data().iter().zip(s.means.data()).map(|(a, b)| a - b).collect();
    let var = resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64;
    assert!((var - 0.04).abs() < 0.002, "{var}");
    let again = sample(&config, &params, &arch, 20, 5).unwrap();
    assert_eq!(again.images, s.images);
}

#[test]
fn generative_config_validation() {
    let mut c = GenerativeConfig::uniform(3);
    assert!(c.validate(3).is_ok());
    assert!(c.validate(4).is_err());
    c.mask_prob = 1.5;
    assert!(c.validate(3).is_err());
    let mut c = GenerativeConfig::uniform(3);
    c.switch_prior = [0.5, 0.5, 0.5, -0.5];
    assert!(c.validate(3).is_err());
    let mut c = GenerativeConfig::uniform(3);
    c.noise_var = -1.0;
    assert!(c.validate(3).is_err());
    let mut c = GenerativeConfig::uniform(3);
    c.class_templates = Some(vec![vec![1.0, 0.0, 0.0]; 2]);
    assert!(c.validate(3).is_err());
}
