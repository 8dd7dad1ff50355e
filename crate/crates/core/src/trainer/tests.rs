use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::Split;
use crate::gradcheck::{check_gradients, relative_error, FD_STEP};
use crate::model::conv_tiny;
use crate::objective::cross_entropy_term;

fn config(epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::from_preset(&crate::model::Preset::ConvTinyCi.defaults(), 3);
    c.epochs = epochs;
    c
}

fn random_images<T: Real>(rng: &mut ChaCha8Rng, n: usize, side: usize) -> Tensor<T> {
    Tensor::from_fn(&[n, side, side, 1], |_| T::from_f64_lossy(rng.random_range(0.0..1.0)))
}

fn half_labeled(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<Option<usize>> {
    (0..n).map(|i| (i < n / 2).then(|| rng.random_range(0..classes))).collect()
}

fn toy_dataset(rng: &mut ChaCha8Rng, n: usize, side: usize) -> Dataset {
    let labels = (0..n).map(|i| i % 10).collect();
    Dataset::new(random_images(rng, n, side), Some(labels), None, Split::Train).unwrap()
}

#[test]
fn schedule_endpoints_and_midpoint() {
    let mnist = |epochs| TrainConfig { epochs, ..TrainConfig::from_preset(&crate::model::Preset::MnistConvSmall.defaults(), 0) };
    let c = mnist(500);
    assert_eq!(lr_schedule(&c, 0), 0.2);
    assert!((lr_schedule(&c, 499) - 0.0001).abs() < 1e-15);
    let c3 = mnist(3);
    assert!((lr_schedule(&c3, 1) - (0.2f64 * 0.0001).sqrt()).abs() < 1e-15);
    assert!((lr_schedule(&c3, 1) - 0.004472).abs() < 1e-6);
    let c1 = mnist(1);
    assert_eq!(lr_schedule(&c1, 0), 0.2);
}

#[test]
fn schedule_is_geometric_and_decreasing() {
    let c = config(30);
    let ratio = lr_schedule(&c, 1) / lr_schedule(&c, 0);
    for e in 0..29 {
        let (a, b) = (lr_schedule(&c, e), lr_schedule(&c, e + 1));
        assert!(b < a);
        assert!((b / a - ratio).abs() < 1e-12);
    }
}

#[test]
fn config_validation() {
    let mut c = config(2);
    assert!(c.validate().is_ok());
    c.batch_size = 7;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = config(2);
    c.lr_end = 0.5;
    assert!(c.validate().is_err());
    c.lr_end = 0.0;
    assert!(c.validate().is_err());
}

#[test]
fn mnist_scale_batches_replicate_the_labeled_set() {
    let plan = make_batches(100, 60_000, 100, 1, 0).unwrap();
    assert_eq!(plan.len(), 1200);
    assert!(plan.iter().all(|b| b.labeled.len() == 50 && b.unlabeled.len() == 50));
    let mut counts = vec![0usize; 100];
    plan.iter().flat_map(|b| &b.labeled).for_each(|&i| counts[i] += 1);
    assert!(counts.iter().all(|&c| c == 600));
    let mut seen: Vec<usize> = plan.iter().flat_map(|b| b.unlabeled.iter().copied()).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..60_000).collect::<Vec<_>>());
}

#[test]
fn batches_depend_on_seed_and_epoch_only() {
    let a = make_batches(30, 200, 20, 9, 4).unwrap();
    assert_eq!(a, make_batches(30, 200, 20, 9, 4).unwrap());
    assert_ne!(a, make_batches(30, 200, 20, 9, 5).unwrap());
    assert_ne!(a, make_batches(30, 200, 20, 10, 4).unwrap());
    let same = make_batches(40, 40, 10, 1, 0).unwrap();
    assert_eq!(same.len(), 8);
    assert!(same.iter().all(|b| b.labeled.len() == 5 && b.unlabeled.len() == 5));
    let ragged = make_batches(7, 105, 10, 1, 0).unwrap();
    assert_eq!(ragged.len(), 21);
    assert!(matches!(make_batches(10, 40, 100, 1, 0), Err(Error::Config(_))));
    assert!(make_batches(0, 40, 10, 1, 0).is_err());
}

#[test]
fn assembled_batches_put_labels_first() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let labeled = toy_dataset(&mut rng, 10, 4);
    let unlabeled = toy_dataset(&mut rng, 20, 4);
    let idx = BatchIndices { labeled: vec![3, 3, 7], unlabeled: vec![0, 19, 5] };
    let b = assemble_batch(&labeled, &unlabeled, &idx).unwrap();
    assert_eq!(b.labels, vec![Some(3), Some(3), Some(7), None, None, None]);
    assert_eq!(b.images.slice_outer(4, 5).unwrap(), unlabeled.images.slice_outer(19, 20).unwrap());
}

#[test]
fn labeled_subsets_are_balanced_and_seeded() {
    let labels: Vec<usize> = (0..1000).map(|i| (i * 7) % 10).collect();
    let a = select_labeled_subset(&labels, 10, 100, 5).unwrap();
    let mut per = BTreeMap::new();
    a.iter().for_each(|&i| *per.entry(labels[i]).or_insert(0) += 1);
    assert!(per.values().all(|&c| c == 10) && per.len() == 10);
    assert_eq!(a, select_labeled_subset(&labels, 10, 100, 5).unwrap());
    assert_ne!(a, select_labeled_subset(&labels, 10, 100, 6).unwrap());
    assert_eq!(select_labeled_subset(&labels, 10, 1000, 1).unwrap(), (0..1000).collect::<Vec<_>>());
    assert!(select_labeled_subset(&labels, 10, 1010, 1).is_err());
    assert!(select_labeled_subset(&labels, 10, 55, 1).is_err());
}

#[test]
fn semi_supervised_sets_draw_seeded_subsets() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let train = toy_dataset(&mut rng, 200, 4);
    let (l, u) = semi_supervised_sets(&train, 10, 20, Some(50), 3).unwrap();
    assert_eq!((l.len(), u.len()), (20, 50));
    assert!(u.labels.is_none());
    let mut per = BTreeMap::new();
    l.labels().unwrap().iter().for_each(|&c| *per.entry(c).or_insert(0) += 1);
    assert!(per.values().all(|&c| c == 2));
    let (l2, u2) = semi_supervised_sets(&train, 10, 20, Some(50), 3).unwrap();
    assert_eq!((l.images, u.images.clone()), (l2.images, u2.images));
    let (_, u3) = semi_supervised_sets(&train, 10, 20, Some(50), 4).unwrap();
    assert_ne!(u.images, u3.images);
    let (_, all) = semi_supervised_sets(&train, 10, 20, None, 3).unwrap();
    assert_eq!(all.images, train.images);
}

#[test]
fn error_counting() {
    let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
    assert_eq!(error_percent(&labels, &labels).unwrap(), 0.0);
    assert_eq!(error_percent(&[3; 100], &labels).unwrap(), 90.0);
    assert_eq!(error_percent(&[1, 2, 3, 4], &[1, 0, 3, 0]).unwrap(), 50.0);
    assert!(matches!(error_percent(&[], &[]), Err(Error::Contract(_))));
    let m = confusion(&[1, 2, 3, 4], &[1, 0, 3, 0], 5).unwrap();
    assert_eq!((m[0][2], m[0][4], m[1][1], m[3][3]), (1, 1, 1, 1));
}

#[test]
fn empty_test_set_is_a_contract_error() {
    let arch = conv_tiny([8, 8, 1]);
    let params = ModelParams::init(&arch, 1);
    assert!(matches!(evaluate(&params, &arch, &Dataset::empty([8, 8, 1]), 10), Err(Error::Contract(_))));
}

#[test]
fn zero_images_give_zero_kl() {
    let arch = conv_tiny([8, 8, 1]);
    let mut params = ModelParams::<f64>::init(&arch, 2);
    let labels = vec![Some(1), None, Some(4), None];
    let report = train_step(&mut params, &arch, &Tensor::zeros(&[4, 8, 8, 1]), &labels, &config(1).step_options(), 0.1).unwrap();
    assert!(report.l_kl.abs() < 1e-12, "{report}");
    assert!((report.l_h - 10f64.ln()).abs() < 1e-12);
    assert_eq!((report.labeled, report.unlabeled), (2, 2));
}

#[test]
fn supervised_weights_reduce_to_plain_cross_entropy_training() {
    let arch = conv_tiny([8, 8, 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let images = random_images::<f64>(&mut rng, 6, 8);
    let labels = half_labeled(&mut rng, 6, 10);
    let start = ModelParams::<f64>::init(&arch, 7);

    let mut ours = start.clone();
    let mut options = config(1).step_options();
    options.weights = LossWeights::new(1.0, 0.0, 0.0, 0.0).unwrap();
    train_step(&mut ours, &arch, &images, &labels, &options, 0.05).unwrap();

    let mut reference = start.clone();
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, &reference, true);
    let x = tape.constant(images.clone());
    let bu = bottom_up_pass(&mut tape, &arch, &reference, &vars, x, Phase::Train, None).unwrap();
    let (loss, _) = cross_entropy_term(&mut tape, bu.posterior, &labels).unwrap();
    let mut grads = tape.backward(loss).unwrap();
    for (v, t) in vars.trainable().into_iter().zip(reference.trainable_mut()) {
        t.set_grad(grads.take(v).unwrap()).unwrap();
    }
    sgd_step(&mut reference.trainable_mut(), 0.05).unwrap();

    for (a, b) in ours.trainable().iter().zip(reference.trainable()) {
        assert!(a.max_abs_diff(b).unwrap() < 1e-12);
    }
    assert_ne!(ours.convs[0].filters, start.convs[0].filters);
}

#[test]
fn unsupervised_path_updates_parameters() {
    let arch = conv_tiny([8, 8, 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let images = random_images::<f32>(&mut rng, 4, 8);
    let start = ModelParams::<f32>::init(&arch, 8);
    let mut params = start.clone();
    let mut options = config(1).step_options();
    options.weights.alpha_h = 0.0;
    let report = train_step(&mut params, &arch, &images, &[None; 4], &options, 0.05).unwrap();
    assert_eq!(report.labeled, 0);
    assert!(params.is_finite());
    for (a, b) in params.trainable().iter().zip(start.trainable()) {
        assert!(a.max_abs_diff(b).unwrap() > 0.0);
    }
}

#[test]
fn repeated_steps_on_one_batch_halve_the_loss() {
    let arch = conv_tiny([8, 8, 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let images = random_images::<f32>(&mut rng, 20, 8);
    let labels = half_labeled(&mut rng, 20, 10);
    let mut params = ModelParams::<f32>::init(&arch, 9);
    let options = config(1).step_options();
    let first = train_step(&mut params, &arch, &images, &labels, &options, 0.01).unwrap().total;
    let mut last = first;
    for _ in 1..200 {
        last = train_step(&mut params, &arch, &images, &labels, &options, 0.01).unwrap().total;
        assert!(params.is_finite());
    }
    assert!(last <= 0.5 * first, "{first} -> {last}");
}

#[test]
fn training_is_deterministic() {
    let arch = conv_tiny([8, 8, 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let labeled = toy_dataset(&mut rng, 10, 8);
    let unlabeled = toy_dataset(&mut rng, 40, 8);
    let test = toy_dataset(&mut rng, 30, 8);
    let mut c = config(3);
    c.batch_size = 10;
    struct Sink(MetricsWriter<Vec<u8>, Vec<u8>>);
    impl TrainObserver for Sink {
        fn on_step(&mut self, r: &StepRecord) -> Result<()> {
            self.0.step(r)
        }
        fn on_epoch(&mut self, e: &EpochStats, _: &ModelParams<f32>) -> Result<()> {
            self.0.epoch(e)
        }
    }
    let run = || {
        let mut params = ModelParams::init(&arch, c.seed);
        let mut sink = Sink(MetricsWriter::new(Vec::new(), Vec::new()).unwrap());
        let stats = train(&c, &arch, &mut params, &labeled, &unlabeled, Some(&test), 0, &mut sink).unwrap();
        (stats, sink.0.into_inner(), params)
    };
    let (a, (steps_a, epochs_a), pa) = run();
    let (b, (steps_b, epochs_b), pb) = run();
    assert_eq!(a, b);
    assert_eq!(steps_a, steps_b);
    assert_eq!(epochs_a, epochs_b);
    assert_eq!(pa, pb);
    let text = String::from_utf8(steps_a).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 8);
    assert!(text.starts_with(STEP_HEADER));
    assert!(a.iter().all(|e| e.test_error.is_some_and(|t| (0.0..=100.0).contains(&t))));
    assert_eq!(a[2].steps, 8);
}

#[test]
fn shape_mismatch_fails_before_training() {
    let arch = conv_tiny([8, 8, 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let wrong = toy_dataset(&mut rng, 10, 6);
    let mut params = ModelParams::init(&arch, 1);
    assert!(matches!(train(&config(1), &arch, &mut params, &wrong, &wrong, None, 0, &mut ()), Err(Error::Config(_))));
}

fn composed_fixture(reconstruction: Reconstruction) -> (ArchitectureSpec, ModelParams<f64>, Tensor<f64>, Vec<Option<usize>>, StepOptions, LatentTrace<f64>) {
    let arch = conv_tiny([8, 8, 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut params = ModelParams::<f64>::init(&arch, 11);
    for t in params.trainable_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    let images = random_images::<f64>(&mut rng, 4, 8);
    let labels = half_labeled(&mut rng, 4, 10);
    let mut options = config(1).step_options();
    options.reconstruction = reconstruction;
    let trace = crate::model::bottom_up(&params, &arch, &images, Phase::Train).unwrap();
    (arch, params, images, labels, options, trace)
}

fn composed_loss(arch: &ArchitectureSpec, params: &ModelParams<f64>, images: &Tensor<f64>, labels: &[Option<usize>], options: &StepOptions, trace: &LatentTrace<f64>) -> impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> {
    let (arch, params, images, labels, options, trace) = (arch.clone(), params.clone(), images.clone(), labels.to_vec(), *options, trace.clone());
    move |tape, vars| {
        let pv = ParamVars::from_trainable(&params, vars)?;
        let x = tape.constant(images.clone());
        Ok(build_objective(tape, &arch, &params, &pv, x, &labels, &options, Some(&trace))?.total)
    }
}

#[test]
fn composed_gradient_matches_finite_differences() {
    for mode in [Reconstruction::Argmax, Reconstruction::Expected] {
        let (arch, params, images, labels, options, trace) = composed_fixture(mode);
        let inputs: Vec<Tensor<f64>> = params.trainable().into_iter().cloned().collect();
        let errors = check_gradients(&inputs, FD_STEP, composed_loss(&arch, &params, &images, &labels, &options, &trace)).unwrap();
        for (i, e) in errors.iter().enumerate() {
            assert!(*e < 1e-5, "{mode} tensor {i}: {e}");
        }
    }
}

#[test]
fn single_precision_gradient_tracks_double() {
    let (arch, params, images, labels, options, trace) = composed_fixture(Reconstruction::Argmax);
    let grads_of = |p64: &ModelParams<f64>| -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, p64, true);
        let x = tape.constant(images.clone());
        let g = build_objective(&mut tape, &arch, p64, &vars, x, &labels, &options, Some(&trace)).unwrap();
        let grads = tape.backward(g.total).unwrap();
        vars.trainable().iter().map(|v| grads.get(*v).unwrap().to_vec()).collect()
    };
    let exact = grads_of(&params);
    let p32: ModelParams<f32> = params.cast();
    let trace32 = LatentTrace::<f32> {
        batch: trace.batch,
        layers: trace
            .layers
            .iter()
            .map(|l| crate::model::LayerLatents { switches: l.switches.clone(), mask: l.mask.clone(), pre_activation: None, activation: None })
            .collect(),
        classes: trace.classes.clone(),
        posterior: None,
    };
    let mut tape = Tape::<f32>::new();
    let vars = ParamVars::register(&mut tape, &p32, true);
    let x = tape.constant(images.cast());
    let g = build_objective(&mut tape, &arch, &p32, &vars, x, &labels, &options, Some(&trace32)).unwrap();
    let grads = tape.backward(g.total).unwrap();
    for (i, v) in vars.trainable().iter().enumerate() {
        let single: Vec<f64> = grads.get(*v).unwrap().iter().map(|&x| x as f64).collect();
        let e = relative_error(&single, &exact[i]);
        assert!(e < 1e-3, "tensor {i}: {e}");
    }
}
