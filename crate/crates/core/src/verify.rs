//! Oracle suites on tiny seeded fixtures: finite-difference gradients,
//! path-sum rendering, generative and serialization round trips, loss
//! identities and preset layer shapes.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{decode_latents, decode_trace, encode_idx_f32, encode_idx_labels, encode_idx_u8, encode_latents, encode_trace, parse_idx_images, parse_idx_labels, LatentLabels};
use crate::error::{Error, Result};
use crate::fixtures::{random_params, tiny_arch, tiny_instance};
use crate::gradcheck::{check_gradients, project, FD_STEP};
use crate::model::{bottom_up, conv_tiny, sample, sum_over_paths, top_down, ArchitectureSpec, Checkpoint, GenerativeConfig, LatentTrace, ModelParams, ParamVars, Phase, Preset, TopDownOptions, Unpool};
use crate::objective::{loss_h, loss_kl, loss_nn, total_term, LossTerms, LossWeights};
use crate::tensor::{BatchNormMode, ConvMode, RunningStats, Switch, Tape, Tensor, Var, BN_EPS};
use crate::trainer::{build_objective, Reconstruction, StepOptions};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const COMPOSED_TOLERANCE: f64 = 1e-5;
pub const PATH_TOLERANCE: f64 = 1e-6;
pub const ROUND_TRIP_TOLERANCE: f64 = 1e-5;
pub const OP_POINTS: u64 = 10;
pub const PATH_NETS: u64 = 50;
pub const SAMPLE_DRAWS: u64 = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Suite {
    Gradcheck,
    Paths,
    Roundtrip,
    Losses,
    Shapes,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Gradcheck, Suite::Paths, Suite::Roundtrip, Suite::Losses, Suite::Shapes];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Gradcheck => "gradcheck",
            Suite::Paths => "paths",
            Suite::Roundtrip => "roundtrip",
            Suite::Losses => "losses",
            Suite::Shapes => "shapes",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Suite> {
        Suite::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Suite::ALL.iter().map(|x| x.name()).collect();
            Error::config(format!("unknown suite {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VerifyOptions {
    /// Negates the transposed convolution that produces the image.
    pub deconv_sign_fault: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteOutcome {
    pub suite: Suite,
    pub checks: usize,
    /// Largest error measure seen (relative error, absolute difference, ...).
    pub worst: f64,
    /// First failing case as `key=value` pairs.
    pub counterexample: Option<String>,
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        self.counterexample.is_none()
    }
}

impl fmt::Display for SuiteOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{status} {} ({} checks, worst {:.3e})", self.suite, self.checks, self.worst)?;
        if let Some(c) = &self.counterexample {
            write!(f, "\n  counterexample: {c}")?;
        }
        Ok(())
    }
}

struct Checker {
    suite: Suite,
    checks: usize,
    worst: f64,
    counterexample: Option<String>,
}

impl Checker {
    fn new(suite: Suite) -> Self {
        Checker { suite, checks: 0, worst: 0.0, counterexample: None }
    }

    /// Records one check; `measure` enters the worst-case statistic.
    fn check(&mut self, ok: bool, measure: f64, describe: impl FnOnce() -> String) {
        self.checks += 1;
        if measure.is_nan() {
            self.worst = f64::NAN;
        } else if measure > self.worst {
            self.worst = measure;
        }
        if (!ok || measure.is_nan()) && self.counterexample.is_none() {
            self.counterexample = Some(describe());
        }
    }

    fn finish(self) -> SuiteOutcome {
        SuiteOutcome { suite: self.suite, checks: self.checks, worst: self.worst, counterexample: self.counterexample }
    }
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<SuiteOutcome> {
    match suite {
        Suite::Gradcheck => gradcheck_suite(opts),
        Suite::Paths => paths_suite(opts),
        Suite::Roundtrip => roundtrip_suite(opts),
        Suite::Losses => losses_suite(opts),
        Suite::Shapes => shapes_suite(),
    }
}

pub fn run_all(opts: &VerifyOptions) -> Result<Vec<SuiteOutcome>> {
    Suite::ALL.iter().map(|&s| run_suite(s, opts)).collect()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values at least 0.05 away from zero so rectifier kinks stay out of reach
/// of the difference step.
fn random_off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

/// Distinct values per 2×2 block separated by at least 0.05, so the pooling
/// argmax never flips under the difference step.
fn random_spread(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        ranks.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_fn(shape, |i| -1.0 + 2.0 * (ranks[i] as f64 + 0.5) / len as f64)
}

type OpCheck = fn(&mut ChaCha8Rng) -> Result<Vec<f64>>;

fn op_conv(rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let mode = [ConvMode::Full, ConvMode::Half, ConvMode::Valid][rng.random_range(0..3)];
    let x = random(&[2, 5, 4, 2], rng);
    let f = random(&[3, 3, 3, 2], rng);
    let mut t = Tape::new();
    let (xv, fv) = (t.constant(x.clone()), t.constant(f.clone()));
    let y = t.conv2d(xv, fv, mode)?;
    let w = random(t.shape(y), rng);
    check_gradients(&[x, f], FD_STEP, |t, v| {
        let y = t.conv2d(v[0], v[1], mode)?;
        project(t, y, &w)
    })
}

fn op_conv_transpose(rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let mode = [ConvMode::Full, ConvMode::Half, ConvMode::Valid][rng.random_range(0..3)];
    let x = random(&[2, 5, 4, 2], rng);
    let f = random(&[3, 3, 3, 2], rng);
    let mut t = Tape::new();
    let (xv, fv) = (t.constant(x.clone()), t.constant(f.clone()));
    let y = t.conv2d(xv, fv, mode)?;
    let z = random(t.shape(y), rng);
    let wx = random(x.shape(), rng);
    check_gradients(&[z, f], FD_STEP, |t, v| {
        let y = t.conv2d_transpose(v[0], v[1], mode)?;
        project(t, y, &wx)
    })
}

fn op_maxpool(rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let x = random_spread(&[2, 4, 6, 2], rng);
    let w = random(&[2, 2, 3, 2], rng);
    check_gradients(&[x], FD_STEP, |t, v| {
        let (p, _) = t.maxpool2x2(v[0])?;
        project(t, p, &w)
    })
}

fn op_maxpool_fixed(rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let x = random(&[2, 4, 6, 2], rng);
    let w = random(&[2, 2, 3, 2], rng);
    let switches: Vec<Switch> = (0..w.len()).map(|_| Switch::from_index(rng.random_range(0..4)).expect("index below 4")).collect();
    check_gradients(&[x], FD_STEP, |t, v| {
        let p = t.maxpool2x2_fixed(v[0], &switches)?;
        project(t, p, &w)
    })
}

fn op_meanpool(rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let x = random(&[2, 4, 6, 2], rng);
    let w = random(&[2, 2, 3, 2], rng);
    check_gradients(&[x], FD_STEP, |t, v| {
        let p = t.meanpool(v[0], 2)?;
        project(t, p, &w)
    })
}

fn op_upsample(rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let x = random(&[2, 2, 3, 2], rng);
    let w = random(&[2, 4, 6, 2], rng);
    check_gradients(&[x], FD_STEP, |t, v| {
        let p = t.upsample_nn(v[0], 2)?;
        project(t, p, &w)
    })
}

fn op_unpool_switch(rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let x = random(&[2, 2, 3, 2], rng);
    let w = random(&[2, 4, 6, 2], rng);
    let switches: Vec<Switch> = (0..x.len()).map(|_| Switch::from_index(rng.random_range(0..4)).expect("index below 4")).collect();
    check_gradients(&[x], FD_STEP, |t, v| {
        let p = t.unpool_switch(v[0], &switches)?;
        project(t, p, &w)
    })
}

fn op_relu(rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let x = random_off_zero(&[3, 2, 2, 4], rng);
    let w = random(&[3, 2, 2, 4], rng);
    check_gradients(&[x], FD_STEP, |t, v| {
        let (r, _) = t.relu(v[0]);
        project(t, r, &w)
    })
}

fn op_apply_mask(rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let x = random(&[3, 2, 2, 4], rng);
    let w = random(&[3, 2, 2, 4], rng);
    let mask: Vec<bool> = (0..x.len()).map(|_| rng.random()).collect();
    check_gradients(&[x], FD_STEP, |t, v| {
        let m = t.apply_mask(v[0], &mask)?;
        project(t, m, &w)
    })
}

fn op_neg_part(rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let x = random_off_zero(&[3, 2, 2, 4], rng);
    let w = random(&[3, 2, 2, 4], rng);
    check_gradients(&[x], FD_STEP, |t, v| {
        let r = t.neg_part(v[0]);
        project(t, r, &w)
    })
}

fn op_arithmetic(rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let x = random(&[3, 2, 2, 4], rng);
    let y = random(&[3, 2, 2, 4], rng);
    let w = random(&[3, 2, 2, 4], rng);
    check_gradients(&[x, y], FD_STEP, |t, v| {
        let a = t.mul(v[0], v[1])?;
        let b = t.sub(a, v[1])?;
        let c = t.add(b, v[0])?;
        let d = t.square(c);
        let e = t.scale(d, 0.7);
        project(t, e, &w)
    })
}

fn op_log_add_row(rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let pos = Tensor::from_fn(&[3, 4], |_| rng.random_range(0.1..2.0));
    let row: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = random(&[3, 4], rng);
    check_gradients(&[pos], FD_STEP, |t, v| {
        let l = t.log_floor(v[0], 1e-12);
        let a = t.add_row(l, &row)?;
        project(t, a, &w)
    })
}

fn op_softmax(rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let logits = random(&[3, 10], rng);
    let w = random(&[3, 10], rng);
    check_gradients(&[logits], FD_STEP, |t, v| {
        let q = t.softmax(v[0])?;
        project(t, q, &w)
    })
}

fn op_gather_sums(rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let x = random(&[3, 10], rng);
    let idx: Vec<usize> = (0..4).map(|_| rng.random_range(0..30)).collect();
    let w = random(&[3], rng);
    check_gradients(&[x], FD_STEP, |t, v| {
        let g = t.gather(v[0], &idx)?;
        let s = t.square(g);
        let total = t.sum(s);
        let rows = t.sum_rows(v[0])?;
        let r = project(t, rows, &w)?;
        t.weighted_sum(&[(total, 0.5), (r, -1.5)])
    })
}

fn op_batchnorm_train(rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let x = random(&[3, 2, 2, 3], rng);
    let g = random(&[3], rng);
    let b = random(&[3], rng);
    let w = random(&[3, 2, 2, 3], rng);
    check_gradients(&[x, g, b], FD_STEP, |t, v| {
        let (y, _) = t.batchnorm(v[0], v[1], v[2], BatchNormMode::Train { eps: BN_EPS })?;
        project(t, y, &w)
    })
}

fn op_batchnorm_eval(rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let x = random(&[3, 2, 2, 3], rng);
    let g = random(&[3], rng);
    let b = random(&[3], rng);
    let w = random(&[3, 2, 2, 3], rng);
    let stats = RunningStats { mean: (0..3).map(|_| rng.random_range(-0.5..0.5)).collect(), var: (0..3).map(|_| rng.random_range(0.2..2.0)).collect() };
    check_gradients(&[x, g, b], FD_STEP, |t, v| {
        let (y, _) = t.batchnorm(v[0], v[1], v[2], stats.mode(BN_EPS))?;
        project(t, y, &w)
    })
}

pub const OP_CHECKS: [(&str, OpCheck); 16] = [
    ("conv2d", op_conv),
    ("conv2d_transpose", op_conv_transpose),
    ("maxpool2x2", op_maxpool),
    ("maxpool2x2_fixed", op_maxpool_fixed),
    ("meanpool", op_meanpool),
    ("upsample_nn", op_upsample),
    ("unpool_switch", op_unpool_switch),
    ("relu", op_relu),
    ("apply_mask", op_apply_mask),
    ("neg_part", op_neg_part),
    ("add/sub/mul/square/scale", op_arithmetic),
    ("log_floor/add_row", op_log_add_row),
    ("softmax", op_softmax),
    ("gather/sum/sum_rows/weighted_sum", op_gather_sums),
    ("batchnorm/train", op_batchnorm_train),
    ("batchnorm/eval", op_batchnorm_eval),
];

/// ConvTiny on 8×8 inputs with perturbed initial parameters, half the batch
/// labeled, and the latents of one train-phase bottom-up pass held fixed so
/// the objective is smooth in the parameters.
pub struct ComposedFixture {
    pub arch: ArchitectureSpec,
    pub params: ModelParams<f64>,
    pub images: Tensor<f64>,
    pub labels: Vec<Option<usize>>,
    pub options: StepOptions,
    pub trace: LatentTrace<f64>,
}

impl ComposedFixture {
    pub fn new(reconstruction: Reconstruction, seed: u64) -> Result<Self> {
        let arch = conv_tiny([8, 8, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::<f64>::init(&arch, seed.wrapping_add(1));
        for t in params.trainable_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        }
        let images = Tensor::from_fn(&[4, 8, 8, 1], |_| rng.random_range(0.0..1.0));
        let labels = (0..4).map(|i| (i < 2).then(|| rng.random_range(0..10))).collect();
        let defaults = Preset::ConvTinyCi.defaults();
        let weights = LossWeights::new(defaults.alpha_h, defaults.alpha_rc, defaults.alpha_kl, defaults.alpha_nn)?;
        let options = StepOptions { weights, unpool: Unpool::default(), reconstruction };
        let trace = bottom_up(&params, &arch, &images, Phase::Train)?;
        Ok(ComposedFixture { arch, params, images, labels, options, trace })
    }

    /// Relative gradient error per trainable tensor.
    pub fn gradient_errors(&self) -> Result<Vec<f64>> {
        let inputs: Vec<Tensor<f64>> = self.params.trainable().into_iter().cloned().collect();
        check_gradients(&inputs, FD_STEP, |tape: &mut Tape<f64>, vars: &[Var]| {
            let pv = ParamVars::from_trainable(&self.params, vars)?;
            let x = tape.constant(self.images.clone());
            Ok(build_objective(tape, &self.arch, &self.params, &pv, x, &self.labels, &self.options, Some(&self.trace))?.total)
        })
    }
}

fn gradcheck_suite(opts: &VerifyOptions) -> Result<SuiteOutcome> {
    let mut c = Checker::new(Suite::Gradcheck);
    for (name, op) in OP_CHECKS {
        for point in 0..OP_POINTS {
            let seed = opts.seed.wrapping_mul(1_000_003).wrapping_add(point);
            let errors = op(&mut ChaCha8Rng::seed_from_u64(seed))?;
            for (i, &e) in errors.iter().enumerate() {
                c.check(e < OP_TOLERANCE, e, || format!("op={name} seed={seed} input={i} relative_error={e:e} tolerance={OP_TOLERANCE:e}"));
            }
        }
    }
    for mode in [Reconstruction::Argmax, Reconstruction::Expected] {
        let fixture = ComposedFixture::new(mode, 10 + opts.seed)?;
        for (i, &e) in fixture.gradient_errors()?.iter().enumerate() {
            c.check(e < COMPOSED_TOLERANCE, e, || format!("op=total_loss model=convtiny-8x8 reconstruction={mode} tensor={i} relative_error={e:e} tolerance={COMPOSED_TOLERANCE:e}"));
        }
    }
    Ok(c.finish())
}

fn paths_suite(opts: &VerifyOptions) -> Result<SuiteOutcome> {
    let mut c = Checker::new(Suite::Paths);
    for i in 0..PATH_NETS {
        let seed = opts.seed.wrapping_mul(1_000_003).wrapping_add(i);
        let inst = tiny_instance(seed);
        let oracle = sum_over_paths(&inst.params, &inst.arch, &inst.class_vectors, &inst.trace, inst.unpool)?;
        let td = TopDownOptions { unpool: inst.unpool, deconv_sign_fault: opts.deconv_sign_fault };
        let (rendered, _) = top_down(&inst.params, &inst.arch, &inst.class_vectors, &inst.trace, td)?;
        let diff = rendered.max_abs_diff(&oracle)?;
        c.check(diff < PATH_TOLERANCE, diff, || {
            format!("seed={seed} arch=\"{}\" unpool={} max_abs_diff={diff:e} tolerance={PATH_TOLERANCE:e}", inst.arch, inst.unpool)
        });
    }
    Ok(c.finish())
}

fn roundtrip_suite(opts: &VerifyOptions) -> Result<SuiteOutcome> {
    let mut c = Checker::new(Suite::Roundtrip);
    for i in 0..SAMPLE_DRAWS {
        let seed = opts.seed.wrapping_mul(1_000_003).wrapping_add(i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = tiny_arch(&mut rng);
        let params = random_params(&arch, &mut rng);
        let mut config = GenerativeConfig::uniform(arch.classes());
        config.unpool = if rng.random_bool(0.5) { Unpool::Switch } else { Unpool::Nearest };
        let s = sample(&config, &params, &arch, 1, seed)?;
        let vectors = config.class_vectors(&s.latents.classes, arch.classes())?;
        let td = TopDownOptions { unpool: config.unpool, deconv_sign_fault: opts.deconv_sign_fault };
        let (again, _) = top_down(&params, &arch, &vectors, &s.latents, td)?;
        let diff = again.max_abs_diff(&s.images)?;
        c.check(diff < ROUND_TRIP_TOLERANCE, diff, || format!("case=sample seed={seed} arch=\"{arch}\" unpool={} max_abs_diff={diff:e}", config.unpool));

        let sidecar: LatentTrace<f64> = decode_trace(&encode_trace(&s.latents))?;
        let same = sidecar.classes == s.latents.classes
            && sidecar.layers.iter().zip(&s.latents.layers).all(|(a, b)| a.mask == b.mask && a.switches == b.switches);
        c.check(same, 0.0, || format!("case=trace_sidecar seed={seed} arch=\"{arch}\""));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let bytes = Tensor::from_fn(&[3, 5, 4, 1], |_| f32::from(rng.random::<u8>()) / 255.0);
    let back = parse_idx_images(&encode_idx_u8(&bytes)?)?;
    c.check(back == bytes, 0.0, || "case=idx_u8".into());
    let floats = Tensor::from_fn(&[2, 3, 3, 2], |_| rng.random_range(-2.0f32..2.0));
    let back = parse_idx_images(&encode_idx_f32(&floats)?)?;
    c.check(back == floats, 0.0, || "case=idx_f32".into());
    let labels: Vec<usize> = (0..17).map(|_| rng.random_range(0..10)).collect();
    c.check(parse_idx_labels(&encode_idx_labels(&labels)?)? == labels, 0.0, || "case=idx_labels".into());
    let latents: Vec<LatentLabels> = (0..5).map(|_| LatentLabels::from_array(std::array::from_fn(|_| rng.random_range(-1.0..1.0)))).collect();
    c.check(decode_latents(&encode_latents(&latents))? == latents, 0.0, || "case=latent_sidecar".into());
    let arch = Preset::ConvTinyCi.arch();
    let ckpt = Checkpoint::new(arch.clone(), ModelParams::init(&arch, opts.seed), 7)?;
    let bytes = ckpt.to_bytes()?;
    let back = Checkpoint::from_bytes(&bytes)?;
    c.check(back.to_bytes()? == bytes && back.params == ckpt.params, 0.0, || "case=checkpoint".into());
    Ok(c.finish())
}

fn distribution(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(n * classes);
    for _ in 0..n {
        let logits: Vec<f64> = (0..classes).map(|_| rng.random_range(-4.0..4.0)).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        data.extend(e.iter().map(|v| v / z));
    }
    Tensor::new(vec![n, classes], data).expect("sized")
}

fn losses_suite(opts: &VerifyOptions) -> Result<SuiteOutcome> {
    let mut c = Checker::new(Suite::Losses);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for case in 0..100 {
        let classes = rng.random_range(2..12);
        let n = rng.random_range(1..6);
        let prior = distribution(&mut rng, 1, classes).into_data();
        let q = distribution(&mut rng, n, classes);
        let kl = loss_kl(&q, &prior)?;
        c.check(kl > 1e-9, -kl.min(0.0), || format!("case={case} check=kl_positive kl={kl:e}"));
        let at_prior = Tensor::new(vec![n, classes], prior.iter().copied().cycle().take(n * classes).collect())?;
        let zero = loss_kl(&at_prior, &prior)?;
        c.check(zero.abs() <= 1e-9, zero.abs(), || format!("case={case} check=kl_at_prior kl={zero:e}"));

        let values: Vec<f64> = (0..rng.random_range(1..40)).map(|_| rng.random_range(-2.0..2.0)).collect();
        let any_negative = values.iter().any(|&v| v < 0.0);
        let nn = loss_nn(&[Tensor::new(vec![1, values.len()], values.clone())?])?;
        c.check(nn >= 0.0 && (nn > 0.0) == any_negative, 0.0, || format!("case={case} check=nn_sign nn={nn:e} values={values:?}"));
        let abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
        let nn_abs = loss_nn(&[Tensor::new(vec![1, abs.len()], abs)?])?;
        c.check(nn_abs == 0.0, nn_abs, || format!("case={case} check=nn_nonnegative nn={nn_abs:e}"));

        let weights = LossWeights::new(rng.random_range(0.0..3.0), rng.random_range(0.0..3.0), rng.random_range(0.0..3.0), rng.random_range(0.0..3.0))?;
        let comps: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..10.0));
        let mut tape = Tape::<f64>::new();
        let mut term = |v: f64| tape.constant(Tensor::new(vec![], vec![v]).expect("scalar"));
        let terms = LossTerms { l_h: term(comps[0]), l_rc: term(comps[1]), l_kl: term(comps[2]), l_nn: term(comps[3]), labeled: 1, unlabeled: 1 };
        let (total, report) = total_term(&mut tape, &weights, &terms)?;
        let want: f64 = weights.as_array().iter().zip(&comps).map(|(w, v)| w * v).sum();
        let got = tape.value(total).scalar()?;
        let diff = (got - want).abs().max((report.total - want).abs());
        c.check(diff <= 1e-6, diff, || format!("case={case} check=weighted_total got={got} want={want}"));
    }
    for n in 1..=4 {
        let uniform = Tensor::full(&[n, 10], 0.1);
        let labels: Vec<Option<usize>> = (0..n).map(|i| Some(i % 10)).collect();
        let (ce, _) = loss_h(&uniform, &labels)?;
        let diff = (ce - 10f64.ln()).abs();
        c.check(diff <= 1e-9, diff, || format!("check=uniform_cross_entropy n={n} value={ce}"));
    }
    Ok(c.finish())
}

const CONV_SMALL_SHAPES: [[usize; 3]; 9] = [[32, 32, 32], [16, 16, 32], [14, 14, 64], [16, 16, 64], [8, 8, 64], [6, 6, 128], [6, 6, 10], [1, 1, 10], [1, 1, 10]];
const CONV_LARGE_SHAPES: [[usize; 3]; 13] = [
    [32, 32, 96],
    [34, 34, 96],
    [36, 36, 96],
    [18, 18, 96],
    [16, 16, 192],
    [18, 18, 192],
    [16, 16, 192],
    [8, 8, 192],
    [6, 6, 192],
    [6, 6, 192],
    [6, 6, 10],
    [1, 1, 10],
    [1, 1, 10],
];

type ShapeCase = (Preset, [usize; 3], &'static [[usize; 3]]);

fn shapes_suite() -> Result<SuiteOutcome> {
    let mut c = Checker::new(Suite::Shapes);
    let cases: [ShapeCase; 4] = [
        (Preset::MnistConvSmall, [28, 28, 1], &CONV_SMALL_SHAPES),
        (Preset::SvhnConvLarge, [32, 32, 3], &CONV_LARGE_SHAPES),
        (Preset::Cifar10ConvLarge, [32, 32, 3], &CONV_LARGE_SHAPES),
        (Preset::SyntheticConvLarge, [32, 32, 1], &CONV_LARGE_SHAPES),
    ];
    for (preset, input, expected) in cases {
        let arch = preset.arch();
        c.check(arch.input() == input, 0.0, || format!("preset={} input={:?} expected={input:?}", preset.name(), arch.input()));
        c.check(arch.shapes() == expected, 0.0, || format!("preset={} shapes={:?} expected={expected:?}", preset.name(), arch.shapes()));
    }
    let small = Preset::MnistConvSmall.arch();
    let params = ModelParams::<f32>::init(&small, 0);
    let trace = bottom_up(&params, &small, &Tensor::zeros(&[1, 28, 28, 1]), Phase::Eval)?;
    let produced: Vec<Vec<usize>> = trace.layers.iter().map(|l| l.activation.as_ref().map(|a| a.shape()[1..].to_vec()).unwrap_or_default()).collect();
    let want: Vec<Vec<usize>> = CONV_SMALL_SHAPES.iter().map(|s| s.to_vec()).collect();
    c.check(produced == want, 0.0, || format!("preset=mnist-convsmall check=bottom_up shapes={produced:?}"));
    Ok(c.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn fast_suites_pass() {
        for s in [Suite::Paths, Suite::Roundtrip, Suite::Losses, Suite::Shapes] {
            let out = run_suite(s, &VerifyOptions::default()).unwrap();
            assert!(out.passed(), "{out}");
            assert!(out.checks > 0);
        }
    }

    #[test]
    fn gradient_suite_passes() {
        let out = run_suite(Suite::Gradcheck, &VerifyOptions::default()).unwrap();
        assert!(out.passed(), "{out}");
        assert!(out.checks >= OP_CHECKS.len() * OP_POINTS as usize);
    }

    #[test]
    fn sign_fault_is_caught_by_the_path_suite() {
        let out = run_suite(Suite::Paths, &VerifyOptions { deconv_sign_fault: true, seed: 0 }).unwrap();
        assert!(!out.passed());
        let text = out.counterexample.unwrap();
        assert!(text.contains("seed=") && text.contains("max_abs_diff="), "{text}");
    }

    #[test]
    fn pooling_inputs_keep_a_margin() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_spread(&[1, 4, 4, 1], &mut rng);
        let mut v = t.data().to_vec();
        v.sort_by(f64::total_cmp);
        assert!(v.windows(2).all(|w| w[1] - w[0] > 0.1));
    }
}
