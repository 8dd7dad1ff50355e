use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use drmm::model::{write_atomic, ArchitectureSpec, Checkpoint, ModelParams};
use drmm::trainer::{evaluate, semi_supervised_sets, train, EpochStats, MetricsWriter, StepRecord, TrainObserver};
use serde::Serialize;

use crate::config::{DataSection, FileConfig, OutputSection, RunConfig, TrainSection};
use crate::data::{self, check_shape};
use crate::{CliError, DataFlags};

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML file of run settings; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    /// Inline architecture, e.g. `32x32x1,conv16x3x3:half:bn:relu,maxpool2x2,conv10x1x1:valid:bn:relu,meanpool16,softmax`.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub data: DataFlags,
    #[arg(long)]
    pub n_labeled: Option<usize>,
    #[arg(long)]
    pub n_unlabeled: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_start: Option<f64>,
    #[arg(long)]
    pub lr_end: Option<f64>,
    #[arg(long)]
    pub alpha_h: Option<f64>,
    #[arg(long)]
    pub alpha_rc: Option<f64>,
    #[arg(long)]
    pub alpha_kl: Option<f64>,
    #[arg(long)]
    pub alpha_nn: Option<f64>,
    /// `nearest` or `switch`.
    #[arg(long)]
    pub unpool: Option<String>,
    /// `argmax` or `expected`.
    #[arg(long)]
    pub reconstruction: Option<String>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub eval_chunk: Option<usize>,
    /// Epochs between checkpoints; 0 keeps only the final one.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Output directory, relative to `$DRMM_OUTPUT_ROOT` when that is set.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub dry_run: bool,
    /// No per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

impl TrainArgs {
    fn overlay(&self) -> FileConfig {
        let d = &self.data;
        FileConfig {
            preset: self.preset.clone(),
            arch: self.arch.clone(),
            seed: self.seed,
            data: DataSection {
                format: d.format.clone(),
                train_images: d.train_images.clone(),
                train_labels: d.train_labels.clone(),
                test_images: d.test_images.clone(),
                test_labels: d.test_labels.clone(),
                synthetic_count: d.synthetic_count,
                synthetic_seed: d.synthetic_seed,
                n_labeled: self.n_labeled,
                n_unlabeled: self.n_unlabeled,
                n_test: d.n_test,
            },
            train: TrainSection {
                epochs: self.epochs,
                batch_size: self.batch_size,
                lr_start: self.lr_start,
                lr_end: self.lr_end,
                alpha_h: self.alpha_h,
                alpha_rc: self.alpha_rc,
                alpha_kl: self.alpha_kl,
                alpha_nn: self.alpha_nn,
                unpool: self.unpool.clone(),
                reconstruction: self.reconstruction.clone(),
                eval_every: self.eval_every,
                eval_chunk: self.eval_chunk,
                checkpoint_every: self.checkpoint_every,
            },
            output: OutputSection { dir: self.out.clone() },
        }
    }
}

pub fn resolve(args: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut file = match &args.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    file.merge(args.overlay());
    RunConfig::resolve(&file)
}

/// Contents of `summary.toml`.
#[derive(Debug, Serialize)]
struct Summary {
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    message: Option<String>,
    epochs_completed: usize,
    steps: u64,
    labeled_items: usize,
    unlabeled_items: usize,
    test_items: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    last_epoch: Option<EpochLosses>,
}

#[derive(Debug, Serialize)]
struct EpochLosses {
    lr: f64,
    l_h: f64,
    l_rc: f64,
    l_kl: f64,
    l_nn: f64,
    total: f64,
}

struct RunObserver {
    metrics: MetricsWriter<BufWriter<File>, BufWriter<File>>,
    arch: ArchitectureSpec,
    checkpoints: PathBuf,
    every: usize,
    steps: u64,
    epochs: usize,
    last: Option<EpochStats>,
    quiet: bool,
}

impl TrainObserver for RunObserver {
    fn on_step(&mut self, r: &StepRecord) -> drmm::Result<()> {
        self.steps = r.step + 1;
        self.metrics.step(r)
    }

    fn on_epoch(&mut self, s: &EpochStats, params: &ModelParams<f32>) -> drmm::Result<()> {
        self.metrics.epoch(s)?;
        self.epochs = s.epoch + 1;
        if self.every > 0 && self.epochs.is_multiple_of(self.every) {
            let ck = Checkpoint::new(self.arch.clone(), params.clone(), self.steps)?;
            ck.save(&self.checkpoints.join(format!("epoch-{:04}.ckpt", self.epochs)))?;
        }
        if !self.quiet {
            let m = &s.mean;
            let test = s.test_error.map_or_else(String::new, |e| format!(" test_error {e:.2}%"));
            eprintln!("epoch {} lr {:.5} total {:.4} (h {:.4} rc {:.4} kl {:.4} nn {:.4}){test}", s.epoch, s.lr, m.total, m.l_h, m.l_rc, m.l_kl, m.l_nn);
        }
        self.last = Some(s.clone());
        Ok(())
    }
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = toml::to_string(value).map_err(|e| CliError::config(format!("cannot encode {}: {e}", path.display())))?;
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

pub fn run(args: TrainArgs) -> Result<(), CliError> {
    let cfg = resolve(&args)?;
    if args.dry_run {
        let text = toml::to_string(&cfg.to_file_config()).map_err(|e| CliError::config(e.to_string()))?;
        print!("{text}");
        return Ok(());
    }
    let splits = data::load(&cfg.data, cfg.n_test)?;
    check_shape(&splits.train, &cfg.arch, "training")?;
    if let Some(t) = &splits.test {
        check_shape(t, &cfg.arch, "test")?;
    }
    let (labeled, unlabeled) = semi_supervised_sets(&splits.train, cfg.arch.classes(), cfg.n_labeled, cfg.n_unlabeled, cfg.train.seed)?;
    drop(splits.train);
    let test = splits.test;

    let out = &cfg.out_dir;
    let checkpoints = out.join("checkpoints");
    fs::create_dir_all(&checkpoints)?;
    write_toml(&out.join("config.toml"), &cfg.to_file_config())?;

    let mut params = ModelParams::init(&cfg.arch, cfg.train.seed);
    let metrics = MetricsWriter::new(BufWriter::new(File::create(out.join("metrics.tsv"))?), BufWriter::new(File::create(out.join("epochs.tsv"))?))?;
    let mut obs = RunObserver {
        metrics,
        arch: cfg.arch.clone(),
        checkpoints,
        every: cfg.checkpoint_every,
        steps: 0,
        epochs: 0,
        last: None,
        quiet: args.quiet,
    };
    let result = train(&cfg.train, &cfg.arch, &mut params, &labeled, &unlabeled, test.as_ref(), 0, &mut obs);
    let (mut steps_file, mut epochs_file) = obs.metrics.into_inner();
    steps_file.flush()?;
    epochs_file.flush()?;

    let mut summary = Summary {
        status: "completed",
        message: None,
        epochs_completed: obs.epochs,
        steps: obs.steps,
        labeled_items: labeled.len(),
        unlabeled_items: unlabeled.len(),
        test_items: test.as_ref().map_or(0, |t| t.len()),
        test_error: None,
        last_epoch: obs.last.as_ref().map(|s| EpochLosses { lr: s.lr, l_h: s.mean.l_h, l_rc: s.mean.l_rc, l_kl: s.mean.l_kl, l_nn: s.mean.l_nn, total: s.mean.total }),
    };
    if let Err(e) = result {
        summary.status = "aborted";
        summary.message = Some(e.to_string());
        write_toml(&out.join("summary.toml"), &summary)?;
        return Err(e.into());
    }
    Checkpoint::new(cfg.arch.clone(), params.clone(), obs.steps)?.save(&out.join("final.ckpt"))?;
    summary.test_error = match (&obs.last, &test) {
        (Some(s), _) if s.test_error.is_some() => s.test_error,
        (_, Some(t)) => Some(evaluate(&params, &cfg.arch, t, cfg.train.eval_chunk)?),
        _ => None,
    };
    write_toml(&out.join("summary.toml"), &summary)?;
    match summary.test_error {
        Some(e) => println!("test_error\t{e}"),
        None => println!("test_error\t-"),
    }
    println!("output\t{}", out.display());
    Ok(())
}
