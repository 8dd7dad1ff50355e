//! Run configuration: a TOML file of dotted keys, overridden by flags and
//! completed from preset defaults.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use drmm::model::{ArchitectureSpec, Preset, Unpool};
use drmm::objective::LossWeights;
use drmm::trainer::{Reconstruction, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const OUTPUT_ROOT_ENV: &str = "DRMM_OUTPUT_ROOT";
pub const DEFAULT_CHECKPOINT_EVERY: usize = 10;
pub const DEFAULT_EVAL_CHUNK: usize = 500;

#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arch: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// `idx`, `cifar` or `synthetic`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_labeled: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_unlabeled: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_test: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_start: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_end: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_h: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_rc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_nn: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unpool: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reconstruction: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_chunk: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

fn take<T>(base: &mut Option<T>, over: Option<T>) {
    if over.is_some() {
        *base = over;
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message)))
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::config(format!("invalid config: {e}")))
    }

    /// Replaces every field that `over` sets.
    pub fn merge(&mut self, over: FileConfig) {
        take(&mut self.preset, over.preset);
        take(&mut self.arch, over.arch);
        take(&mut self.seed, over.seed);
        let (d, o) = (&mut self.data, over.data);
        take(&mut d.format, o.format);
        take(&mut d.train_images, o.train_images);
        take(&mut d.train_labels, o.train_labels);
        take(&mut d.test_images, o.test_images);
        take(&mut d.test_labels, o.test_labels);
        take(&mut d.synthetic_count, o.synthetic_count);
        take(&mut d.synthetic_seed, o.synthetic_seed);
        take(&mut d.n_labeled, o.n_labeled);
        take(&mut d.n_unlabeled, o.n_unlabeled);
        take(&mut d.n_test, o.n_test);
        let (t, o) = (&mut self.train, over.train);
        take(&mut t.epochs, o.epochs);
        take(&mut t.batch_size, o.batch_size);
        take(&mut t.lr_start, o.lr_start);
        take(&mut t.lr_end, o.lr_end);
        take(&mut t.alpha_h, o.alpha_h);
        take(&mut t.alpha_rc, o.alpha_rc);
        take(&mut t.alpha_kl, o.alpha_kl);
        take(&mut t.alpha_nn, o.alpha_nn);
        take(&mut t.unpool, o.unpool);
        take(&mut t.reconstruction, o.reconstruction);
        take(&mut t.eval_every, o.eval_every);
        take(&mut t.eval_chunk, o.eval_chunk);
        take(&mut t.checkpoint_every, o.checkpoint_every);
        take(&mut self.output.dir, over.output.dir);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Idx { train_images: PathBuf, train_labels: PathBuf, test: Option<(PathBuf, PathBuf)> },
    Cifar { train: PathBuf, test: Option<PathBuf> },
    Synthetic { count: usize, seed: u64 },
}

/// Fully validated settings of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Option<Preset>,
    pub arch: ArchitectureSpec,
    pub data: DataSource,
    pub n_labeled: usize,
    pub n_unlabeled: Option<usize>,
    pub n_test: Option<usize>,
    pub train: TrainConfig,
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
}

/// Labeled-set size and default data of each preset.
fn preset_data(p: Preset) -> (usize, Option<DataSource>) {
    match p {
        Preset::MnistConvSmall => (100, None),
        Preset::SvhnConvLarge => (1000, None),
        Preset::Cifar10ConvLarge => (4000, None),
        Preset::SyntheticConvLarge => (4000, Some(DataSource::Synthetic { count: 60_000, seed: 0 })),
        Preset::ConvTinyCi => (1000, Some(DataSource::Synthetic { count: 10_000, seed: 0 })),
    }
}

/// Relative paths land under `$DRMM_OUTPUT_ROOT` when it is set.
pub fn output_path(p: &Path) -> PathBuf {
    match env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() && !root.is_empty() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn existing(p: &Path, what: &str) -> Result<PathBuf, CliError> {
    if p.is_file() {
        Ok(p.to_path_buf())
    } else {
        Err(CliError::config(format!("{what} {} does not exist", p.display())))
    }
}

fn data_source(d: &DataSection, default: Option<DataSource>) -> Result<DataSource, CliError> {
    let format = match (&d.format, &d.train_images, d.synthetic_count) {
        (Some(f), _, _) => f.clone(),
        (None, Some(_), _) => "idx".to_string(),
        (None, None, Some(_)) => "synthetic".to_string(),
        (None, None, None) => return default.ok_or_else(|| CliError::config("no training data: set data.train_images or data.synthetic_count")),
    };
    let pair = |images: &Option<PathBuf>, labels: &Option<PathBuf>, what: &str| -> Result<Option<(PathBuf, PathBuf)>, CliError> {
        match (images, labels) {
            (Some(i), Some(l)) => Ok(Some((existing(i, &format!("{what} images"))?, existing(l, &format!("{what} labels"))?))),
            (None, None) => Ok(None),
            _ => Err(CliError::config(format!("{what} images and labels must be given together"))),
        }
    };
    match format.as_str() {
        "idx" => {
            let (train_images, train_labels) = pair(&d.train_images, &d.train_labels, "data.train")?.ok_or_else(|| CliError::config("idx data needs data.train_images and data.train_labels"))?;
            Ok(DataSource::Idx { train_images, train_labels, test: pair(&d.test_images, &d.test_labels, "data.test")? })
        }
        "cifar" => {
            if d.train_labels.is_some() || d.test_labels.is_some() {
                return Err(CliError::config("cifar records carry their labels; drop data.*_labels"));
            }
            let train = existing(d.train_images.as_deref().ok_or_else(|| CliError::config("cifar data needs data.train_images"))?, "cifar training file")?;
            let test = d.test_images.as_deref().map(|p| existing(p, "cifar test file")).transpose()?;
            Ok(DataSource::Cifar { train, test })
        }
        "synthetic" => {
            let default_count = match default {
                Some(DataSource::Synthetic { count, .. }) => count,
                _ => 10_000,
            };
            Ok(DataSource::Synthetic { count: d.synthetic_count.unwrap_or(default_count), seed: d.synthetic_seed.unwrap_or(0) })
        }
        other => Err(CliError::config(format!("unknown data.format {other:?}; expected idx, cifar or synthetic"))),
    }
}

fn parse_value<T: std::str::FromStr<Err = drmm::Error>>(v: &Option<String>, default: T) -> Result<T, CliError> {
    v.as_deref().map_or(Ok(default), |s| s.parse().map_err(CliError::from))
}

impl RunConfig {
    pub fn resolve(file: &FileConfig) -> Result<Self, CliError> {
        let preset = file.preset.as_deref().map(str::parse::<Preset>).transpose()?;
        let arch = match (&file.arch, preset) {
            (Some(text), _) => text.parse::<ArchitectureSpec>()?,
            (None, Some(p)) => p.arch(),
            (None, None) => return Err(CliError::config("set a preset or an inline arch")),
        };
        let (default_labeled, default_data) = preset.map_or((100, None), preset_data);
        let defaults = preset.unwrap_or(Preset::MnistConvSmall).defaults();
        let seed = file.seed.unwrap_or(0);
        let t = &file.train;
        let weights = LossWeights::new(
            t.alpha_h.unwrap_or(defaults.alpha_h),
            t.alpha_rc.unwrap_or(defaults.alpha_rc),
            t.alpha_kl.unwrap_or(defaults.alpha_kl),
            t.alpha_nn.unwrap_or(defaults.alpha_nn),
        )?;
        let train = TrainConfig {
            epochs: t.epochs.unwrap_or(defaults.epochs),
            batch_size: t.batch_size.unwrap_or(defaults.batch_size),
            lr_start: t.lr_start.unwrap_or(defaults.lr_start),
            lr_end: t.lr_end.unwrap_or(defaults.lr_end),
            weights,
            seed,
            unpool: parse_value(&t.unpool, Unpool::default())?,
            reconstruction: parse_value(&t.reconstruction, Reconstruction::default())?,
            eval_every: t.eval_every.unwrap_or(1),
            eval_chunk: t.eval_chunk.unwrap_or(DEFAULT_EVAL_CHUNK),
        };
        train.validate()?;
        let n_labeled = file.data.n_labeled.unwrap_or(default_labeled);
        if n_labeled == 0 || !n_labeled.is_multiple_of(arch.classes()) {
            return Err(CliError::config(format!("data.n_labeled = {n_labeled} must be a positive multiple of the {} classes", arch.classes())));
        }
        if file.data.n_unlabeled == Some(0) || file.data.n_test == Some(0) {
            return Err(CliError::config("data.n_unlabeled and data.n_test must be positive when set"));
        }
        let data = data_source(&file.data, default_data)?;
        let name = preset.map_or("custom", Preset::name);
        let out_dir = file.output.dir.clone().unwrap_or_else(|| PathBuf::from(format!("runs/{name}-seed{seed}")));
        Ok(RunConfig {
            preset,
            arch,
            data,
            n_labeled,
            n_unlabeled: file.data.n_unlabeled,
            n_test: file.data.n_test,
            train,
            checkpoint_every: t.checkpoint_every.unwrap_or(DEFAULT_CHECKPOINT_EVERY),
            out_dir: output_path(&out_dir),
        })
    }

    /// Every setting spelled out, in the file format.
    pub fn to_file_config(&self) -> FileConfig {
        let mut data = DataSection { n_labeled: Some(self.n_labeled), n_unlabeled: self.n_unlabeled, n_test: self.n_test, ..DataSection::default() };
        match &self.data {
            DataSource::Idx { train_images, train_labels, test } => {
                data.format = Some("idx".into());
                data.train_images = Some(train_images.clone());
                data.train_labels = Some(train_labels.clone());
                if let Some((i, l)) = test {
                    data.test_images = Some(i.clone());
                    data.test_labels = Some(l.clone());
                }
            }
            DataSource::Cifar { train, test } => {
                data.format = Some("cifar".into());
                data.train_images = Some(train.clone());
                data.test_images = test.clone();
            }
            DataSource::Synthetic { count, seed } => {
                data.format = Some("synthetic".into());
                data.synthetic_count = Some(*count);
                data.synthetic_seed = Some(*seed);
            }
        }
        let t = &self.train;
        FileConfig {
            preset: self.preset.map(|p| p.name().to_string()),
            arch: Some(self.arch.to_string()),
            seed: Some(t.seed),
            data,
            train: TrainSection {
                epochs: Some(t.epochs),
                batch_size: Some(t.batch_size),
                lr_start: Some(t.lr_start),
                lr_end: Some(t.lr_end),
                alpha_h: Some(t.weights.alpha_h),
                alpha_rc: Some(t.weights.alpha_rc),
                alpha_kl: Some(t.weights.alpha_kl),
                alpha_nn: Some(t.weights.alpha_nn),
                unpool: Some(t.unpool.to_string()),
                reconstruction: Some(t.reconstruction.to_string()),
                eval_every: Some(t.eval_every),
                eval_chunk: Some(t.eval_chunk),
                checkpoint_every: Some(self.checkpoint_every),
            },
            output: OutputSection { dir: Some(self.out_dir.clone()) },
        }
    }
}
