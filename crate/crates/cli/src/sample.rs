use std::fs;
use std::path::PathBuf;

use clap::Args;
use drmm::data::{write_idx_f32, write_idx_labels, write_trace};
use drmm::model::{sample, ArchitectureSpec, GenerativeConfig, ModelParams, Preset, Unpool};

use crate::config::output_path;
use crate::data::load_checkpoint;
use crate::CliError;

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Trained model to sample from.
    #[arg(long, conflicts_with_all = ["preset", "arch"])]
    pub checkpoint: Option<PathBuf>,
    /// Freshly initialized network of this preset.
    #[arg(long, conflicts_with = "arch")]
    pub preset: Option<String>,
    /// Freshly initialized network of this inline architecture.
    #[arg(long)]
    pub arch: Option<String>,
    /// Initialization seed for `--preset` or `--arch`.
    #[arg(long, default_value_t = 0)]
    pub init_seed: u64,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory, relative to `$DRMM_OUTPUT_ROOT` when that is set.
    #[arg(long, default_value = "samples")]
    pub out: PathBuf,
    /// Variance of the pixel noise.
    #[arg(long, default_value_t = 0.0)]
    pub noise_var: f64,
    /// Probability that a rectified unit is active.
    #[arg(long, default_value_t = 0.5)]
    pub mask_prob: f64,
    #[arg(long, default_value = "switch")]
    pub unpool: String,
    /// Comma-separated class probabilities; uniform when omitted.
    #[arg(long, value_delimiter = ',')]
    pub class_prior: Option<Vec<f64>>,
}

fn model(args: &SampleArgs) -> Result<(ArchitectureSpec, ModelParams<f32>), CliError> {
    if let Some(p) = &args.checkpoint {
        let ck = load_checkpoint(p)?;
        return Ok((ck.arch, ck.params));
    }
    let arch = match (&args.preset, &args.arch) {
        (Some(p), _) => p.parse::<Preset>()?.arch(),
        (None, Some(a)) => a.parse::<ArchitectureSpec>()?,
        (None, None) => return Err(CliError::config("give --checkpoint, --preset or --arch")),
    };
    let params = ModelParams::init(&arch, args.init_seed);
    Ok((arch, params))
}

pub fn run(args: SampleArgs) -> Result<(), CliError> {
    let (arch, params) = model(&args)?;
    let mut gen = GenerativeConfig::uniform(arch.classes());
    gen.noise_var = args.noise_var;
    gen.mask_prob = args.mask_prob;
    gen.unpool = args.unpool.parse::<Unpool>()?;
    if let Some(prior) = &args.class_prior {
        gen.class_prior = prior.clone();
    }
    let s = sample(&gen, &params, &arch, args.count, args.seed)?;
    let out = output_path(&args.out);
    fs::create_dir_all(&out)?;
    write_idx_f32(&out.join("images.idx"), &s.images)?;
    write_idx_labels(&out.join("labels.idx"), &s.latents.classes)?;
    write_trace(&out.join("latents.trace"), &s.latents)?;
    println!("samples\t{}", args.count);
    println!("output\t{}", out.display());
    Ok(())
}
