use std::path::PathBuf;

use clap::Args;
use drmm::data::{load_idx, read_latents, synth_dataset, Dataset, LatentRanges, SHAPE_CLASSES};
use drmm::model::write_atomic;
use drmm::probe::{run_probe, ProbeOptions};

use crate::config::output_path;
use crate::data::{check_shape, load_checkpoint};
use crate::CliError;

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// IDX images; needs `--labels` and `--latents`.
    #[arg(long, requires_all = ["labels", "latents"], conflicts_with = "synthetic_count")]
    pub images: Option<PathBuf>,
    #[arg(long, requires = "images")]
    pub labels: Option<PathBuf>,
    /// Latent sidecar: five little-endian f64 per item.
    #[arg(long, requires = "images")]
    pub latents: Option<PathBuf>,
    /// Render this many synthetic items instead of reading files.
    #[arg(long)]
    pub synthetic_count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub synthetic_seed: u64,
    /// Average each channel over space instead of flattening.
    #[arg(long)]
    pub pooled: bool,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long, default_value_t = 10)]
    pub components: usize,
    /// Seed of the permuted-label control.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub chunk: usize,
    /// Report file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn dataset(args: &ProbeArgs) -> Result<Dataset, CliError> {
    match (&args.images, args.synthetic_count) {
        (Some(images), _) => {
            let (labels, latents) = (args.labels.as_deref(), args.latents.as_deref());
            let (Some(labels), Some(latents)) = (labels, latents) else {
                return Err(CliError::config("--images needs --labels and --latents"));
            };
            if !latents.is_file() {
                return Err(CliError::config(format!("latent sidecar {} does not exist", latents.display())));
            }
            let d = load_idx(images, Some(labels))?;
            let lat = read_latents(latents)?;
            if lat.len() != d.len() {
                return Err(CliError::config(format!("{} latent records for {} images", lat.len(), d.len())));
            }
            Ok(Dataset::new(d.images, d.labels, Some(lat), d.split)?)
        }
        (None, Some(n)) => Ok(synth_dataset(n, SHAPE_CLASSES, &LatentRanges::default(), args.synthetic_seed)?),
        (None, None) => Err(CliError::config("give --images/--labels/--latents or --synthetic-count")),
    }
}

pub fn run(args: ProbeArgs) -> Result<(), CliError> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let data = dataset(&args)?;
    check_shape(&data, &ck.arch, "probe")?;
    data.check_pixels()?;
    let mut opts = ProbeOptions { bins: args.bins, pooled: args.pooled, chunk: args.chunk, seed: args.seed, ..ProbeOptions::default() };
    opts.decode.components = args.components;
    if opts.chunk == 0 || opts.decode.components == 0 {
        return Err(CliError::config("--chunk and --components must be positive"));
    }
    let report = run_probe(&ck.params, &ck.arch, &data, &opts)?;
    let tsv = report.to_tsv();
    match &args.out {
        Some(p) => {
            let p = output_path(p);
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            write_atomic(&p, tsv.as_bytes())?;
            eprintln!("report written to {}", p.display());
        }
        None => print!("{tsv}"),
    }
    Ok(())
}
