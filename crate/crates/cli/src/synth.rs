use std::fs;
use std::path::PathBuf;

use clap::Args;
use drmm::data::{synth_dataset, write_idx_f32, write_idx_labels, write_latents, LatentRanges, SHAPE_CLASSES};

use crate::config::output_path;
use crate::CliError;

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10_000)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory, relative to `$DRMM_OUTPUT_ROOT` when that is set.
    #[arg(long, default_value = "synthetic")]
    pub out: PathBuf,
}

pub fn run(args: SynthArgs) -> Result<(), CliError> {
    let d = synth_dataset(args.count, SHAPE_CLASSES, &LatentRanges::default(), args.seed)?;
    let out = output_path(&args.out);
    fs::create_dir_all(&out)?;
    write_idx_f32(&out.join("images.idx"), &d.images)?;
    write_idx_labels(&out.join("labels.idx"), d.labels()?)?;
    write_latents(&out.join("latents.bin"), d.latents()?)?;
    println!("items\t{}", d.len());
    println!("output\t{}", out.display());
    Ok(())
}
