use std::path::PathBuf;

use clap::Args;
use drmm::data::{load_cifar_bin, load_idx, split_train_test, synth_dataset, Dataset, LatentRanges, SHAPE_CLASSES};
use drmm::trainer::{confusion, error_percent, predict};

use crate::config::{FileConfig, RunConfig, DEFAULT_EVAL_CHUNK};
use crate::data::{self, check_shape, load_checkpoint};
use crate::{CliError, DataFlags};

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Training config whose test data to use.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataFlags,
    /// Items per forward pass.
    #[arg(long)]
    pub chunk: Option<usize>,
}

/// The evaluation set and the chunk size to score it with.
fn test_set(args: &EvalArgs) -> Result<(Dataset, usize), CliError> {
    let d = &args.data;
    let chunk = args.chunk.unwrap_or(DEFAULT_EVAL_CHUNK);
    let set = if let Some(images) = &d.test_images {
        match d.format.as_deref() {
            Some("cifar") => load_cifar_bin(images)?,
            None | Some("idx") => {
                let labels = d.test_labels.as_deref().ok_or_else(|| CliError::config("--test-images needs --test-labels"))?;
                load_idx(images, Some(labels))?
            }
            Some(other) => return Err(CliError::config(format!("cannot evaluate on {other:?} files"))),
        }
    } else if let Some(count) = d.synthetic_count {
        let whole = synth_dataset(count, SHAPE_CLASSES, &LatentRanges::default(), d.synthetic_seed.unwrap_or(0))?;
        split_train_test(&whole)?.1
    } else if let Some(path) = &args.config {
        let cfg = RunConfig::resolve(&FileConfig::load(path)?)?;
        let test = data::load(&cfg.data, None)?.test.ok_or_else(|| CliError::config(format!("{} names no test data", path.display())))?;
        return finish(test, d.n_test, args.chunk.unwrap_or(cfg.train.eval_chunk));
    } else {
        return Err(CliError::config("no evaluation data: give --test-images, --synthetic-count or --config"));
    };
    finish(set, d.n_test, chunk)
}

fn finish(set: Dataset, n_test: Option<usize>, chunk: usize) -> Result<(Dataset, usize), CliError> {
    let set = match n_test {
        Some(n) => set.head(n.min(set.len()))?,
        None => set,
    };
    if chunk == 0 {
        return Err(CliError::config("--chunk must be positive"));
    }
    set.check_pixels()?;
    Ok((set, chunk))
}

pub fn run(args: EvalArgs) -> Result<(), CliError> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let (test, chunk) = test_set(&args)?;
    check_shape(&test, &ck.arch, "evaluation")?;
    if test.is_empty() {
        return Err(CliError::config("evaluation set is empty"));
    }
    let labels = test.labels()?;
    let classes = ck.arch.classes();
    if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
        return Err(CliError::config(format!("label {bad} out of range for {classes} classes")));
    }
    let pred = predict(&ck.params, &ck.arch, &test.images, chunk)?;
    println!("items\t{}", test.len());
    println!("test_error\t{}", error_percent(&pred, labels)?);
    let header: Vec<String> = (0..classes).map(|c| c.to_string()).collect();
    println!("true\\pred\t{}", header.join("\t"));
    for (c, row) in confusion(&pred, labels, classes)?.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        println!("{c}\t{}", cells.join("\t"));
    }
    Ok(())
}
