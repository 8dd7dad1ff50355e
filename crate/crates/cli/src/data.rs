use drmm::data::{load_cifar_bin, load_idx, split_train_test, synth_dataset, Dataset, LatentRanges, SHAPE_CLASSES};
use drmm::model::{ArchitectureSpec, Checkpoint};

use crate::config::DataSource;
use crate::CliError;

/// Training items and, when available, a test set.
pub struct Splits {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

pub fn load(source: &DataSource, n_test: Option<usize>) -> Result<Splits, CliError> {
    let (train, test) = match source {
        DataSource::Idx { train_images, train_labels, test } => {
            let train = load_idx(train_images, Some(train_labels))?;
            let test = test.as_ref().map(|(i, l)| load_idx(i, Some(l))).transpose()?;
            (train, test)
        }
        DataSource::Cifar { train, test } => (load_cifar_bin(train)?, test.as_deref().map(load_cifar_bin).transpose()?),
        DataSource::Synthetic { count, seed } => {
            let whole = synth_dataset(*count, SHAPE_CLASSES, &LatentRanges::default(), *seed)?;
            let (train, test) = split_train_test(&whole)?;
            (train, Some(test))
        }
    };
    let test = match (test, n_test) {
        (Some(t), Some(n)) => Some(t.head(n.min(t.len()))?),
        (t, _) => t,
    };
    for d in std::iter::once(&train).chain(test.as_ref()) {
        d.check_pixels()?;
    }
    Ok(Splits { train, test })
}

pub fn check_shape(d: &Dataset, arch: &ArchitectureSpec, what: &str) -> Result<(), CliError> {
    if d.image_shape() != arch.input() {
        return Err(CliError::config(format!("{what} images are {:?}, the architecture expects {:?}", d.image_shape(), arch.input())));
    }
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| {
        let mut err = CliError::from(e);
        err.message = format!("{}: {}", path.display(), err.message);
        err
    })
}
