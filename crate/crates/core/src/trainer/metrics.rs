use std::io::Write;

use super::{EpochStats, StepRecord};
use crate::error::Result;

pub const STEP_HEADER: &str = "step\tepoch\tlr\tl_h\tl_rc\tl_kl\tl_nn\ttotal";
pub const EPOCH_HEADER: &str = "epoch\tsteps\tlr\tl_h\tl_rc\tl_kl\tl_nn\ttotal\ttest_error";

/// Tab-separated metric streams, one record per line. Floats use the
/// shortest representation that round-trips.
pub struct MetricsWriter<S: Write, E: Write> {
    steps: S,
    epochs: E,
}

impl<S: Write, E: Write> MetricsWriter<S, E> {
    pub fn new(mut steps: S, mut epochs: E) -> Result<Self> {
        writeln!(steps, "{STEP_HEADER}")?;
        writeln!(epochs, "{EPOCH_HEADER}")?;
        Ok(MetricsWriter { steps, epochs })
    }

    /// Continues existing streams without writing headers.
    pub fn resume(steps: S, epochs: E) -> Self {
        MetricsWriter { steps, epochs }
    }

    pub fn step(&mut self, r: &StepRecord) -> Result<()> {
        let p = &r.report;
        writeln!(self.steps, "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}", r.step, r.epoch, r.lr, p.l_h, p.l_rc, p.l_kl, p.l_nn, p.total)?;
        Ok(())
    }

    pub fn epoch(&mut self, e: &EpochStats) -> Result<()> {
        let m = &e.mean;
        let test = e.test_error.map_or_else(|| "-".to_string(), |v| v.to_string());
        writeln!(self.epochs, "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{test}", e.epoch, e.steps, e.lr, m.l_h, m.l_rc, m.l_kl, m.l_nn, m.total)?;
        self.epochs.flush()?;
        self.steps.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> (S, E) {
        (self.steps, self.epochs)
    }
}
