use crate::error::{Error, Result};

/// Equal-frequency bin boundaries. A value falls in bin `b` when exactly `b`
/// edges are less than or equal to it.
#[derive(Clone, Debug, PartialEq)]
pub struct BinEdges {
    edges: Vec<f64>,
}

impl BinEdges {
    /// Quantile edges of `values`: with the values sorted, edge `k` is the
    /// element at position `k * n / bins`.
    pub fn fit(values: &[f64], bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::config(format!("need at least 2 bins, got {bins}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Range("bin values must be finite".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut distinct = sorted.clone();
        distinct.dedup();
        if distinct.len() < bins {
            return Err(Error::Range(format!("{} distinct values cannot fill {bins} bins", distinct.len())));
        }
        let n = sorted.len();
        let edges = (1..bins).map(|k| sorted[k * n / bins]).collect();
        Ok(BinEdges { edges })
    }

    pub fn bins(&self) -> usize {
        self.edges.len() + 1
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn assign(&self, v: f64) -> usize {
        self.edges.partition_point(|&e| e <= v)
    }

    pub fn assign_all(&self, values: &[f64]) -> Vec<usize> {
        values.iter().map(|&v| self.assign(v)).collect()
    }
}

/// Bins `values` against their own quantile edges.
pub fn quantize_bins(values: &[f64], bins: usize) -> Result<Vec<usize>> {
    Ok(BinEdges::fit(values, bins)?.assign_all(values))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn uniform_values_bin_by_tens() {
        let values: Vec<f64> = (0..100).map(f64::from).collect();
        let bins = quantize_bins(&values, 10).unwrap();
        for (v, b) in values.iter().zip(bins) {
            assert_eq!(b, (*v as usize) / 10);
        }
    }

    #[test]
    fn two_bins_split_at_the_median() {
        let values = [5.0, 1.0, 9.0, 3.0, 7.0, 2.0];
        let bins = quantize_bins(&values, 2).unwrap();
        assert_eq!(bins, vec![1, 0, 1, 0, 1, 0]);
    }

    #[test]
    fn too_few_distinct_values() {
        let values = [1.0, 1.0, 2.0, 2.0, 3.0, 3.0];
        assert!(quantize_bins(&values, 4).is_err());
        assert!(quantize_bins(&values, 3).is_ok());
        assert!(quantize_bins(&values, 1).is_err());
        assert!(quantize_bins(&[f64::NAN, 1.0, 2.0], 2).is_err());
    }

    #[test]
    fn edges_apply_to_unseen_values() {
        let values: Vec<f64> = (0..100).map(f64::from).collect();
        let edges = BinEdges::fit(&values, 10).unwrap();
        assert_eq!(edges.assign(-50.0), 0);
        assert_eq!(edges.assign(1e9), 9);
        assert_eq!(edges.assign(19.5), 1);
        assert_eq!(edges.bins(), 10);
    }

    proptest! {
        #[test]
        fn random_values_fill_bins_evenly(seed in any::<u64>(), n in 20usize..400, bins in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let idx = quantize_bins(&values, bins).unwrap();
            let mut counts = vec![0usize; bins];
            for b in idx {
                counts[b] += 1;
            }
            for &c in &counts {
                prop_assert!((c as f64 - n as f64 / bins as f64).abs() <= 1.0, "counts {counts:?}");
            }
        }
    }
}
