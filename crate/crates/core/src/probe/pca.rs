use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Features;
use crate::error::{Error, Result};

/// Feature counts up to this size use a dense eigendecomposition of the
/// covariance; wider inputs use randomized subspace iteration.
pub const EXACT_FEATURES: usize = 512;
pub const SUBSPACE_ITERATIONS: usize = 8;
pub const OVERSAMPLE: usize = 10;
const ROW_CHUNK: usize = 256;
const SUBSPACE_SEED: u64 = 0x5eed;

/// Mean and leading principal directions of a feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k` unit vectors of length `features`, ordered by decreasing variance.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component (divisor `n`).
    pub variances: Vec<f64>,
    pub total_variance: f64,
}

fn check(x: &Features, k: usize) -> Result<()> {
    if k == 0 || k > x.cols {
        return Err(Error::config(format!("cannot take {k} components of {} features", x.cols)));
    }
    if x.rows <= k {
        return Err(Error::config(format!("need more than {k} items, have {}", x.rows)));
    }
    Ok(())
}

fn column_means(x: &Features) -> Vec<f64> {
    let mut mean = vec![0.0; x.cols];
    for row in x.data.chunks_exact(x.cols) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += f64::from(v);
        }
    }
    let n = x.rows as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

fn centered(x: &Features, mean: &[f64], start: usize, end: usize) -> DMatrix<f64> {
    DMatrix::from_fn(end - start, x.cols, |i, j| f64::from(x.data[(start + i) * x.cols + j]) - mean[j])
}

fn total_variance(x: &Features, mean: &[f64]) -> f64 {
    let mut s = 0.0;
    for row in x.data.chunks_exact(x.cols) {
        for (&v, m) in row.iter().zip(mean) {
            let d = f64::from(v) - m;
            s += d * d;
        }
    }
    s / x.rows as f64
}

/// `cov · q` without forming the covariance.
fn apply_covariance(x: &Features, mean: &[f64], q: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(x.cols, q.ncols());
    let mut start = 0;
    while start < x.rows {
        let end = (start + ROW_CHUNK).min(x.rows);
        let c = centered(x, mean, start, end);
        let cq = &c * q;
        out.gemm_tr(1.0, &c, &cq, 1.0);
        start = end;
    }
    out / x.rows as f64
}

/// Largest-magnitude coordinate made positive; ties go to the lowest index.
fn orient(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Eigenpairs sorted by decreasing eigenvalue, first `k` kept, rotated by
/// `basis` when given.
fn leading(eig: SymmetricEigen<f64, nalgebra::Dyn>, basis: Option<&DMatrix<f64>>, k: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut components = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for &j in order.iter().take(k) {
        let col = eig.eigenvectors.column(j);
        let mut v: Vec<f64> = match basis {
            Some(q) => (q * col).iter().copied().collect(),
            None => col.iter().copied().collect(),
        };
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        orient(&mut v);
        components.push(v);
        variances.push(eig.eigenvalues[j].max(0.0));
    }
    (components, variances)
}

/// Top-`k` principal components. Dense eigensolver up to
/// [`EXACT_FEATURES`] features, randomized subspace iteration beyond.
pub fn pca_fit(x: &Features, k: usize) -> Result<Pca> {
    if x.cols <= EXACT_FEATURES {
        pca_fit_exact(x, k)
    } else {
        pca_fit_randomized(x, k, SUBSPACE_ITERATIONS, SUBSPACE_SEED)
    }
}

pub fn pca_fit_exact(x: &Features, k: usize) -> Result<Pca> {
    check(x, k)?;
    let mean = column_means(x);
    let c = centered(x, &mean, 0, x.rows);
    let cov = c.tr_mul(&c) / x.rows as f64;
    let total = cov.trace();
    let (components, variances) = leading(SymmetricEigen::new(cov), None, k);
    Ok(Pca { mean, components, variances, total_variance: total })
}

/// Block power iteration on the covariance with `k + OVERSAMPLE` Gaussian
/// start vectors, finished by a Rayleigh-Ritz step.
pub fn pca_fit_randomized(x: &Features, k: usize, iterations: usize, seed: u64) -> Result<Pca> {
    check(x, k)?;
    let mean = column_means(x);
    let l = (k + OVERSAMPLE).min(x.cols);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = DMatrix::from_fn(x.cols, l, |_, _| StandardNormal.sample(&mut rng));
    let mut q = start.qr().q();
    for _ in 0..iterations {
        q = apply_covariance(x, &mean, &q).qr().q();
    }
    let small = q.tr_mul(&apply_covariance(x, &mean, &q));
    let small = (&small + small.transpose()) * 0.5;
    let (components, variances) = leading(SymmetricEigen::new(small), Some(&q), k);
    let total = total_variance(x, &mean);
    Ok(Pca { mean, components, variances, total_variance: total })
}

impl Pca {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    /// Share of the total variance along each component.
    pub fn explained(&self) -> Vec<f64> {
        self.variances.iter().map(|v| v / self.total_variance).collect()
    }

    /// Coordinates along the components, `[rows, k]` row-major.
    pub fn project(&self, x: &Features) -> Result<Vec<f64>> {
        if x.cols != self.mean.len() {
            return Err(Error::dim(format!("{} features, basis fitted on {}", x.cols, self.mean.len())));
        }
        let mut out = Vec::with_capacity(x.rows * self.k());
        let mut centered = vec![0.0; x.cols];
        for row in x.data.chunks_exact(x.cols) {
            for ((c, &v), m) in centered.iter_mut().zip(row).zip(&self.mean) {
                *c = f64::from(v) - m;
            }
            for comp in &self.components {
                out.push(comp.iter().zip(&centered).map(|(a, b)| a * b).sum());
            }
        }
        Ok(out)
    }

    /// Mean squared distance of the centered rows from the component span.
    pub fn residual_variance(&self, x: &Features) -> Result<f64> {
        let z = self.project(x)?;
        let k = self.k();
        let mut s = 0.0;
        for (row, coords) in x.data.chunks_exact(x.cols).zip(z.chunks_exact(k.max(1))) {
            for j in 0..x.cols {
                let fit: f64 = self.components.iter().zip(coords).map(|(c, a)| c[j] * a).sum();
                let d = f64::from(row[j]) - self.mean[j] - fit;
                s += d * d;
            }
        }
        Ok(s / x.rows as f64)
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    fn gaussian(rows: usize, cols: usize, scales: &[f64], seed: u64) -> Features {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|i| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * scales[i % cols] + 0.3) as f32
            })
            .collect();
        Features::new(rows, cols, data).unwrap()
    }

    #[test]
    fn subspace_data_has_no_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, d, k) = (60, 12, 3);
        let basis: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let a: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
            for j in 0..d {
                data.push((1.5 + (0..k).map(|t| a[t] * basis[t][j]).sum::<f64>()) as f32);
            }
        }
        let x = Features::new(n, d, data).unwrap();
        let p = pca_fit(&x, k).unwrap();
        assert!(p.residual_variance(&x).unwrap() < 1e-8);
        assert!((p.explained().iter().sum::<f64>() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn isotropic_data_shares_variance_evenly() {
        let x = gaussian(20_000, 5, &[1.0; 5], 9);
        let p = pca_fit(&x, 5).unwrap();
        for share in p.explained() {
            assert!((share - 0.2).abs() < 0.01, "{:?}", p.explained());
        }
    }

    #[test]
    fn matches_singular_values_of_centered_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (n, d) = (100, 20);
        let vals: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let x = Features::new(n, d, vals.clone()).unwrap();
        let p = pca_fit(&x, 10).unwrap();

        let m = DMatrix::from_row_slice(n, d, &vals.iter().map(|&v| f64::from(v)).collect::<Vec<_>>());
        let means = m.row_mean();
        let c = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - means[j]);
        let total: f64 = c.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let mut sv: Vec<f64> = c.svd(false, false).singular_values.iter().map(|s| s * s / n as f64).collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        for (got, want) in p.explained().iter().zip(&sv) {
            assert!((got - want / total).abs() < 1e-8, "{got} vs {}", want / total);
        }
        let top: f64 = sv[..10].iter().sum();
        let resid = p.residual_variance(&x).unwrap();
        assert!(((total - top) - resid).abs() <= 1e-6 * (total - top));
    }

    #[test]
    fn components_are_orthonormal_and_oriented() {
        let x = gaussian(300, 8, &[3.0, 2.5, 2.0, 1.5, 1.0, 0.8, 0.5, 0.2], 2);
        let p = pca_fit(&x, 4).unwrap();
        for (i, a) in p.components.iter().enumerate() {
            for (j, b) in p.components.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(u, v)| u * v).sum();
                assert!((dot - f64::from(u8::from(i == j))).abs() < 1e-10);
            }
            let big = a.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(big > 0.0);
        }
        assert!(p.variances.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn randomized_agrees_with_dense() {
        let cols = 40;
        let scales: Vec<f64> = (0..cols).map(|j| 0.8f64.powi(j as i32) * 4.0).collect();
        let x = gaussian(500, cols, &scales, 5);
        let exact = pca_fit_exact(&x, 6).unwrap();
        let fast = pca_fit_randomized(&x, 6, SUBSPACE_ITERATIONS, 1).unwrap();
        assert!((exact.total_variance - fast.total_variance).abs() < 1e-9 * exact.total_variance);
        for (a, b) in exact.variances.iter().zip(&fast.variances) {
            assert!((a - b).abs() < 1e-6 * a, "{a} vs {b}");
        }
        for (a, b) in exact.components.iter().zip(&fast.components) {
            let dot: f64 = a.iter().zip(b).map(|(u, v)| u * v).sum();
            assert!(dot > 1.0 - 1e-6, "{dot}");
        }
        let r1 = exact.residual_variance(&x).unwrap();
        let r2 = fast.residual_variance(&x).unwrap();
        assert!((r1 - r2).abs() < 1e-6 * r1);
    }

    #[test]
    fn rejects_bad_shapes() {
        let x = gaussian(10, 4, &[1.0; 4], 0);
        assert!(pca_fit(&x, 5).is_err());
        assert!(pca_fit(&x, 0).is_err());
        let few = gaussian(3, 4, &[1.0; 4], 0);
        assert!(pca_fit(&few, 3).is_err());
        let p = pca_fit(&x, 2).unwrap();
        assert!(p.project(&gaussian(5, 3, &[1.0; 3], 0)).is_err());
    }
}
