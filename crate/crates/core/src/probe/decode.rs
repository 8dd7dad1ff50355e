use super::pca::{pca_fit, Pca};
use super::Features;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeOptions {
    pub components: usize,
    pub iterations: usize,
    pub lr: f64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions { components: 10, iterations: 200, lr: 0.1 }
    }
}

/// Multinomial logistic regression with a bias column; `weights` is
/// `[(k + 1) * classes]`, bias row last.
#[derive(Clone, Debug, PartialEq)]
pub struct Logistic {
    pub k: usize,
    pub classes: usize,
    pub weights: Vec<f64>,
}

impl Logistic {
    fn scores(&self, row: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.weights[self.k * self.classes..]);
        for (i, &x) in row.iter().enumerate() {
            let w = &self.weights[i * self.classes..(i + 1) * self.classes];
            for (o, &wv) in out.iter_mut().zip(w) {
                *o += x * wv;
            }
        }
    }

    /// Full-batch gradient descent on the mean cross-entropy from zero
    /// weights.
    pub fn fit(x: &[f64], k: usize, labels: &[usize], classes: usize, iterations: usize, lr: f64) -> Result<Logistic> {
        if x.len() != labels.len() * k {
            return Err(Error::dim(format!("{} coordinates for {} items of width {k}", x.len(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
            return Err(Error::Range(format!("label {bad} outside {classes} classes")));
        }
        let first = labels.first().copied();
        if first.is_none() || labels.iter().all(|&c| Some(c) == first) {
            return Err(Error::Range("decoding needs at least two distinct training labels".into()));
        }
        let mut model = Logistic { k, classes, weights: vec![0.0; (k + 1) * classes] };
        let n = labels.len() as f64;
        let mut grad = vec![0.0; model.weights.len()];
        let mut p = vec![0.0; classes];
        for _ in 0..iterations {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for (row, &y) in x.chunks_exact(k).zip(labels) {
                model.scores(row, &mut p);
                let m = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in p.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                p.iter_mut().for_each(|v| *v /= z);
                p[y] -= 1.0;
                for (i, &xi) in row.iter().chain(std::iter::once(&1.0)).enumerate() {
                    let g = &mut grad[i * classes..(i + 1) * classes];
                    for (gv, &pv) in g.iter_mut().zip(&p) {
                        *gv += xi * pv;
                    }
                }
            }
            for (w, g) in model.weights.iter_mut().zip(&grad) {
                *w -= lr * g / n;
            }
        }
        Ok(model)
    }

    /// Highest-scoring class per row; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> Vec<usize> {
        let mut s = vec![0.0; self.classes];
        x.chunks_exact(self.k)
            .map(|row| {
                self.scores(row, &mut s);
                let mut best = 0;
                for (j, &v) in s.iter().enumerate() {
                    if v > s[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Coordinates along `pca`, each divided by the standard deviation of its
/// component so the fixed step size suits every layer.
pub fn standardized_coordinates(pca: &Pca, x: &Features) -> Result<Vec<f64>> {
    let mut z = pca.project(x)?;
    let floor = 1e-12 * pca.total_variance.max(f64::MIN_POSITIVE);
    let scale: Vec<f64> = pca.variances.iter().map(|&v| if v > floor { 1.0 / v.sqrt() } else { 1.0 }).collect();
    for row in z.chunks_exact_mut(pca.k()) {
        row.iter_mut().zip(&scale).for_each(|(a, s)| *a *= s);
    }
    Ok(z)
}

pub fn error_rate(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(Error::dim(format!("{} predictions for {} labels", predicted.len(), truth.len())));
    }
    let wrong = predicted.iter().zip(truth).filter(|(p, t)| p != t).count();
    Ok(100.0 * wrong as f64 / truth.len() as f64)
}

/// Test error (%) of a logistic classifier trained on already projected
/// coordinates.
pub fn decode_coordinates(
    train: &[f64],
    test: &[f64],
    k: usize,
    train_labels: &[usize],
    test_labels: &[usize],
    classes: usize,
    opts: &DecodeOptions,
) -> Result<f64> {
    if test.len() != test_labels.len() * k {
        return Err(Error::dim(format!("{} test coordinates for {} items of width {k}", test.len(), test_labels.len())));
    }
    let model = Logistic::fit(train, k, train_labels, classes, opts.iterations, opts.lr)?;
    error_rate(&model.predict(test), test_labels)
}

/// Fits principal components on `train`, trains the classifier on the
/// standardized train coordinates and reports the error (%) on `test`.
pub fn linear_decode(train: &Features, test: &Features, train_labels: &[usize], test_labels: &[usize], opts: &DecodeOptions) -> Result<f64> {
    if train.rows != train_labels.len() || test.rows != test_labels.len() {
        return Err(Error::dim(format!(
            "{} train rows with {} labels, {} test rows with {} labels",
            train.rows,
            train_labels.len(),
            test.rows,
            test_labels.len()
        )));
    }
    let classes = train_labels.iter().chain(test_labels).max().map_or(0, |m| m + 1);
    let pca = pca_fit(train, opts.components)?;
    let ztr = standardized_coordinates(&pca, train)?;
    let zte = standardized_coordinates(&pca, test)?;
    decode_coordinates(&ztr, &zte, pca.k(), train_labels, test_labels, classes, opts)
}

#[cfg(test)]
mod tests {
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn clusters(n: usize, d: usize, spread: f64, seed: u64) -> (Features, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % 10;
            for j in 0..d {
                let centre = if j == c { 5.0 } else { 0.0 };
                data.push((centre + spread * rng.random_range(-1.0..1.0)) as f32);
            }
            labels.push(c);
        }
        (Features::new(n, d, data).unwrap(), labels)
    }

    #[test]
    fn separable_labels_decode_almost_perfectly() {
        let (train, ytr) = clusters(1000, 12, 0.5, 1);
        let (test, yte) = clusters(500, 12, 0.5, 2);
        let err = linear_decode(&train, &test, &ytr, &yte, &DecodeOptions::default()).unwrap();
        assert!(err <= 1.0, "{err}");
    }

    #[test]
    fn permuted_labels_sit_at_chance() {
        let (train, mut ytr) = clusters(2000, 12, 0.5, 3);
        let (test, mut yte) = clusters(2000, 12, 0.5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        ytr.shuffle(&mut rng);
        yte.shuffle(&mut rng);
        let err = linear_decode(&train, &test, &ytr, &yte, &DecodeOptions::default()).unwrap();
        assert!((err - 90.0).abs() <= 3.0, "{err}");
    }

    #[test]
    fn single_class_is_rejected() {
        let (train, _) = clusters(100, 12, 0.5, 1);
        let ones = vec![3; 100];
        assert!(linear_decode(&train, &train, &ones, &ones, &DecodeOptions::default()).is_err());
        assert!(linear_decode(&train, &train, &ones[..50], &ones, &DecodeOptions::default()).is_err());
    }

    #[test]
    fn zero_iterations_predict_the_first_class() {
        let x = vec![0.5, -1.0, 2.0, 0.0];
        let m = Logistic::fit(&x, 2, &[0, 1], 3, 0, 0.1).unwrap();
        assert_eq!(m.predict(&x), vec![0, 0]);
    }

    #[test]
    fn gradient_step_matches_hand_computation() {
        // items x = 2 (label 1) and x = 0 (label 0); at zero weights p = 1/2,
        // the bias gradients cancel and the weight gradient is [1, -1] / 2
        let m = Logistic::fit(&[2.0, 0.0], 1, &[1, 0], 2, 1, 1.0).unwrap();
        assert_eq!(m.weights, vec![-0.5, 0.5, 0.0, 0.0]);
    }
}
