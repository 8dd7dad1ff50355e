//! The four loss terms and their weighted sum.
//!
//! Each term is built from tape operations so that it can be differentiated;
//! the plain functions evaluate the same graphs on a constant double-precision
//! tape.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Floor applied to probabilities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Nonnegative weights of the cross-entropy, reconstruction, KL and
/// non-negativity terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha_h: f64,
    pub alpha_rc: f64,
    pub alpha_kl: f64,
    pub alpha_nn: f64,
}

impl LossWeights {
    pub fn new(alpha_h: f64, alpha_rc: f64, alpha_kl: f64, alpha_nn: f64) -> Result<Self> {
        let w = LossWeights { alpha_h, alpha_rc, alpha_kl, alpha_nn };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha_h", self.alpha_h), ("alpha_rc", self.alpha_rc), ("alpha_kl", self.alpha_kl), ("alpha_nn", self.alpha_nn)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} = {v} must be a finite non-negative number")));
            }
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.alpha_h, self.alpha_rc, self.alpha_kl, self.alpha_nn]
    }
}

/// Scalar values of one evaluation of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_h: f64,
    pub l_rc: f64,
    pub l_kl: f64,
    pub l_nn: f64,
    pub total: f64,
    pub labeled: usize,
    pub unlabeled: usize,
}

impl LossReport {
    pub fn components(&self) -> [f64; 4] {
        [self.l_h, self.l_rc, self.l_kl, self.l_nn]
    }

    pub fn is_finite(&self) -> bool {
        self.components().iter().chain([&self.total]).all(|v| v.is_finite())
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "l_h={} l_rc={} l_kl={} l_nn={} total={}", self.l_h, self.l_rc, self.l_kl, self.l_nn, self.total)
    }
}

/// Tape handles of the four terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub l_h: Var,
    pub l_rc: Var,
    pub l_kl: Var,
    pub l_nn: Var,
    pub labeled: usize,
    pub unlabeled: usize,
}

fn rows_of<T: Real>(tape: &Tape<T>, q: Var) -> Result<(usize, usize)> {
    let shape = tape.shape(q);
    match (shape.first(), shape.last()) {
        (Some(&n), Some(&c)) if shape.len() >= 2 && n * c == tape.value(q).len() => Ok((n, c)),
        _ => Err(Error::dim(format!("posterior {shape:?} is not [N, ..., C] with one row per item"))),
    }
}

fn scalar<T: Real>(tape: &mut Tape<T>, v: f64) -> Var {
    tape.constant(Tensor::new(vec![], vec![T::from_f64_lossy(v)]).expect("scalar"))
}

/// Mean of `−ln max(q(label), 1e-12)` over items with a label. Returns the
/// term and the number of labeled items; with none the term is a constant 0.
pub fn cross_entropy_term<T: Real>(tape: &mut Tape<T>, q: Var, labels: &[Option<usize>]) -> Result<(Var, usize)> {
    let (n, c) = rows_of(tape, q)?;
    if labels.len() != n {
        return Err(Error::dim(format!("{} labels for {n} items", labels.len())));
    }
    let mut idx = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        if let Some(l) = *l {
            if l >= c {
                return Err(Error::dim(format!("label {l} out of range for {c} classes")));
            }
            idx.push(i * c + l);
        }
    }
    if idx.is_empty() {
        return Ok((scalar(tape, 0.0), 0));
    }
    let picked = tape.gather(q, &idx)?;
    let logs = tape.log_floor(picked, T::from_f64_lossy(LOG_FLOOR));
    let total = tape.sum(logs);
    Ok((tape.scale(total, T::from_f64_lossy(-1.0 / idx.len() as f64)), idx.len()))
}

/// `(1/N) Σₙ Σ_c q ln(q / p)` with `q` floored inside the logarithm, so
/// entries with `q = 0` contribute nothing.
pub fn kl_term<T: Real>(tape: &mut Tape<T>, q: Var, prior: &[f64]) -> Result<Var> {
    let (n, c) = rows_of(tape, q)?;
    if prior.len() != c {
        return Err(Error::dim(format!("prior over {} classes, posterior over {c}", prior.len())));
    }
    for (k, &p) in prior.iter().enumerate() {
        if !(p > 0.0) && tape.value(q).data().iter().skip(k).step_by(c).any(|&v| v > T::zero()) {
            return Err(Error::Numeric(format!("class prior is {p} for class {k} where the posterior is positive")));
        }
    }
    let neg_log_prior: Vec<T> = prior.iter().map(|&p| T::from_f64_lossy(if p > 0.0 { -p.ln() } else { 0.0 })).collect();
    let log_q = tape.log_floor(q, T::from_f64_lossy(LOG_FLOOR));
    let ratio = tape.add_row(log_q, &neg_log_prior)?;
    let terms = tape.mul(q, ratio)?;
    let total = tape.sum(terms);
    Ok(tape.scale(total, T::from_f64_lossy(1.0 / n.max(1) as f64)))
}

/// `(1/N) Σₙ ‖Iₙ − Îₙ‖²`.
pub fn reconstruction_term<T: Real>(tape: &mut Tape<T>, images: Var, rendered: Var) -> Result<Var> {
    if tape.shape(images) != tape.shape(rendered) {
        return Err(Error::dim(format!("images {:?} vs reconstructions {:?}", tape.shape(images), tape.shape(rendered))));
    }
    let n = tape.shape(images).first().copied().unwrap_or(1).max(1);
    let diff = tape.sub(images, rendered)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    Ok(tape.scale(total, T::from_f64_lossy(1.0 / n as f64)))
}

/// Reconstruction error averaged over classes under the posterior:
/// `(1/N) Σₙ Σ_c q(c|Iₙ) ‖Iₙ − Î_{n,c}‖²`, where `rendered[c]` renders every
/// item as class `c`.
pub fn expected_reconstruction_term<T: Real>(tape: &mut Tape<T>, images: Var, rendered: &[Var], q: Var) -> Result<Var> {
    let (n, c) = rows_of(tape, q)?;
    if rendered.len() != c {
        return Err(Error::dim(format!("{} class renders for {c} classes", rendered.len())));
    }
    let mut terms = Vec::with_capacity(c);
    for (k, &r) in rendered.iter().enumerate() {
        if tape.shape(r) != tape.shape(images) {
            return Err(Error::dim(format!("render {:?} vs images {:?}", tape.shape(r), tape.shape(images))));
        }
        let diff = tape.sub(images, r)?;
        let sq = tape.square(diff);
        let per_item = tape.sum_rows(sq)?;
        let qk = tape.gather(q, &(0..n).map(|i| i * c + k).collect::<Vec<_>>())?;
        let weighted = tape.mul(per_item, qk)?;
        terms.push((tape.sum(weighted), T::from_f64_lossy(1.0 / n.max(1) as f64)));
    }
    tape.weighted_sum(&terms)
}

/// `(1/N) Σₙ Σ_ℓ ‖max(0, −zₙ^ℓ)‖²` for a batch of `n` items. An empty list
/// gives a constant 0.
pub fn nonnegativity_term<T: Real>(tape: &mut Tape<T>, intermediates: &[Var], n: usize) -> Result<Var> {
    if intermediates.is_empty() {
        return Ok(scalar(tape, 0.0));
    }
    let inv = T::from_f64_lossy(1.0 / n.max(1) as f64);
    let mut terms = Vec::with_capacity(intermediates.len());
    for &z in intermediates {
        if tape.shape(z).first() != Some(&n) {
            return Err(Error::dim(format!("intermediate {:?} is not a batch of {n}", tape.shape(z))));
        }
        let neg = tape.neg_part(z);
        let sq = tape.square(neg);
        terms.push((tape.sum(sq), inv));
    }
    tape.weighted_sum(&terms)
}

/// Weighted sum of the four terms, with a report of their values.
pub fn total_term<T: Real>(tape: &mut Tape<T>, weights: &LossWeights, terms: &LossTerms) -> Result<(Var, LossReport)> {
    weights.validate()?;
    let w = |v: f64| T::from_f64_lossy(v);
    let total = tape.weighted_sum(&[
        (terms.l_h, w(weights.alpha_h)),
        (terms.l_rc, w(weights.alpha_rc)),
        (terms.l_kl, w(weights.alpha_kl)),
        (terms.l_nn, w(weights.alpha_nn)),
    ])?;
    let report = LossReport {
        l_h: tape.value(terms.l_h).scalar()?,
        l_rc: tape.value(terms.l_rc).scalar()?,
        l_kl: tape.value(terms.l_kl).scalar()?,
        l_nn: tape.value(terms.l_nn).scalar()?,
        total: tape.value(total).scalar()?,
        labeled: terms.labeled,
        unlabeled: terms.unlabeled,
    };
    Ok((total, report))
}

fn check_distributions(q: &Tensor<f64>) -> Result<()> {
    let c = *q.shape().last().ok_or_else(|| Error::dim("posterior is a scalar"))?;
    for (n, row) in q.data().chunks(c.max(1)).enumerate() {
        let s: f64 = row.iter().sum();
        if row.iter().any(|&v| !(v >= 0.0)) || (s - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!("posterior row {n} is not a distribution (sum {s})")));
        }
    }
    Ok(())
}

/// Cross-entropy over the labeled items of `q` (`[N, C]`). The flag is set
/// when no item carries a label, in which case the value is 0.
pub fn loss_h(q: &Tensor<f64>, labels: &[Option<usize>]) -> Result<(f64, bool)> {
    check_distributions(q)?;
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone());
    let (v, count) = cross_entropy_term(&mut tape, qv, labels)?;
    Ok((tape.value(v).scalar()?, count == 0))
}

pub fn loss_kl(q: &Tensor<f64>, prior: &[f64]) -> Result<f64> {
    check_distributions(q)?;
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone());
    let v = kl_term(&mut tape, qv, prior)?;
    tape.value(v).scalar()
}

pub fn loss_rc(images: &Tensor<f64>, rendered: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(images.clone()), tape.constant(rendered.clone()));
    let v = reconstruction_term(&mut tape, a, b)?;
    tape.value(v).scalar()
}

/// Non-negativity penalty over per-layer batches sharing a leading extent.
pub fn loss_nn(intermediates: &[Tensor<f64>]) -> Result<f64> {
    let n = intermediates.first().and_then(|t| t.shape().first().copied()).unwrap_or(1);
    let mut tape = Tape::new();
    let vars: Vec<Var> = intermediates.iter().map(|t| tape.constant(t.clone())).collect();
    let v = nonnegativity_term(&mut tape, &vars, n)?;
    tape.value(v).scalar()
}

/// Weighted sum of component values `[l_h, l_rc, l_kl, l_nn]`.
pub fn total_loss(weights: &LossWeights, components: [f64; 4]) -> Result<LossReport> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = components.iter().map(|&c| scalar(&mut tape, c)).collect();
    let terms = LossTerms { l_h: vars[0], l_rc: vars[1], l_kl: vars[2], l_nn: vars[3], labeled: 0, unlabeled: 0 };
    Ok(total_term(&mut tape, weights, &terms)?.1)
}
