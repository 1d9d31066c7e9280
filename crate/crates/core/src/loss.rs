//! Loss stack for long-tailed training: batch soft-F1 weight, the
//! F1-rebalanced cross-entropy `f_loss`, the smoothed class-balanced
//! weight, and the combined objective, plus a plain cross-entropy
//! baseline for ablations.
//!
//! All losses operate on class probabilities (rows of a `batch × C`
//! tensor) and return the analytic `dL/dp` alongside the scalar value.
//! The soft-F1 weight is treated as a detached constant in every
//! gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor2;
use crate::scalar::Real;

/// Probability clamp applied before every logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// Which objective [`combined_loss`] evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Plain cross-entropy.
    Ce,
    /// Class-balanced cross-entropy.
    CbCe,
    /// Class-balanced F1-rebalanced loss.
    #[default]
    CbF,
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossMode::Ce => write!(f, "ce"),
            LossMode::CbCe => write!(f, "cb-ce"),
            LossMode::CbF => write!(f, "cb-f"),
        }
    }
}

/// Loss selector plus the per-class train counts feeding the
/// class-balanced weight.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    pub mode: LossMode,
    /// β of the smoothed class-balanced weight.
    pub beta: f64,
    /// Per-class sample counts of the train split.
    pub class_counts: Vec<u64>,
}

impl LossConfig {
    pub fn new(mode: LossMode, beta: f64, class_counts: Vec<u64>) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::Argument(format!("beta {beta} outside [0, 1)")));
        }
        Ok(LossConfig {
            mode,
            beta,
            class_counts,
        })
    }
}

fn clamp<F: Real>(p: F) -> F {
    let eps = F::from_f64_lossy(PROB_EPS);
    p.max(eps).min(F::one() - eps)
}

fn check_batch<F: Real>(targets: &Tensor2<F>, probs: &Tensor2<F>) -> Result<()> {
    if !targets.same_shape(probs) {
        return Err(Error::Dimension(format!(
            "targets {:?} vs probs {:?}",
            targets.shape(),
            probs.shape()
        )));
    }
    if targets.rows() == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    Ok(())
}

/// Batch soft-F1 surrogate for one class: `2·Σᵢ yᵢpᵢ / Σᵢ (yᵢ + pᵢ)`
/// over that class's one-vs-rest slice; 0 when the denominator is 0.
pub fn soft_f1<F: Real>(targets: &Tensor2<F>, probs: &Tensor2<F>, class: usize) -> Result<F> {
    check_batch(targets, probs)?;
    if class >= targets.cols() {
        return Err(Error::Argument(format!(
            "class {class} out of {} classes",
            targets.cols()
        )));
    }
    let mut num = F::zero();
    let mut den = F::zero();
    for i in 0..targets.rows() {
        let y = targets.get(i, class);
        let p = probs.get(i, class);
        num += y * p;
        den += y + p;
    }
    if den == F::zero() {
        return Ok(F::zero());
    }
    Ok((num + num) / den)
}

/// Soft-F1 for every class of the batch.
pub fn soft_f1_all<F: Real>(targets: &Tensor2<F>, probs: &Tensor2<F>) -> Result<Vec<F>> {
    (0..targets.cols())
        .map(|c| soft_f1(targets, probs, c))
        .collect()
}

fn check_f_g<F: Real>(f_g: &[F], classes: usize) -> Result<()> {
    if f_g.len() != classes {
        return Err(Error::Dimension(format!(
            "{} soft-F1 values for {classes} classes",
            f_g.len()
        )));
    }
    for (c, &v) in f_g.iter().enumerate() {
        if v < F::zero() || v > F::one() {
            return Err(Error::Argument(format!(
                "soft-F1 weight {v} for class {c} outside [0, 1]"
            )));
        }
    }
    Ok(())
}

/// F1-rebalanced loss with per-sample weights. Positives carry
/// `y − 0.5·F_g`, negatives `0.5·F_g`, one-vs-rest per class, summed
/// over classes and averaged over the batch. `F_g` is held constant in
/// the gradient.
fn f_loss_weighted<F: Real>(
    targets: &Tensor2<F>,
    probs: &Tensor2<F>,
    f_g: &[F],
    sample_weights: &[F],
) -> Result<(F, Tensor2<F>)> {
    check_batch(targets, probs)?;
    check_f_g(f_g, targets.cols())?;
    let batch = targets.rows();
    let inv_batch = F::one() / F::from_usize(batch).unwrap();
    let half = F::from_f64_lossy(0.5);
    let mut loss = F::zero();
    let mut grad = Tensor2::zeros(batch, targets.cols());
    for i in 0..batch {
        let w = sample_weights[i] * inv_batch;
        for c in 0..targets.cols() {
            let y = targets.get(i, c);
            let p = clamp(probs.get(i, c));
            let pos_w = y * (y - half * f_g[c]);
            let neg_w = (F::one() - y) * half * f_g[c];
            loss += -w * (pos_w * p.ln() + neg_w * (F::one() - p).ln());
            grad.set(i, c, -w * (pos_w / p - neg_w / (F::one() - p)));
        }
    }
    Ok((loss, grad))
}

/// F1-rebalanced loss over the batch, unweighted.
pub fn f_loss<F: Real>(
    targets: &Tensor2<F>,
    probs: &Tensor2<F>,
    f_g: &[F],
) -> Result<(F, Tensor2<F>)> {
    let ones = vec![F::one(); targets.rows()];
    f_loss_weighted(targets, probs, f_g, &ones)
}

/// Cross-entropy with per-sample weights.
fn cross_entropy_weighted<F: Real>(
    targets: &Tensor2<F>,
    probs: &Tensor2<F>,
    sample_weights: &[F],
) -> Result<(F, Tensor2<F>)> {
    check_batch(targets, probs)?;
    let batch = targets.rows();
    let inv_batch = F::one() / F::from_usize(batch).unwrap();
    let mut loss = F::zero();
    let mut grad = Tensor2::zeros(batch, targets.cols());
    for i in 0..batch {
        let w = sample_weights[i] * inv_batch;
        for c in 0..targets.cols() {
            let y = targets.get(i, c);
            if y == F::zero() {
                continue;
            }
            let p = clamp(probs.get(i, c));
            loss += -w * y * p.ln();
            grad.set(i, c, -w * y / p);
        }
    }
    Ok((loss, grad))
}

/// `−Σ y log p`, averaged per sample.
pub fn cross_entropy<F: Real>(targets: &Tensor2<F>, probs: &Tensor2<F>) -> Result<(F, Tensor2<F>)> {
    let ones = vec![F::one(); targets.rows()];
    cross_entropy_weighted(targets, probs, &ones)
}

/// Smoothed class-balanced weight `(1−β)/(1−β^{s+1})`.
pub fn cb_weight<F: Real>(s: u64, beta: F) -> Result<F> {
    if beta < F::zero() || beta >= F::one() {
        return Err(Error::Argument(format!("beta {beta} outside [0, 1)")));
    }
    let exp = i32::try_from(s + 1)
        .map_err(|_| Error::Argument(format!("class count {s} too large")))?;
    Ok((F::one() - beta) / (F::one() - beta.powi(exp)))
}

/// Target class id of each one-hot row.
fn target_classes<F: Real>(targets: &Tensor2<F>) -> Result<Vec<usize>> {
    (0..targets.rows())
        .map(|i| {
            targets
                .row(i)
                .iter()
                .position(|&v| v == F::one())
                .ok_or_else(|| Error::Argument(format!("row {i} of targets is not one-hot")))
        })
        .collect()
}

/// The configured objective over a batch of one-hot targets and class
/// probabilities. The class-balanced weight is indexed by each sample's
/// target class.
pub fn combined_loss<F: Real>(
    targets: &Tensor2<F>,
    probs: &Tensor2<F>,
    config: &LossConfig,
) -> Result<(F, Tensor2<F>)> {
    check_batch(targets, probs)?;
    let beta = F::from_f64_lossy(config.beta);
    let sample_weights = |cfg: &LossConfig| -> Result<Vec<F>> {
        if cfg.class_counts.len() != targets.cols() {
            return Err(Error::Dimension(format!(
                "{} class counts for {} classes",
                cfg.class_counts.len(),
                targets.cols()
            )));
        }
        let per_class: Vec<F> = cfg
            .class_counts
            .iter()
            .map(|&s| cb_weight(s, beta))
            .collect::<Result<_>>()?;
        Ok(target_classes(targets)?
            .into_iter()
            .map(|c| per_class[c])
            .collect())
    };
    match config.mode {
        LossMode::Ce => cross_entropy(targets, probs),
        LossMode::CbCe => cross_entropy_weighted(targets, probs, &sample_weights(config)?),
        LossMode::CbF => {
            let f_g = soft_f1_all(targets, probs)?;
            f_loss_weighted(targets, probs, &f_g, &sample_weights(config)?)
        }
    }
}
