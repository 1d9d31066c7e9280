//! Accuracy and F1 evaluation, used for reporting and as the upload and
//! fusion signals of the federation round.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How classes absent from both labels and predictions enter the macro
/// average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AbsentClassRule {
    /// Absent classes contribute F1 = 0 and the denominator is the full
    /// class count.
    #[default]
    CountAsZero,
    /// Average only over classes present in labels or predictions.
    Exclude,
}

/// Per-class precision/recall/F1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of label occurrences.
    pub support: usize,
}

/// Full evaluation of a prediction run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub per_class: Vec<ClassScores>,
    pub macro_f1: f64,
    /// `confusion[label][pred]`.
    pub confusion: Vec<Vec<usize>>,
    pub sample_count: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Confusion-matrix evaluation of predicted against true class ids.
pub fn evaluate(
    preds: &[usize],
    labels: &[usize],
    num_classes: usize,
    absent_rule: AbsentClassRule,
) -> Result<EvalResult> {
    if preds.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Argument("empty evaluation".into()));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= num_classes || l >= num_classes {
            return Err(Error::Argument(format!(
                "class id out of range: pred {p}, label {l}, C={num_classes}"
            )));
        }
        confusion[l][p] += 1;
    }
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let mut per_class = Vec::with_capacity(num_classes);
    let mut f1_sum = 0.0;
    let mut f1_den = 0usize;
    for c in 0..num_classes {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = (0..num_classes).map(|l| confusion[l][c]).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let present = support > 0 || predicted > 0;
        match absent_rule {
            AbsentClassRule::CountAsZero => {
                f1_sum += f1;
                f1_den += 1;
            }
            AbsentClassRule::Exclude if present => {
                f1_sum += f1;
                f1_den += 1;
            }
            AbsentClassRule::Exclude => {}
        }
        per_class.push(ClassScores {
            precision,
            recall,
            f1,
            support,
        });
    }
    Ok(EvalResult {
        accuracy: ratio(correct, preds.len()),
        per_class,
        macro_f1: if f1_den == 0 { 0.0 } else { f1_sum / f1_den as f64 },
        confusion,
        sample_count: preds.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let labels = [0usize, 1, 2, 1];
        let r = evaluate(&labels, &labels, 3, AbsentClassRule::CountAsZero).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_f1, 1.0);
        let r5 = evaluate(&labels, &labels, 5, AbsentClassRule::CountAsZero).unwrap();
        // absent classes drag the strict macro below 1
        assert!((r5.macro_f1 - 3.0 / 5.0).abs() < 1e-12);
        let r5ex = evaluate(&labels, &labels, 5, AbsentClassRule::Exclude).unwrap();
        assert_eq!(r5ex.macro_f1, 1.0);
    }

    #[test]
    fn worked_two_class_example() {
        let labels = [1usize, 1, 0];
        let preds = [1usize, 0, 0];
        let r = evaluate(&preds, &labels, 2, AbsentClassRule::CountAsZero).unwrap();
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.per_class[1].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.macro_f1 - 0.6667).abs() < 1e-4);
    }

    #[test]
    fn single_class_all_wrong() {
        let labels = [0usize, 0, 0];
        let preds = [1usize, 1, 1];
        let r = evaluate(&preds, &labels, 2, AbsentClassRule::CountAsZero).unwrap();
        assert_eq!(r.accuracy, 0.0);
    }

    #[test]
    fn length_mismatch_and_empty_are_errors() {
        assert!(evaluate(&[0], &[0, 1], 2, AbsentClassRule::CountAsZero).is_err());
        assert!(evaluate(&[], &[], 2, AbsentClassRule::CountAsZero).is_err());
    }

    #[test]
    fn confusion_sums_to_sample_count_and_accuracy_matches_naive_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let labels: Vec<usize> = (0..200).map(|_| rng.gen_range(0..4)).collect();
        let preds: Vec<usize> = (0..200).map(|_| rng.gen_range(0..4)).collect();
        let r = evaluate(&preds, &labels, 4, AbsentClassRule::CountAsZero).unwrap();
        let total: usize = r.confusion.iter().flatten().sum();
        assert_eq!(total, 200);
        let naive = preds
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count() as f64
            / 200.0;
        assert_eq!(r.accuracy, naive);
    }

    #[test]
    fn permutation_invariance_of_pairs() {
        let labels = [0usize, 1, 2, 1, 0, 2];
        let preds = [0usize, 2, 2, 1, 1, 0];
        let a = evaluate(&preds, &labels, 3, AbsentClassRule::CountAsZero).unwrap();
        let perm = [5usize, 3, 1, 4, 0, 2];
        let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let pp: Vec<usize> = perm.iter().map(|&i| preds[i]).collect();
        let b = evaluate(&pp, &pl, 3, AbsentClassRule::CountAsZero).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.macro_f1, b.macro_f1);
    }
}
