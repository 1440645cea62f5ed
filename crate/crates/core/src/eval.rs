//! Confusion matrices, classification metrics, and the cross-expertise
//! evaluation harness.

use crate::dataset::Sample;
use crate::ingest::Expertise;
use crate::nn::{LstmModel, NnError};
use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictions and labels differ in length: {predictions} vs {labels}")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("value {0} outside class range")]
    BadClass(u8),
    #[error("empty confusion matrix")]
    Empty,
    #[error("layout mismatch on `{field}`: model {model}, data {data}")]
    LayoutMismatch {
        field: &'static str,
        model: String,
        data: String,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Counts by (true label, predicted label).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_pairs(
        predictions: &[u8],
        labels: &[u8],
        n_classes: usize,
    ) -> Result<ConfusionMatrix, EvalError> {
        if predictions.len() != labels.len() {
            return Err(EvalError::LengthMismatch {
                predictions: predictions.len(),
                labels: labels.len(),
            });
        }
        let mut counts = vec![vec![0u64; n_classes]; n_classes];
        for (&p, &y) in predictions.iter().zip(labels) {
            if p as usize >= n_classes {
                return Err(EvalError::BadClass(p));
            }
            if y as usize >= n_classes {
                return Err(EvalError::BadClass(y));
            }
            counts[y as usize][p as usize] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> ConfusionMatrix {
        ConfusionMatrix { counts }
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, true_label: usize, predicted: usize) -> u64 {
        self.counts[true_label][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, label: usize) -> u64 {
        self.counts[label].iter().sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        self.counts.iter().map(|row| row[predicted]).sum()
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub n_samples: u64,
}

/// Accuracy, per-class precision/recall/F1, and macro averages over the
/// classes present in the labels. An empty column gives precision 0, an
/// empty row recall 0, and F1 is 0 whenever precision + recall is 0.
pub fn classification_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::Empty);
    }
    let n = cm.n_classes();
    let mut per_class = Vec::with_capacity(n);
    let trace: u64 = (0..n).map(|c| cm.count(c, c)).sum();
    for c in 0..n {
        let row = cm.row_sum(c);
        let col = cm.col_sum(c);
        let diag = cm.count(c, c) as f64;
        let precision = if col == 0 { 0.0 } else { diag / col as f64 };
        let recall = if row == 0 { 0.0 } else { diag / row as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support: row,
        });
    }
    let present: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.support > 0).collect();
    let k = present.len().max(1) as f64;
    Ok(MetricsReport {
        accuracy: trace as f64 / total as f64,
        macro_precision: present.iter().map(|m| m.precision).sum::<f64>() / k,
        macro_recall: present.iter().map(|m| m.recall).sum::<f64>() / k,
        macro_f1: present.iter().map(|m| m.f1).sum::<f64>() / k,
        per_class,
        n_samples: total,
    })
}

/// Argmax of each probability row, ties to the lowest class index.
pub fn argmax_predictions(probs: &Array2<f64>) -> Vec<u8> {
    probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

fn check_layout(model: &LstmModel, samples: &[Sample]) -> Result<(), EvalError> {
    let Some(first) = samples.first() else {
        return Ok(());
    };
    if first.horizon != model.meta.horizon {
        return Err(EvalError::LayoutMismatch {
            field: "horizon",
            model: model.meta.horizon.to_string(),
            data: first.horizon.to_string(),
        });
    }
    if first.stride != model.meta.stride {
        return Err(EvalError::LayoutMismatch {
            field: "stride",
            model: model.meta.stride.to_string(),
            data: first.stride.to_string(),
        });
    }
    if first.features.ncols() != model.input_size() {
        return Err(EvalError::LayoutMismatch {
            field: "n_features",
            model: model.input_size().to_string(),
            data: first.features.ncols().to_string(),
        });
    }
    Ok(())
}

/// Predicted classes for raw samples: final-timestep probabilities, argmax.
pub fn predict(model: &LstmModel, samples: &[Sample]) -> Result<Vec<u8>, EvalError> {
    check_layout(model, samples)?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(512) {
        let probs = model.predict_samples(chunk)?;
        out.extend(argmax_predictions(&probs));
    }
    Ok(out)
}

/// Confusion matrix and metrics of a model on one test set.
pub fn evaluate(model: &LstmModel, samples: &[Sample]) -> Result<MetricsReport, EvalError> {
    let (_, report) = evaluate_with_confusion(model, samples)?;
    Ok(report)
}

pub fn evaluate_with_confusion(
    model: &LstmModel,
    samples: &[Sample],
) -> Result<(ConfusionMatrix, MetricsReport), EvalError> {
    let predictions = predict(model, samples)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let cm = ConfusionMatrix::from_pairs(&predictions, &labels, model.n_classes())?;
    let report = classification_metrics(&cm)?;
    Ok((cm, report))
}

/// Mean and standard deviation of per-set accuracies in one cross table
/// cell.
#[derive(Clone, Debug)]
pub struct CellStats {
    pub mean: f64,
    pub sd: f64,
    pub per_set: Vec<f64>,
}

fn cell_stats(accuracies: Vec<f64>) -> CellStats {
    let n = accuracies.len().max(1) as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let var = accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    CellStats {
        mean,
        sd: var.sqrt(),
        per_set: accuracies,
    }
}

/// 2x2 accuracy table: rows are models (expert, novice), columns are test
/// expertise (expert, novice).
#[derive(Clone, Debug)]
pub struct CrossTable {
    /// `cells[model][data]` with 0 = expert, 1 = novice.
    pub cells: [[CellStats; 2]; 2],
}

impl CrossTable {
    pub fn cell(&self, model: Expertise, data: Expertise) -> &CellStats {
        let mi = match model {
            Expertise::Expert => 0,
            Expertise::Novice => 1,
        };
        let di = match data {
            Expertise::Expert => 0,
            Expertise::Novice => 1,
        };
        &self.cells[mi][di]
    }
}

/// Evaluate both models on both expertise levels' test sets.
pub fn cross_evaluate(
    expert_model: &LstmModel,
    novice_model: &LstmModel,
    expert_sets: &[Vec<Sample>],
    novice_sets: &[Vec<Sample>],
) -> Result<CrossTable, EvalError> {
    let mut cells: Vec<Vec<CellStats>> = Vec::with_capacity(2);
    for model in [expert_model, novice_model] {
        let mut row = Vec::with_capacity(2);
        for sets in [expert_sets, novice_sets] {
            let mut accs = Vec::with_capacity(sets.len());
            for set in sets {
                let report = evaluate(model, set)?;
                accs.push(report.accuracy);
            }
            row.push(cell_stats(accs));
        }
        cells.push(row);
    }
    let mut it = cells.into_iter();
    let mut r0 = it.next().expect("two rows").into_iter();
    let mut r1 = it.next().expect("two rows").into_iter();
    Ok(CrossTable {
        cells: [
            [r0.next().unwrap(), r0.next().unwrap()],
            [r1.next().unwrap(), r1.next().unwrap()],
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::RngExt;

    #[test]
    fn perfect_predictions_are_diagonal() {
        let labels = [0u8, 1, 2, 3, 4, 2, 1];
        let cm = ConfusionMatrix::from_pairs(&labels, &labels, 5).unwrap();
        for t in 0..5 {
            for p in 0..5 {
                if t == p {
                    continue;
                }
                assert_eq!(cm.count(t, p), 0);
            }
        }
        let report = classification_metrics(&cm).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.macro_f1, 1.0);
        assert_eq!(report.macro_precision, 1.0);
        assert_eq!(report.macro_recall, 1.0);
    }

    #[test]
    fn hand_counted_small_case() {
        let labels = [0u8, 1, 1];
        let predictions = [0u8, 1, 2];
        let cm = ConfusionMatrix::from_pairs(&predictions, &labels, 5).unwrap();
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.count(1, 1), 1);
        assert_eq!(cm.count(1, 2), 1);
        assert_eq!(cm.total(), 3);
    }

    #[test]
    fn row_sums_equal_label_counts() {
        let mut rng = crate::rng::stream(3, "cm", 0);
        let labels: Vec<u8> = (0..500).map(|_| rng.random_range(0..5)).collect();
        let predictions: Vec<u8> = (0..500).map(|_| rng.random_range(0..5)).collect();
        let cm = ConfusionMatrix::from_pairs(&predictions, &labels, 5).unwrap();
        for c in 0..5 {
            let expect = labels.iter().filter(|&&l| l == c as u8).count() as u64;
            assert_eq!(cm.row_sum(c), expect);
        }
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(matches!(
            ConfusionMatrix::from_pairs(&[0, 1], &[0], 5),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn binary_example_matches_hand_computation() {
        // cm [[1,1],[0,2]]: accuracy 0.75; class-0 P=1.0 R=0.5;
        // class-1 P=2/3 R=1.0; macro F1 = (2/3 + 4/5)/2
        let cm = ConfusionMatrix::from_counts(vec![vec![1, 1], vec![0, 2]]);
        let report = classification_metrics(&cm).unwrap();
        assert_abs_diff_eq!(report.accuracy, 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(report.per_class[0].precision, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.per_class[0].recall, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(report.per_class[1].precision, 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.per_class[1].recall, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            report.macro_f1,
            (2.0 / 3.0 + 4.0 / 5.0) / 2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn empty_matrix_is_rejected() {
        let cm = ConfusionMatrix::from_counts(vec![vec![0, 0], vec![0, 0]]);
        assert!(matches!(classification_metrics(&cm), Err(EvalError::Empty)));
    }

    #[test]
    fn accuracy_equals_prevalence_weighted_recall() {
        let mut rng = crate::rng::stream(5, "prev", 0);
        for _ in 0..200 {
            let n_classes = rng.random_range(2..6usize);
            let mut counts = vec![vec![0u64; n_classes]; n_classes];
            for row in counts.iter_mut() {
                for c in row.iter_mut() {
                    *c = rng.random_range(0..20);
                }
            }
            let cm = ConfusionMatrix::from_counts(counts);
            if cm.total() == 0 {
                continue;
            }
            let report = classification_metrics(&cm).unwrap();
            let total = cm.total() as f64;
            let weighted: f64 = (0..n_classes)
                .map(|c| report.per_class[c].recall * cm.row_sum(c) as f64 / total)
                .sum();
            assert_abs_diff_eq!(report.accuracy, weighted, epsilon = 1e-12);
        }
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let mut rng = crate::rng::stream(6, "perm", 0);
        let labels: Vec<u8> = (0..100).map(|_| rng.random_range(0..5)).collect();
        let predictions: Vec<u8> = (0..100).map(|_| rng.random_range(0..5)).collect();
        let a = ConfusionMatrix::from_pairs(&predictions, &labels, 5).unwrap();
        let mut idx: Vec<usize> = (0..100).collect();
        use rand::seq::SliceRandom;
        idx.shuffle(&mut rng);
        let p2: Vec<u8> = idx.iter().map(|&i| predictions[i]).collect();
        let l2: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        let b = ConfusionMatrix::from_pairs(&p2, &l2, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn macro_f1_bounded_by_per_class_f1() {
        let mut rng = crate::rng::stream(7, "bound", 0);
        for _ in 0..100 {
            let mut counts = vec![vec![0u64; 5]; 5];
            for row in counts.iter_mut() {
                for c in row.iter_mut() {
                    *c = rng.random_range(0..15);
                }
            }
            let cm = ConfusionMatrix::from_counts(counts);
            if cm.total() == 0 {
                continue;
            }
            let report = classification_metrics(&cm).unwrap();
            let present: Vec<f64> = report
                .per_class
                .iter()
                .filter(|m| m.support > 0)
                .map(|m| m.f1)
                .collect();
            let max = present.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = present.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(report.macro_f1 <= max + 1e-12);
            assert!(report.macro_f1 >= min - 1e-12);
        }
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_index() {
        let probs = ndarray::array![[0.25, 0.25, 0.25, 0.25], [0.1, 0.4, 0.4, 0.1]];
        assert_eq!(argmax_predictions(&probs), vec![0, 1]);
    }

    #[test]
    fn constant_predictor_scores_chance_on_balanced_labels() {
        // 5 classes, 100 samples each, predictor always answers 3
        let mut labels = Vec::new();
        for c in 0..5u8 {
            labels.extend(std::iter::repeat_n(c, 100));
        }
        let predictions = vec![3u8; 500];
        let cm = ConfusionMatrix::from_pairs(&predictions, &labels, 5).unwrap();
        let report = classification_metrics(&cm).unwrap();
        assert_abs_diff_eq!(report.accuracy, 0.2, epsilon = 1e-12);
    }

    #[test]
    fn layout_mismatch_names_the_field() {
        use crate::dataset::Subclass;
        use std::sync::Arc;
        let mut model = LstmModel::new(48, &[4], 5, 1);
        model.meta.horizon = 16;
        model.meta.stride = 2;
        let sample = Sample {
            features: Array2::zeros((25, 48)),
            label: 0,
            subclass: Subclass::NonTransitioningNonSwitching,
            horizon: 32,
            stride: 2,
            trial_id: Arc::from("x"),
            focal: 0,
            t_f: 24,
        };
        match predict(&model, &[sample]) {
            Err(EvalError::LayoutMismatch { field, .. }) => assert_eq!(field, "horizon"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn same_model_same_set_identical_accuracy() {
        use crate::dataset::Subclass;
        use std::sync::Arc;
        let mut model = LstmModel::new(6, &[5], 5, 9);
        model.meta.horizon = 16;
        model.meta.stride = 2;
        let mut rng = crate::rng::stream(11, "eval-det", 0);
        let samples: Vec<Sample> = (0..40)
            .map(|k| {
                let mut m = Array2::zeros((8, 6));
                for x in m.iter_mut() {
                    *x = rng.random_range(-1.0..1.0);
                }
                Sample {
                    features: m,
                    label: (k % 5) as u8,
                    subclass: Subclass::NonTransitioningNonSwitching,
                    horizon: 16,
                    stride: 2,
                    trial_id: Arc::from("d"),
                    focal: 0,
                    t_f: k as u32,
                }
            })
            .collect();
        let a = evaluate(&model, &samples).unwrap();
        let b = evaluate(&model, &samples).unwrap();
        assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
    }
}
