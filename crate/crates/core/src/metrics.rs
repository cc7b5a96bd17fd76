//! Accuracy, macro precision/F1 and the confusion matrix.

use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_precision: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    pub fn from_predictions(truth: &[usize], predicted: &[usize], num_classes: usize) -> Self {
        assert_eq!(truth.len(), predicted.len());
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion)
    }

    /// Classes with no predictions (precision) or no support (recall)
    /// contribute 0 to the macro averages.
    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Self {
        let c = confusion.len();
        let n: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
        let mut precision_sum = 0.0;
        let mut f1_sum = 0.0;
        for k in 0..c {
            let tp = confusion[k][k] as f64;
            let predicted: usize = (0..c).map(|i| confusion[i][k]).sum();
            let support: usize = confusion[k].iter().sum();
            let p = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let r = if support == 0 { 0.0 } else { tp / support as f64 };
            precision_sum += p;
            if p + r > 0.0 {
                f1_sum += 2.0 * p * r / (p + r);
            }
        }
        Metrics {
            accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
            macro_f1: f1_sum / c as f64,
            macro_precision: precision_sum / c as f64,
            confusion,
        }
    }

    /// Plain-text rendering (stable, used by `evaluate`).
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "accuracy\t{:.6}\nmacro_f1\t{:.6}\nmacro_precision\t{:.6}\nconfusion (rows = true)\n",
            self.accuracy, self.macro_f1, self.macro_precision
        );
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&cells.join("\t"));
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions() {
        let m = Metrics::from_predictions(&[0, 1, 2, 1], &[0, 1, 2, 1], 3);
        assert_eq!((m.accuracy, m.macro_f1, m.macro_precision), (1.0, 1.0, 1.0));
    }

    #[test]
    fn one_class_predictor_on_balanced_pair() {
        let m = Metrics::from_predictions(&[0, 0, 1, 1], &[0, 0, 0, 0], 2);
        assert_eq!(m.accuracy, 0.5);
        assert!((m.macro_precision - 0.25).abs() < 1e-12);
        // F1 for class 0: p = 0.5, r = 1.
        assert!((m.macro_f1 - (2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn confusion_matches_tally(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..60)) {
            let truth: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let m = Metrics::from_predictions(&truth, &pred, 4);
            for t in 0..4 {
                for p in 0..4 {
                    let tally = pairs.iter().filter(|&&(a, b)| a == t && b == p).count();
                    prop_assert_eq!(m.confusion[t][p], tally);
                }
            }
            let trace: usize = (0..4).map(|i| m.confusion[i][i]).sum();
            prop_assert!((m.accuracy - trace as f64 / pairs.len() as f64).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&m.macro_f1));
            prop_assert!((0.0..=1.0).contains(&m.macro_precision));
        }
    }
}
