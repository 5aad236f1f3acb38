//! Confusion tables, macro precision/recall/F1, and per-disease reports.
//!
//! Conventions: a zero denominator yields 0; the macro average runs over all
//! classes of the table (including ones never predicted); the report average
//! is the unweighted mean of the per-disease rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{ClassLabel, DiseaseId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionTable {
    classes: Vec<ClassLabel>,
    /// Row-major, rows = true class, columns = predicted class.
    counts: Vec<u64>,
}

impl ConfusionTable {
    pub fn classes(&self) -> &[ClassLabel] {
        &self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes.len() + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.classes.len()).map(|p| self.get(truth, p)).sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        (0..self.classes.len()).map(|t| self.get(t, predicted)).sum()
    }
}

pub fn confusion(
    truth: &[ClassLabel],
    predicted: &[ClassLabel],
    classes: &[ClassLabel],
) -> Result<ConfusionTable> {
    if truth.len() != predicted.len() {
        return Err(Error::Shape(format!(
            "{} true labels vs {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let k = classes.len();
    let index = |label: ClassLabel| {
        classes
            .iter()
            .position(|&c| c == label)
            .ok_or_else(|| Error::Label(format!("label `{label}` not among {classes:?}")))
    };
    let mut counts = vec![0u64; k * k];
    for (&t, &p) in truth.iter().zip(predicted) {
        counts[index(t)? * k + index(p)?] += 1;
    }
    Ok(ConfusionTable {
        classes: classes.to_vec(),
        counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub const ZERO: Prf = Prf {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Averaging {
    #[default]
    Macro,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Precision, recall and F1 of each class, in table order.
pub fn per_class(table: &ConfusionTable) -> Vec<Prf> {
    (0..table.classes.len())
        .map(|c| {
            let tp = table.get(c, c);
            let precision = ratio(tp, table.col_sum(c));
            let recall = ratio(tp, table.row_sum(c));
            Prf {
                precision,
                recall,
                f1: f1_of(precision, recall),
            }
        })
        .collect()
}

pub fn prf(table: &ConfusionTable, averaging: Averaging) -> Prf {
    match averaging {
        Averaging::Macro => mean_prf(&per_class(table)),
    }
}

fn mean_prf(rows: &[Prf]) -> Prf {
    if rows.is_empty() {
        return Prf::ZERO;
    }
    let n = rows.len() as f64;
    Prf {
        precision: rows.iter().map(|r| r.precision).sum::<f64>() / n,
        recall: rows.iter().map(|r| r.recall).sum::<f64>() / n,
        f1: rows.iter().map(|r| r.f1).sum::<f64>() / n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_disease: BTreeMap<DiseaseId, Prf>,
    pub average: Prf,
}

/// Unweighted mean over diseases. Rows are reduced in disease order, so the
/// result does not depend on the input order.
pub fn aggregate_report(rows: &[(DiseaseId, Prf)]) -> Result<MetricsReport> {
    if rows.is_empty() {
        return Err(Error::Data("a report needs at least one disease".into()));
    }
    let mut per_disease = BTreeMap::new();
    for &(d, row) in rows {
        if per_disease.insert(d, row).is_some() {
            return Err(Error::Data(format!("disease {d} reported twice")));
        }
    }
    let ordered: Vec<Prf> = per_disease.values().copied().collect();
    Ok(MetricsReport {
        average: mean_prf(&ordered),
        per_disease,
    })
}

impl MetricsReport {
    /// `disease,precision,recall,f1` rows followed by an `AVERAGE` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("disease,precision,recall,f1\n");
        let mut row = |name: &str, r: &Prf| {
            writeln!(out, "{name},{:.6},{:.6},{:.6}", r.precision, r.recall, r.f1)
                .expect("write to string");
        };
        for (d, r) in &self.per_disease {
            row(&d.to_string(), r);
        }
        row("AVERAGE", &self.average);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ClassLabel::{Absent as A, Present as P, Questionable as Q};

    #[test]
    fn perfect_predictions_are_diagonal() {
        let truth = [A, P, P, Q];
        let t = confusion(&truth, &truth, &[A, P, Q]).unwrap();
        assert_eq!(t.get(0, 0), 1);
        assert_eq!(t.get(1, 1), 2);
        assert_eq!(t.get(0, 1) + t.get(1, 0) + t.get(2, 0), 0);
        let r = prf(&confusion(&[A, P], &[A, P], &[A, P]).unwrap(), Averaging::Macro);
        assert_eq!(r, Prf { precision: 1.0, recall: 1.0, f1: 1.0 });
    }

    #[test]
    fn empty_input_gives_zero_table() {
        let t = confusion(&[], &[], &[A, P]).unwrap();
        assert_eq!(t.total(), 0);
        assert_eq!(prf(&t, Averaging::Macro), Prf::ZERO);
    }

    #[test]
    fn unknown_label_is_an_error() {
        assert!(matches!(confusion(&[Q], &[A], &[A, P]), Err(Error::Label(_))));
        assert!(confusion(&[A], &[], &[A, P]).is_err());
    }

    #[test]
    fn constant_prediction_on_balanced_truth() {
        let truth = [A, A, P, P];
        let t = confusion(&truth, &[P; 4], &[A, P]).unwrap();
        let r = prf(&t, Averaging::Macro);
        assert!((r.precision - 0.25).abs() < 1e-15);
        assert!((r.recall - 0.5).abs() < 1e-15);
        assert!((r.f1 - 1.0 / 3.0).abs() < 1e-15);
        // Absent is never predicted, so its precision is 0 by convention.
        assert_eq!(per_class(&t)[0].precision, 0.0);
    }

    #[test]
    fn aggregate_examples() {
        let row = Prf { precision: 0.5, recall: 0.4, f1: 0.9 };
        let one = aggregate_report(&[(3, row)]).unwrap();
        assert_eq!(one.average, row);

        let two = aggregate_report(&[
            (0, Prf { f1: 0.9, ..row }),
            (1, Prf { f1: 0.5, ..row }),
        ])
        .unwrap();
        assert!((two.average.f1 - 0.7).abs() < 1e-15);
        assert!(aggregate_report(&[]).is_err());
        assert!(aggregate_report(&[(0, row), (0, row)]).is_err());
    }

    #[test]
    fn csv_layout() {
        let r = aggregate_report(&[
            (1, Prf { precision: 1.0, recall: 0.5, f1: 2.0 / 3.0 }),
            (0, Prf::ZERO),
        ])
        .unwrap();
        assert_eq!(
            r.to_csv(),
            "disease,precision,recall,f1\n\
             0,0.000000,0.000000,0.000000\n\
             1,1.000000,0.500000,0.666667\n\
             AVERAGE,0.500000,0.250000,0.333333\n"
        );
        let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
