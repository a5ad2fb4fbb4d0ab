//! Exact and 1-off accuracy over a confusion matrix, plus the text and CSV
//! reports.

use std::fmt::Write as _;

use crate::data::{LABELS, NUM_LABELS};
use crate::error::{Error, Result};

/// Counts with rows indexed by the true label and columns by the prediction.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_LABELS]; NUM_LABELS],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= NUM_LABELS || pred >= NUM_LABELS {
            return Err(Error::Input(format!("label pair ({truth}, {pred}) outside [0, {NUM_LABELS})")));
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    /// Sum of the cells with `|row − col| ≤ radius`.
    fn band(&self, radius: usize) -> u64 {
        let mut sum = 0;
        for (r, row) in self.counts.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if r.abs_diff(c) <= radius {
                    sum += v;
                }
            }
        }
        sum
    }
}

pub fn confusion(preds: &[usize], truths: &[usize]) -> Result<ConfusionMatrix> {
    if preds.len() != truths.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} ground-truth labels",
            preds.len(),
            truths.len()
        )));
    }
    let mut m = ConfusionMatrix::default();
    for (&p, &t) in preds.iter().zip(truths) {
        m.add(t, p)?;
    }
    Ok(m)
}

fn fraction(hits: u64, m: &ConfusionMatrix) -> Result<f64> {
    match m.total() {
        0 => Err(Error::Input("accuracy of an empty confusion matrix".into())),
        n => Ok(hits as f64 / n as f64),
    }
}

pub fn exact_accuracy(m: &ConfusionMatrix) -> Result<f64> {
    fraction(m.band(0), m)
}

/// Fraction of predictions at most one label away from the truth. The scale
/// does not wrap: "0-2" and "60-" each have a single neighbor.
pub fn one_off_accuracy(m: &ConfusionMatrix) -> Result<f64> {
    fraction(m.band(1), m)
}

pub type PercentMatrix = [[f64; NUM_LABELS]; NUM_LABELS];

/// Each row scaled to sum to 100; empty rows stay zero.
pub fn row_normalize(counts: &[[f64; NUM_LABELS]; NUM_LABELS]) -> PercentMatrix {
    let mut out = [[0.0; NUM_LABELS]; NUM_LABELS];
    for (src, dst) in counts.iter().zip(out.iter_mut()) {
        let total: f64 = src.iter().sum();
        if total > 0.0 {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = 100.0 * s / total;
            }
        }
    }
    out
}

impl ConfusionMatrix {
    pub fn as_f64(&self) -> [[f64; NUM_LABELS]; NUM_LABELS] {
        self.counts.map(|row| row.map(|v| v as f64))
    }

    pub fn percent(&self) -> PercentMatrix {
        row_normalize(&self.as_f64())
    }
}

/// Per-row mass within one label of the diagonal, in the row's own units.
pub fn within_one_by_row(rows: &PercentMatrix) -> [f64; NUM_LABELS] {
    let mut out = [0.0; NUM_LABELS];
    for (r, row) in rows.iter().enumerate() {
        out[r] = row
            .iter()
            .enumerate()
            .filter(|(c, _)| r.abs_diff(*c) <= 1)
            .map(|(_, v)| v)
            .sum();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub exact_accuracy: f64,
    pub one_off_accuracy: f64,
    pub matrix: ConfusionMatrix,
    pub percent: PercentMatrix,
}

impl EvalReport {
    pub fn from_matrix(matrix: ConfusionMatrix) -> Result<Self> {
        Ok(EvalReport {
            exact_accuracy: exact_accuracy(&matrix)?,
            one_off_accuracy: one_off_accuracy(&matrix)?,
            percent: matrix.percent(),
            matrix,
        })
    }

    pub fn from_pairs(preds: &[usize], truths: &[usize]) -> Result<Self> {
        Self::from_matrix(confusion(preds, truths)?)
    }
}

const CELL: usize = 8;

/// Row-normalized percentages at two decimals under a header of label
/// strings, then the accuracy footer.
pub fn render_report(r: &EvalReport) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:>CELL$}", "");
    for l in LABELS {
        let _ = write!(out, "{l:>CELL$}");
    }
    out.push('\n');
    for (l, row) in LABELS.iter().zip(&r.percent) {
        let _ = write!(out, "{l:>CELL$}");
        for v in row {
            let _ = write!(out, "{v:>CELL$.2}");
        }
        out.push('\n');
    }
    let _ = writeln!(
        out,
        "exact={:.2}% one_off={:.2}%",
        100.0 * r.exact_accuracy,
        100.0 * r.one_off_accuracy
    );
    out
}

/// Machine-readable form: `metric,actual,predicted,value` rows for every
/// count and percent cell, then the scalar metrics.
pub fn report_csv(r: &EvalReport) -> String {
    let mut out = String::from("metric,actual,predicted,value\n");
    for (i, a) in LABELS.iter().enumerate() {
        for (j, p) in LABELS.iter().enumerate() {
            let _ = writeln!(out, "count,{a},{p},{}", r.matrix.counts[i][j]);
        }
    }
    for (i, a) in LABELS.iter().enumerate() {
        for (j, p) in LABELS.iter().enumerate() {
            let _ = writeln!(out, "percent,{a},{p},{:.6}", r.percent[i][j]);
        }
    }
    let _ = writeln!(out, "exact_accuracy,,,{:.6}", r.exact_accuracy);
    let _ = writeln!(out, "one_off_accuracy,,,{:.6}", r.one_off_accuracy);
    let _ = writeln!(out, "total,,,{}", r.matrix.total());
    out
}
