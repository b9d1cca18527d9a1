//! Per-task accuracy, average accuracy and the forgetting measure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::TaskKind;

/// Exact-match rate of the argmax (classification) or sign agreement
/// (regression, zero counted as non-negative).
pub fn accuracy(preds: &[Vec<f64>], labels: &[f64], kind: TaskKind) -> Result<f64> {
    accuracy_with_threshold(preds, labels, kind, 0.0)
}

/// [`accuracy`] with a configurable regression threshold: values `>= threshold`
/// count as positive.
pub fn accuracy_with_threshold(preds: &[Vec<f64>], labels: &[f64], kind: TaskKind, threshold: f64) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Domain("accuracy of an empty set".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::dim("accuracy", format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let mut correct = 0usize;
    for (p, &y) in preds.iter().zip(labels) {
        let hit = match kind {
            TaskKind::CrossEntropy => argmax(p)? as f64 == y,
            TaskKind::L1Regression => {
                let &[x] = p.as_slice() else {
                    return Err(Error::dim("accuracy", format!("regression prediction has {} outputs", p.len())));
                };
                (x >= threshold) == (y >= threshold)
            }
        };
        correct += hit as usize;
    }
    Ok(correct as f64 / preds.len() as f64)
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> Result<usize> {
    if row.is_empty() {
        return Err(Error::Domain("argmax of an empty row".into()));
    }
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Accuracies `a_{i,j}` for `1 ≤ i ≤ j ≤ T`: task `i` evaluated after training on task `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    tasks: usize,
    /// Row-major upper triangle: `cells[i-1][j-i]`.
    cells: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            tasks,
            cells: (0..tasks).map(|i| vec![None; tasks - i]).collect(),
        }
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    fn slot(&self, i: usize, j: usize) -> Result<(usize, usize)> {
        if i == 0 || i > j || j > self.tasks {
            return Err(Error::Index {
                op: "accuracy_matrix",
                detail: format!("cell ({i}, {j}) outside 1 ≤ i ≤ j ≤ {}", self.tasks),
            });
        }
        Ok((i - 1, j - i))
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Domain(format!("accuracy {value} outside [0, 1]")));
        }
        let (r, c) = self.slot(i, j)?;
        self.cells[r][c] = Some(value);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Result<Option<f64>> {
        let (r, c) = self.slot(i, j)?;
        Ok(self.cells[r][c])
    }

    fn require(&self, i: usize, j: usize) -> Result<f64> {
        self.get(i, j)?
            .ok_or_else(|| Error::Contract(format!("accuracy a_{{{i},{j}}} has not been recorded")))
    }

    /// Number of recorded cells.
    pub fn populated(&self) -> usize {
        self.cells.iter().flatten().filter(|c| c.is_some()).count()
    }

    /// Populated cells as `(i, j, a_{i,j})`, column by column.
    pub fn entries(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for j in 1..=self.tasks {
            for i in 1..=j {
                if let Some(a) = self.cells[i - 1][j - i] {
                    out.push((i, j, a));
                }
            }
        }
        out
    }
}

/// `AA = (1/n) Σ_{i≤n} a_{i,n}`.
pub fn average_accuracy(mat: &AccuracyMatrix, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Contract("average accuracy needs n ≥ 1".into()));
    }
    let mut total = 0.0;
    for i in 1..=n {
        total += mat.require(i, n)?;
    }
    Ok(total / n as f64)
}

/// `FM = (1/(n−1)) Σ_{i<n} max_{j∈[i,n−1]} (a_{i,j} − a_{i,n})`, or `None`
/// when `n < 2` (not applicable).
pub fn forgetting_measure(mat: &AccuracyMatrix, n: usize) -> Result<Option<f64>> {
    if n < 2 {
        return Ok(None);
    }
    let mut total = 0.0;
    for i in 1..n {
        let last = mat.require(i, n)?;
        let mut peak = f64::NEG_INFINITY;
        for j in i..n {
            peak = peak.max(mat.require(i, j)? - last);
        }
        total += peak;
    }
    Ok(Some(total / (n - 1) as f64))
}
