//! Accuracy matrix and the final average accuracy / forgetting.

use crate::error::{contract, Result};

/// Lower-triangular table: `rows[j][i]` is the accuracy on task `i` after
/// training task `j` (both 0-based here, `i ≤ j`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a matrix from explicit rows; row `j` must have `j + 1`
    /// entries in `[0, 1]`.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let want = self.rows.len() + 1;
        if row.len() != want {
            return Err(contract(
                "AccuracyMatrix::push_row",
                format!(
                    "row {} has {} entries, expected {want}",
                    self.rows.len(),
                    row.len()
                ),
            ));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(contract(
                "AccuracyMatrix::push_row",
                format!("accuracy {v} outside [0,1]"),
            ));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Number of completed tasks.
    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, after: usize, task: usize) -> Option<f64> {
        self.rows.get(after).and_then(|r| r.get(task)).copied()
    }
}

/// Final average accuracy and forgetting of a complete matrix.
///
/// Forgetting of task `i` is `max_{i ≤ j < T} a[j][i] − a[T][i]`; its mean
/// over the first `T − 1` tasks is `None` when `T = 1`.
pub fn final_metrics(a: &AccuracyMatrix) -> Result<(f64, Option<f64>)> {
    let t = a.tasks();
    if t == 0 {
        return Err(contract("final_metrics", "empty accuracy matrix"));
    }
    let last = &a.rows[t - 1];
    let acc = last.iter().sum::<f64>() / t as f64;
    if t == 1 {
        return Ok((acc, None));
    }
    let mut total = 0.0;
    for i in 0..t - 1 {
        let best = (i..t - 1)
            .map(|j| a.rows[j][i])
            .fold(f64::NEG_INFINITY, f64::max);
        total += best - last[i];
    }
    Ok((acc, Some(total / (t - 1) as f64)))
}

/// Mean and sample standard deviation (`n − 1`); the deviation is 0 for a
/// single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_task_hand_case() {
        let a = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.8, 0.7]]).unwrap();
        let (acc, fgt) = final_metrics(&a).unwrap();
        assert!((acc - 0.75).abs() < 1e-15);
        assert!((fgt.unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn constant_columns_do_not_forget() {
        let a = AccuracyMatrix::from_rows(vec![vec![0.6], vec![0.6, 0.5], vec![0.6, 0.5, 0.4]])
            .unwrap();
        assert_eq!(final_metrics(&a).unwrap().1, Some(0.0));
    }

    #[test]
    fn single_task_has_no_forgetting() {
        let a = AccuracyMatrix::from_rows(vec![vec![0.3]]).unwrap();
        assert_eq!(final_metrics(&a).unwrap(), (0.3, None));
    }

    #[test]
    fn malformed_rows_are_rejected() {
        assert!(AccuracyMatrix::from_rows(vec![vec![0.1, 0.2]]).is_err());
        assert!(AccuracyMatrix::from_rows(vec![vec![1.5]]).is_err());
        assert!(final_metrics(&AccuracyMatrix::new()).is_err());
    }

    #[test]
    fn mean_std_basics() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
