use crate::error::{Error, Result};
use crate::matrix::RowMatrix;

pub const DEFAULT_KL_FLOOR: f64 = 1e-9;

fn check_shapes(a: &RowMatrix, b: &RowMatrix) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", b.rows(), b.cols()),
            actual: format!("{}x{}", a.rows(), a.cols()),
        });
    }
    Ok(())
}

/// Root mean squared error over all `n * C` entries.
pub fn rmse(estimate: &RowMatrix, truth: &RowMatrix) -> Result<f64> {
    check_shapes(estimate, truth)?;
    let entries = estimate.as_slice().len();
    if entries == 0 {
        return Ok(0.0);
    }
    let sum: f64 = estimate
        .as_slice()
        .iter()
        .zip(truth.as_slice())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((sum / entries as f64).sqrt())
}

/// Mean over points of `KL(truth_q || estimate_q)`, both rows floored at
/// `floor` and renormalized. Terms with zero truth mass contribute nothing.
pub fn kl_divergence(estimate: &RowMatrix, truth: &RowMatrix, floor: f64) -> Result<f64> {
    check_shapes(estimate, truth)?;
    if !(floor > 0.0) {
        return Err(Error::InvalidArgument(format!("KL floor must be positive, got {floor}")));
    }
    let n = estimate.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let floored = |row: &[f64]| -> Vec<f64> {
        let v: Vec<f64> = row.iter().map(|&x| x.max(floor)).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    };
    let mut total = 0.0;
    for q in 0..n {
        let p = floored(truth.row(q));
        let e = floored(estimate.row(q));
        total += truth
            .row(q)
            .iter()
            .zip(p.iter().zip(&e))
            .filter(|(&t, _)| t > 0.0)
            .map(|(_, (&pc, &ec))| pc * (pc / ec).ln())
            .sum::<f64>();
    }
    Ok((total / n as f64).max(0.0))
}
