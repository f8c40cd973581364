//! Softmax-based losses. Both return the mean loss over rows and its gradient
//! with respect to the input logits.

use super::matrix::DenseMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: DenseMatrix,
}

/// Numerically stable log-softmax of one row.
fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(row) {
        *o = v - max - log_sum;
    }
}

pub fn log_softmax_rows(logits: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        log_softmax_row(logits.row(r), out.row_mut(r));
    }
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &DenseMatrix) -> DenseMatrix {
    let mut out = log_softmax_rows(logits);
    out.data_mut().iter_mut().for_each(|v| *v = v.exp());
    out
}

/// Mean cross-entropy of softmax(logits) against class indices.
///
/// The gradient is `(softmax(logits) - onehot(labels)) / n`.
pub fn cross_entropy_loss(logits: &DenseMatrix, labels: &[usize]) -> Result<LossOutput> {
    if labels.len() != logits.rows() {
        return Err(Error::Validation(format!(
            "{} labels for {} rows of logits",
            labels.len(),
            logits.rows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(Error::Validation(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    let n = logits.rows() as f64;
    let log_p = log_softmax_rows(logits);
    let mut grad = DenseMatrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        loss -= log_p.get(r, y);
        for (g, lp) in grad.row_mut(r).iter_mut().zip(log_p.row(r)) {
            *g = lp.exp() / n;
        }
        let g = grad.get(r, y);
        grad.set(r, y, g - 1.0 / n);
    }
    Ok(LossOutput {
        loss: (loss / n).max(0.0),
        grad,
    })
}

/// `KL(softmax(student) || softmax(teacher))`, averaged over rows.
///
/// The teacher is treated as a constant: the gradient is with respect to the
/// student logits only. Per row, `dKL/dz_j = p_j (log p_j - log q_j - KL_row)`.
pub fn kl_divergence(student: &DenseMatrix, teacher: &DenseMatrix) -> Result<LossOutput> {
    if student.shape() != teacher.shape() {
        return Err(Error::Shape(format!(
            "student logits are {}x{}, teacher logits are {}x{}",
            student.rows(),
            student.cols(),
            teacher.rows(),
            teacher.cols()
        )));
    }
    let n = student.rows() as f64;
    let log_p = log_softmax_rows(student);
    let log_q = log_softmax_rows(teacher);
    let mut grad = DenseMatrix::zeros(student.rows(), student.cols());
    let mut total = 0.0;
    for r in 0..student.rows() {
        let (lp, lq) = (log_p.row(r), log_q.row(r));
        let row_kl: f64 = lp
            .iter()
            .zip(lq)
            .map(|(a, b)| a.exp() * (a - b))
            .sum();
        total += row_kl;
        for ((g, a), b) in grad.row_mut(r).iter_mut().zip(lp).zip(lq) {
            *g = a.exp() * (a - b - row_kl) / n;
        }
    }
    Ok(LossOutput {
        loss: (total / n).max(0.0),
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn confident_correct_prediction_has_near_zero_loss() {
        let out = cross_entropy_loss(&m(&[&[50.0, -50.0], &[-50.0, 50.0]]), &[0, 1]).unwrap();
        assert!(out.loss < 1e-12);
    }

    #[test]
    fn uniform_logits_give_log_c() {
        for c in 2..6 {
            let logits = DenseMatrix::zeros(3, c);
            let out = cross_entropy_loss(&logits, &[0, 1, c - 1]).unwrap();
            assert!((out.loss - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_matches_scalar_reference() {
        let logits = m(&[&[0.3, -1.2], &[2.0, 0.7], &[-0.4, -0.1]]);
        let labels = [1, 0, 1];
        // -mean(log softmax at true class), written out per row
        let row_loss = |a: f64, b: f64, y: usize| {
            let t = if y == 0 { a } else { b };
            -(t - (a.exp() + b.exp()).ln())
        };
        let expected =
            (row_loss(0.3, -1.2, 1) + row_loss(2.0, 0.7, 0) + row_loss(-0.4, -0.1, 1)) / 3.0;
        let out = cross_entropy_loss(&logits, &labels).unwrap();
        assert!((out.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let err = cross_entropy_loss(&DenseMatrix::zeros(2, 2), &[0, 2]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn softmax_rows_are_stochastic_for_extreme_logits() {
        let p = softmax_rows(&m(&[&[1000.0, -1000.0, 3.0], &[-745.0, -746.0, -744.0]]));
        for r in 0..2 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_of_identical_logits_is_zero() {
        let z = m(&[&[0.2, 1.5, -0.3], &[4.0, 0.0, 1.0]]);
        assert_eq!(kl_divergence(&z, &z).unwrap().loss, 0.0);
    }

    #[test]
    fn kl_uniform_student_against_peaked_teacher() {
        // student p = (1/2, 1/2); teacher q = softmax(4, 0)
        let out = kl_divergence(&m(&[&[0.0, 0.0]]), &m(&[&[4.0, 0.0]])).unwrap();
        let q0 = 4f64.exp() / (4f64.exp() + 1.0);
        let q1 = 1.0 - q0;
        let expected = 0.5 * (0.5 / q0).ln() + 0.5 * (0.5 / q1).ln();
        assert!((out.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_shape_mismatch() {
        assert!(matches!(
            kl_divergence(&DenseMatrix::zeros(1, 2), &DenseMatrix::zeros(1, 3)),
            Err(Error::Shape(_))
        ));
    }
}
