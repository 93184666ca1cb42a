//! Softmax cross-entropy over unnormalized class scores.

use ndarray::Array2;

/// Mean cross-entropy and its gradient with respect to the scores.
///
/// Scores are raw (no softmax applied upstream); the gradient is
/// (softmax - onehot) / batch.
pub fn cross_entropy(scores: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let (n, c) = scores.dim();
    assert_eq!(n, labels.len(), "one label per row");
    let mut grad = Array2::zeros((n, c));
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        assert!(label < c, "label {label} out of range for {c} classes");
        let row = scores.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum_exp = 0.0;
        for v in row.iter() {
            sum_exp += (v - max).exp();
        }
        let lse = max + sum_exp.ln();
        total += lse - row[label];
        for j in 0..c {
            let p = (row[j] - lse).exp();
            grad[[i, j]] = (p - if j == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (total / n as f64, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn uniform_scores_give_ln_c() {
        for c in [2usize, 10, 16] {
            let scores = Array2::from_elem((3, c), 0.7);
            let (loss, _) = cross_entropy(&scores, &[0, c / 2, c - 1]);
            assert!(
                (loss - (c as f64).ln()).abs() < 1e-6,
                "loss {loss} vs ln({c})"
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let scores = arr2(&[[0.2, -1.0, 0.7], [1.5, 0.1, -0.4]]);
        let labels = [2usize, 0];
        let (_, grad) = cross_entropy(&scores, &labels);
        let eps = 1e-7;
        for i in 0..2 {
            for j in 0..3 {
                let mut sp = scores.clone();
                sp[[i, j]] += eps;
                let mut sm = scores.clone();
                sm[[i, j]] -= eps;
                let (lp, _) = cross_entropy(&sp, &labels);
                let (lm, _) = cross_entropy(&sm, &labels);
                let fd = (lp - lm) / (2.0 * eps);
                assert!((grad[[i, j]] - fd).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn large_scores_stay_finite() {
        let scores = arr2(&[[1000.0, -1000.0]]);
        let (loss, grad) = cross_entropy(&scores, &[0]);
        assert!(loss.is_finite());
        assert!(grad.iter().all(|g| g.is_finite()));
    }
}
