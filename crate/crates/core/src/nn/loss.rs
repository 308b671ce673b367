use crate::error::{Error, Result};
use crate::tensor::TensorF64;

/// Mean softmax cross-entropy over a batch of logits.
///
/// Returns the loss and `dL/dlogits = (softmax - onehot) / batch`.
pub fn softmax_xent(logits: &TensorF64, labels: &[usize]) -> Result<(f64, TensorF64)> {
    if !logits.is_matrix() || logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let (rows, classes) = (logits.rows(), logits.cols());
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes,
        });
    }
    let n = rows as f64;
    let mut grad = Vec::with_capacity(rows * classes);
    let mut loss = 0.0;
    for (row, &y) in logits.iter_rows().zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += sum.ln() - (row[y] - max);
        for (c, e) in exps.iter().enumerate() {
            let p = e / sum;
            let t = if c == y { 1.0 } else { 0.0 };
            grad.push((p - t) / n);
        }
    }
    Ok((loss / n, TensorF64::from_parts(vec![rows, classes], grad)))
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn argmax_rows(t: &TensorF64) -> Vec<usize> {
    t.iter_rows()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = TensorF64::matrix(2, 5, vec![0.3; 10]).unwrap();
        let (loss, _) = softmax_xent(&logits, &[0, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_approach_zero() {
        let logits = TensorF64::matrix(1, 3, vec![60.0, 0.0, 0.0]).unwrap();
        let (loss, _) = softmax_xent(&logits, &[0]).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let logits = TensorF64::matrix(1, 3, vec![0.0; 3]).unwrap();
        assert!(matches!(
            softmax_xent(&logits, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn grad_matches_central_differences() {
        let vals = vec![0.2, -1.3, 0.7, 1.1, 0.05, -0.4, -0.9, 2.0, 0.3];
        let labels = [2, 0, 1];
        let logits = TensorF64::matrix(3, 3, vals.clone()).unwrap();
        let (_, g) = softmax_xent(&logits, &labels).unwrap();
        let h = 1e-5;
        for k in 0..vals.len() {
            let mut p = vals.clone();
            p[k] += h;
            let mut m = vals.clone();
            m[k] -= h;
            let lp = softmax_xent(&TensorF64::matrix(3, 3, p).unwrap(), &labels).unwrap().0;
            let lm = softmax_xent(&TensorF64::matrix(3, 3, m).unwrap(), &labels).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g.values()[k]).abs() < 1e-6, "k={k}: {fd} vs {}", g.values()[k]);
        }
    }

    #[test]
    fn argmax_ties_pick_first() {
        let t = TensorF64::matrix(2, 3, vec![1., 1., 0., 0., 2., 2.]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }
}
