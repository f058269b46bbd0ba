use super::NdArray;
use crate::error::{Error, Result};

/// Max-shifted softmax of one logit vector.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row-wise softmax of a `[batch, classes]` array.
pub fn softmax_rows(logits: &NdArray) -> NdArray {
    let cols = logits.cols();
    let data: Vec<f64> = logits.data().chunks(cols).flat_map(softmax).collect();
    NdArray::new(logits.shape().to_vec(), data).expect("same shape")
}

/// `-ln softmax(row)[label]`, computed through log-sum-exp.
pub(crate) fn row_nll(row: &[f64], label: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    lse - row[label]
}

fn check_labels(logits: &NdArray, labels: &[usize], op: &'static str) -> Result<()> {
    if logits.shape().len() != 2 || logits.rows() != labels.len() {
        return Err(Error::shape(
            op,
            format!("logits {:?} vs {} labels", logits.shape(), labels.len()),
        ));
    }
    if let Some(bad) = labels.iter().find(|l| **l >= logits.cols()) {
        return Err(Error::Invalid(format!("label {bad} out of range")));
    }
    Ok(())
}

/// Weighted mean negative log-likelihood and its gradient w.r.t. the logits.
/// Rows with weight zero contribute nothing.
pub(crate) fn weighted_cross_entropy(
    logits: &NdArray,
    labels: &[usize],
    weights: &[f64],
) -> Result<(f64, NdArray)> {
    check_labels(logits, labels, "cross_entropy")?;
    let total: f64 = weights.iter().sum();
    if labels.is_empty() || total <= 0.0 {
        return Err(Error::Empty("cross-entropy batch"));
    }
    let probs = softmax_rows(logits);
    let cols = logits.cols();
    let mut loss = 0.0;
    let mut grad = probs;
    for (i, (&y, &w)) in labels.iter().zip(weights).enumerate() {
        let row = &mut grad.data_mut()[i * cols..(i + 1) * cols];
        if w == 0.0 {
            row.iter_mut().for_each(|g| *g = 0.0);
            continue;
        }
        loss += w * row_nll(logits.row(i), y);
        row[y] -= 1.0;
        row.iter_mut().for_each(|g| *g *= w / total);
    }
    Ok((loss / total, grad))
}

/// Mean cross-entropy over the batch; gradient is `(softmax - onehot) / batch`.
pub fn cross_entropy_loss(logits: &NdArray, labels: &[usize]) -> Result<(f64, NdArray)> {
    weighted_cross_entropy(logits, labels, &vec![1.0; labels.len()])
}

/// Mean over rows of the squared L2 distance `‖a_i - b_i‖²`; gradient
/// `2(a - b)/batch` w.r.t. `a`.
pub fn mse_loss(a: &NdArray, b: &NdArray) -> Result<(f64, NdArray)> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "mse_loss",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let batch = if a.shape().len() >= 2 { a.rows() } else { 1 } as f64;
    let loss = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / batch;
    let grad = a.zip(b, |x, y| 2.0 * (x - y) / batch);
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        assert_eq!(softmax(&[1000.0, 1000.0]), vec![0.5, 0.5]);
        let p = softmax(&[1f64.ln(), 3f64.ln()]);
        assert!(close(p[0], 0.25, 1e-15) && close(p[1], 0.75, 1e-15));
    }

    #[test]
    fn cross_entropy_cases() {
        let l = NdArray::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let (v, g) = cross_entropy_loss(&l, &[0]).unwrap();
        assert!(close(v, 2f64.ln(), 1e-15));
        assert_eq!(g.data(), &[-0.5, 0.5]);

        let l = NdArray::from_rows(&[vec![3f64.ln(), 0.0]]).unwrap();
        let (v, _) = cross_entropy_loss(&l, &[0]).unwrap();
        assert!(close(v, -(0.75f64).ln(), 1e-12));
        assert!(close(v, 0.287682, 1e-6));

        let l = NdArray::from_rows(&[vec![60.0, -60.0]]).unwrap();
        let (v, _) = cross_entropy_loss(&l, &[0]).unwrap();
        assert!(v < 1e-40);
    }

    #[test]
    fn cross_entropy_gradient_is_averaged() {
        let l = NdArray::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let (_, g) = cross_entropy_loss(&l, &[0, 1]).unwrap();
        assert_eq!(g.data(), &[-0.25, 0.25, 0.25, -0.25]);
    }

    #[test]
    fn cross_entropy_errors() {
        let l = NdArray::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(cross_entropy_loss(&l, &[2]).is_err());
        assert!(cross_entropy_loss(&l, &[0, 1]).is_err());
        assert!(matches!(
            weighted_cross_entropy(&l, &[0], &[0.0]),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn mse_cases() {
        let a = NdArray::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = NdArray::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(mse_loss(&a, &a).unwrap().0, 0.0);
        let (v, g) = mse_loss(&a, &b).unwrap();
        assert_eq!(v, 2.0);
        assert_eq!(g.data(), &[2.0, -2.0]);
        let k = 3.0;
        let (vk, _) = mse_loss(&a.map(|x| k * x), &b.map(|x| k * x)).unwrap();
        assert!(close(vk, k * k * v, 1e-12));
        assert!(mse_loss(&a, &NdArray::zeros(&[1, 3])).is_err());
    }
}
