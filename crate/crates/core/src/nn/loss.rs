use super::{NnError, Scalar};

/// Batch-summed softmax cross-entropy `−Σ_i log softmax(z_i)[y_i]` and its
/// gradient with respect to the logits (`softmax(z_i) − onehot(y_i)` per row).
pub fn softmax_xent<T: Scalar>(logits: &[T], labels: &[usize], classes: usize) -> Result<(T, Vec<T>), NnError> {
    if logits.len() != labels.len() * classes {
        return Err(NnError::ShapeMismatch {
            expected: labels.len() * classes,
            got: logits.len(),
        });
    }
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &label) in logits.chunks_exact(classes).zip(labels) {
        if label >= classes {
            return Err(NnError::LabelOutOfRange { label, classes });
        }
        let probs = softmax(row);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let log_sum = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
        loss += log_sum - (row[label] - max);
        for (j, p) in probs.into_iter().enumerate() {
            grad.push(if j == label { p - T::one() } else { p });
        }
    }
    Ok((loss, grad))
}

/// Max-shifted softmax of one row.
pub fn softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row-wise argmax (first maximum on ties).
pub fn argmax_rows<T: Scalar>(values: &[T], width: usize) -> Vec<usize> {
    values
        .chunks_exact(width)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
