//! Classification loss.

use crate::error::{Error, Result};
use crate::nn::tensor::{Real, Tensor};

/// Mean cross-entropy of softmaxed logits against class indices.
///
/// The gradient is the analytic `(softmax - onehot) / B`.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<Tensor<T>> {
    let &[b, c] = logits.shape() else {
        return Err(Error::Shape(format!(
            "cross_entropy: logits must be [B,C], got {:?}",
            logits.shape()
        )));
    };
    if targets.len() != b {
        return Err(Error::Shape(format!(
            "cross_entropy: {b} logit rows but {} targets",
            targets.len()
        )));
    }
    for &t in targets {
        if t >= c {
            return Err(Error::Validation(format!(
                "cross_entropy: target {t} out of range for {c} classes"
            )));
        }
    }
    let lv = logits.data();
    let mut probs = vec![T::zero(); b * c];
    let mut loss = T::zero();
    for bi in 0..b {
        let row = &lv[bi * c..(bi + 1) * c];
        let mx = row.iter().copied().fold(row[0], |a, v| a.max(v));
        let mut denom = T::zero();
        for (p, &v) in probs[bi * c..(bi + 1) * c].iter_mut().zip(row) {
            let e = (v - mx).exp();
            *p = e;
            denom += e;
        }
        let log_denom = denom.ln();
        for p in &mut probs[bi * c..(bi + 1) * c] {
            *p = *p / denom;
        }
        // -log softmax(logits)[target], computed in log space
        loss += log_denom + mx - row[targets[bi]];
    }
    drop(lv);
    loss = loss * T::cast(1.0 / b as f64);

    let targets = targets.to_vec();
    Ok(Tensor::node(
        vec![1],
        vec![loss],
        vec![logits.clone()],
        Box::new(move |g| {
            let g0 = g[0];
            let inv_b = T::cast(1.0 / b as f64);
            let mut dl = probs.clone();
            for (bi, &t) in targets.iter().enumerate() {
                dl[bi * c + t] -= T::one();
            }
            for v in &mut dl {
                *v = *v * g0 * inv_b;
            }
            vec![dl]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        let logits = Tensor::from_vec(vec![1, 3], vec![0.0f64, 0.0, 0.0]);
        let loss = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!((loss.item() - 3.0f64.ln()).abs() < 1e-4);
    }

    #[test]
    fn saturated_correct_logit_has_near_zero_loss() {
        let logits = Tensor::from_vec(vec![1, 2], vec![100.0f64, 0.0]);
        let loss = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss.item() < 1e-6);
    }

    #[test]
    fn gradient_is_softmax_minus_onehot() {
        let logits = Tensor::from_vec(vec![1, 2], vec![0.0f64, 0.0]).requires_grad();
        let loss = softmax_cross_entropy(&logits, &[0]).unwrap();
        loss.backward();
        let g = logits.grad().unwrap();
        assert!((g[0] + 0.5).abs() < 1e-9);
        assert!((g[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let logits =
            Tensor::from_vec(vec![2, 3], vec![0.3f64, -1.0, 0.4, 2.0, 0.0, -0.5]).requires_grad();
        let loss = softmax_cross_entropy(&logits, &[2, 0]).unwrap();
        loss.backward();
        let g = logits.grad().unwrap();
        for r in 0..2 {
            let s: f64 = g[r * 3..(r + 1) * 3].iter().sum();
            assert!(s.abs() < 1e-6);
        }
    }

    #[test]
    fn out_of_range_target_is_validation_error() {
        let logits = Tensor::from_vec(vec![1, 2], vec![0.0f64, 0.0]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[2]),
            Err(Error::Validation(_))
        ));
    }
}
