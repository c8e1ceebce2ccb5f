use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean over the batch of the per-sample sum of squared differences.
fn batch_sq_error<S: Scalar>(estimates: &[Tensor<S>], targets: &[Tensor<S>], what: &str) -> Result<f64> {
    if estimates.len() != targets.len() {
        return Err(Error::shape(format!(
            "{what}: {} estimates vs {} targets",
            estimates.len(),
            targets.len()
        )));
    }
    if estimates.is_empty() {
        return Err(Error::shape(format!("{what}: empty batch")));
    }
    let mut total = 0.0;
    for (e, t) in estimates.iter().zip(targets) {
        t.ensure_shape(e.shape(), what)?;
        total += sq_distance(e, t);
    }
    Ok(total / estimates.len() as f64)
}

pub(crate) fn sq_distance<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| {
            let d = x.f64() - y.f64();
            d * d
        })
        .sum()
}

/// `(1/N) Σ_n ‖container_n − cover_n‖²`.
pub fn hiding_loss<S: Scalar>(containers: &[Tensor<S>], covers: &[Tensor<S>]) -> Result<f64> {
    batch_sq_error(containers, covers, "hiding loss")
}

/// `(1/N) Σ_n ‖estimate_n − residual_n‖²`.
pub fn revealing_loss<S: Scalar>(estimates: &[Tensor<S>], residuals: &[Tensor<S>]) -> Result<f64> {
    batch_sq_error(estimates, residuals, "revealing loss")
}

/// `Σ_i (L_H[i] + λ[i] · L_R[i])`.
pub fn total_loss(hiding: &[f64], revealing: &[f64], lambda: &[f64]) -> Result<f64> {
    if hiding.len() != revealing.len() || hiding.len() != lambda.len() {
        return Err(Error::shape(format!(
            "per-stage lengths differ: {} hiding, {} revealing, {} weights",
            hiding.len(),
            revealing.len(),
            lambda.len()
        )));
    }
    Ok(hiding
        .iter()
        .zip(revealing)
        .zip(lambda)
        .map(|((h, r), l)| h + l * r)
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(v: f64, n: usize) -> Tensor<f64> {
        Tensor::filled(1, n, n, v)
    }

    #[test]
    fn hiding_loss_sums_then_averages() {
        assert_eq!(hiding_loss(&[grid(0.3, 2)], &[grid(0.3, 2)]).unwrap(), 0.0);
        let v = hiding_loss(&[grid(0.6, 2)], &[grid(0.5, 2)]).unwrap();
        assert!((v - 0.04).abs() < 1e-12, "{v}");
        let doubled = hiding_loss(&[grid(0.6, 2), grid(0.6, 2)], &[grid(0.5, 2), grid(0.5, 2)]).unwrap();
        assert_eq!(doubled, v);
    }

    #[test]
    fn revealing_loss_cases() {
        let s = Tensor::<f64>::from_vec(3, 1, 2, vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.4]).unwrap();
        assert_eq!(revealing_loss(std::slice::from_ref(&s), std::slice::from_ref(&s)).unwrap(), 0.0);
        let zero = Tensor::zeros_like(&s);
        let want = s.as_slice().iter().map(|v| v * v).sum::<f64>();
        assert!((revealing_loss(&[zero], &[s]).unwrap() - want).abs() < 1e-15);
        let a = Tensor::<f64>::filled(1, 1, 1, 0.5);
        assert_eq!(revealing_loss(&[a], &[Tensor::zeros(1, 1, 1)]).unwrap(), 0.25);
    }

    #[test]
    fn total_loss_cases() {
        assert!((total_loss(&[0.1], &[0.5], &[0.8]).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(total_loss(&[0.0, 0.0], &[0.0, 0.0], &[0.8, 0.8]).unwrap(), 0.0);
        let v = total_loss(&[0.1, 0.2], &[0.3, 0.4], &[0.8, 0.8]).unwrap();
        assert!((v - 0.86).abs() < 1e-12);
        assert!(total_loss(&[0.1], &[0.1, 0.2], &[0.8]).is_err());
    }

    #[test]
    fn mismatched_batches_rejected() {
        assert!(hiding_loss(&[grid(0.0, 2)], &[]).is_err());
        assert!(hiding_loss::<f64>(&[], &[]).is_err());
        assert!(hiding_loss(&[grid(0.0, 2)], &[grid(0.0, 3)]).is_err());
    }
}
