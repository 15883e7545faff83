use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Soft Dice loss `1 − (2Σpᵢgᵢ + ε) / (Σpᵢ + Σgᵢ + ε)` and its gradient with
/// respect to each prediction.
pub fn soft_dice_loss<T: Scalar>(pred: &[T], gt: &[T], eps: T) -> Result<(T, Vec<T>)> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch {
            index: 1,
            expected: pred.len(),
            found: gt.len(),
        });
    }
    if !(eps > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "dice smoothing must be positive, got {eps}"
        )));
    }
    let two = T::lit(2.0);
    let mut inter = T::zero();
    let mut sum_p = T::zero();
    let mut sum_g = T::zero();
    for (&p, &g) in pred.iter().zip(gt) {
        inter = inter + p * g;
        sum_p = sum_p + p;
        sum_g = sum_g + g;
    }
    let num = two * inter + eps;
    let den = sum_p + sum_g + eps;
    let loss = T::one() - num / den;
    let den2 = den * den;
    let grad = gt.iter().map(|&g| -(two * g * den - num) / den2).collect();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_overlap_is_zero() {
        let (l, _) = soft_dice_loss(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0], 1.0_f64).unwrap();
        assert!(l.abs() < 1e-15);
    }

    #[test]
    fn empty_pair_is_zero() {
        let (l, _) = soft_dice_loss(&[0.0; 4], &[0.0; 4], 1.0_f64).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn disjoint_pair() {
        let (l, _) = soft_dice_loss(&[1.0, 0.0], &[0.0, 1.0], 1.0_f64).unwrap();
        assert!((l - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(soft_dice_loss(&[1.0], &[1.0, 0.0], 1.0).is_err());
        assert!(soft_dice_loss(&[1.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let pred = [0.2, 0.7, 0.45, 0.9, 0.05];
        let gt = [0.0, 1.0, 1.0, 0.0, 1.0];
        let (_, grad) = soft_dice_loss(&pred, &gt, 1.0_f64).unwrap();
        let h = 1e-6;
        for i in 0..pred.len() {
            let mut up = pred;
            let mut dn = pred;
            up[i] += h;
            dn[i] -= h;
            let fd = (soft_dice_loss(&up, &gt, 1.0_f64).unwrap().0 - soft_dice_loss(&dn, &gt, 1.0_f64).unwrap().0)
                / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() <= 1e-5 * fd.abs().max(1e-3),
                "{i}: {fd} vs {}",
                grad[i]
            );
        }
    }

    #[test]
    fn bounded_in_unit_interval() {
        let pred = [0.3, 0.9, 0.0, 1.0];
        for gt in [[0.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0], [1.0, 0.0, 1.0, 0.0]] {
            let (l, _) = soft_dice_loss(&pred, &gt, 1.0_f64).unwrap();
            assert!((0.0..=1.0).contains(&l));
        }
    }
}
