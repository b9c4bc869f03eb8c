use super::tensor::Scalar;
use crate::error::{Error, Result};

/// Max-subtracted softmax.
pub fn softmax<T: Scalar>(scores: &[T]) -> Vec<T> {
    let m = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = scores.iter().map(|&s| (s - m).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Weighted cross-entropy of `softmax(scores)` against `target`.
///
/// Returns `(-w_t ln p_t, w_t (p - onehot))`.
pub fn softmax_cross_entropy<T: Scalar>(scores: &[T], target: usize, class_weights: Option<&[T]>) -> Result<(T, Vec<T>)> {
    if target >= scores.len() {
        return Err(Error::invalid(format!("target {target} out of range for {} classes", scores.len())));
    }
    if let Some(w) = class_weights {
        if w.len() != scores.len() {
            return Err(Error::invalid(format!("{} class weights for {} classes", w.len(), scores.len())));
        }
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("softmax scores".into()));
    }
    let m = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let z: T = scores.iter().map(|&s| (s - m).exp()).sum();
    let log_z = z.ln();
    let w = class_weights.map_or(T::one(), |w| w[target]);
    let loss = w * (log_z - (scores[target] - m));
    let grad = scores
        .iter()
        .enumerate()
        .map(|(c, &s)| {
            let p = (s - m - log_z).exp();
            w * if c == target { p - T::one() } else { p }
        })
        .collect();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_scores() {
        let (l, g) = softmax_cross_entropy(&[0.3f64; 4], 2, None).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.386294).abs() < 1e-6);
        assert!((g[2] + 0.75).abs() < 1e-12 && (g[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn saturated_target() {
        let (l, _) = softmax_cross_entropy(&[0.0f64, 1000.0, 0.0], 1, None).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn unit_weights_are_identity() {
        let s = [0.2f64, -1.0, 3.0];
        assert_eq!(softmax_cross_entropy(&s, 0, None).unwrap(), softmax_cross_entropy(&s, 0, Some(&[1.0; 3])).unwrap());
        let (l2, _) = softmax_cross_entropy(&s, 0, Some(&[2.0, 1.0, 1.0])).unwrap();
        assert!((l2 - 2.0 * softmax_cross_entropy(&s, 0, None).unwrap().0).abs() < 1e-12);
        assert!(softmax_cross_entropy(&s, 3, None).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(s in prop::collection::vec(-1e4f64..1e4, 1..12)) {
            let p = softmax(&s);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let pf = softmax(&s.iter().map(|&v| v as f32).collect::<Vec<_>>());
            prop_assert!((pf.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}
