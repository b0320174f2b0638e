//! Per-image training objective.

use crate::error::{ensure, Result};
use crate::scalar::{dot, norm, Scalar};

/// `alpha · MSE(pred, target) − (1 − alpha) · cos(pred, target)`.
///
/// The cosine term is taken as 0 whenever either vector is all zeros.
pub fn combined_loss<T: Scalar>(pred: &[T], target: &[T], alpha: T) -> Result<T> {
    ensure!(!pred.is_empty(), Contract, "loss over zero voxels");
    ensure!(
        pred.len() == target.len(),
        Dimension,
        "loss: {} predictions vs {} targets",
        pred.len(),
        target.len()
    );
    let n = T::lit(pred.len() as f64);
    let mse = pred
        .iter()
        .zip(target)
        .fold(T::zero(), |acc, (&p, &t)| acc + (p - t) * (p - t))
        / n;
    let (np, nt) = (norm(pred), norm(target));
    let cos = if np > T::zero() && nt > T::zero() {
        dot(pred, target) / (np * nt)
    } else {
        T::zero()
    };
    Ok(alpha * mse - (T::one() - alpha) * cos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_prediction() {
        let t = [0.5, -1.0, 2.0];
        assert_abs_diff_eq!(combined_loss(&t, &t, 0.1).unwrap(), -0.9, epsilon = 1e-15);
    }

    #[test]
    fn opposite_prediction() {
        let l = combined_loss(&[1.0, -1.0], &[-1.0, 1.0], 0.1).unwrap();
        assert_abs_diff_eq!(l, 1.3, epsilon = 1e-15);
    }

    #[test]
    fn zero_vectors_drop_cosine() {
        assert_eq!(combined_loss(&[0.0, 0.0], &[0.0, 0.0], 0.1).unwrap(), 0.0);
        let l = combined_loss(&[0.0, 0.0], &[1.0, 1.0], 0.5).unwrap();
        assert_abs_diff_eq!(l, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn matches_one_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let t: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a = rng.gen_range(0.0..1.0);
            let oracle = a * p.iter().zip(&t).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 5.0
                - (1.0 - a) * p.iter().zip(&t).map(|(x, y)| x * y).sum::<f64>()
                    / (p.iter().map(|x| x * x).sum::<f64>().sqrt()
                        * t.iter().map(|x| x * x).sum::<f64>().sqrt());
            assert_abs_diff_eq!(combined_loss(&p, &t, a).unwrap(), oracle, epsilon = 1e-12);
        }
    }

    #[test]
    fn lower_bound_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = rng.gen_range(1..8);
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let t: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a: f64 = rng.gen_range(0.0..=1.0);
            assert!(combined_loss(&p, &t, a).unwrap() >= -(1.0 - a) - 1e-12);
        }
    }
}
