//! Binary cross-entropy on logits.

use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};
use crate::gating::sigmoid;

/// Mean BCE of `sigmoid(logits)` against `labels`, evaluated as
/// `max(z,0) - z·y + ln(1 + e^{-|z|})`, with its gradient `(σ(z) - y)/B`.
pub fn bce_loss(logits: ArrayView1<'_, f64>, labels: &[u8]) -> Result<(f64, Array1<f64>)> {
    if logits.len() != labels.len() {
        return Err(Error::shape("bce labels", &[logits.len()], &[labels.len()]));
    }
    if logits.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array1::zeros(logits.len());
    for (i, (&z, &y)) in logits.iter().zip(labels).enumerate() {
        if !z.is_finite() {
            return Err(Error::NonFinite(format!("logit {z} at row {i}")));
        }
        if y > 1 {
            return Err(Error::InvalidLabel {
                row: i,
                value: y.to_string(),
            });
        }
        let y = f64::from(y);
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        grad[i] = (sigmoid(z) - y) / n;
    }
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn half_probability() {
        let (l, g) = bce_loss(array![0.0].view(), &[1]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((g[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn large_logits_stay_finite() {
        let (l, _) = bce_loss(array![50.0].view(), &[1]).unwrap();
        assert!(l.is_finite() && l < 1e-20);
        let (l, _) = bce_loss(array![800.0, -800.0].view(), &[0, 1]).unwrap();
        assert!((l - 800.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(bce_loss(array![f64::NAN].view(), &[0]).is_err());
        assert!(bce_loss(array![0.0].view(), &[2]).is_err());
        assert!(bce_loss(array![0.0, 1.0].view(), &[0]).is_err());
    }

    /// Naive sigmoid-then-log with compensated summation of the terms.
    #[test]
    fn matches_naive_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let n = rng.random_range(1..200);
            let z: Array1<f64> = (0..n).map(|_| rng.random_range(-15.0..15.0)).collect();
            let y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let mut sum = 0.0f64;
            let mut comp = 0.0f64;
            for (&zi, &yi) in z.iter().zip(&y) {
                let p = 1.0 / (1.0 + (-zi).exp());
                let term = if yi == 1 { -p.ln() } else { -(-p).ln_1p() };
                let t = sum + term;
                comp += if sum.abs() >= term.abs() { (sum - t) + term } else { (term - t) + sum };
                sum = t;
            }
            let naive = (sum + comp) / n as f64;
            let (l, _) = bce_loss(z.view(), &y).unwrap();
            assert!((l - naive).abs() < 1e-10);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let z = array![-2.0, 0.3, 4.0];
        let y = [1, 0, 1];
        let (_, g) = bce_loss(z.view(), &y).unwrap();
        for i in 0..3 {
            let mut zp = z.clone();
            zp[i] += 1e-6;
            let mut zm = z.clone();
            zm[i] -= 1e-6;
            let num = (bce_loss(zp.view(), &y).unwrap().0 - bce_loss(zm.view(), &y).unwrap().0) / 2e-6;
            assert!((num - g[i]).abs() < 1e-8);
        }
    }
}
