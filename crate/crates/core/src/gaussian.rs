//! Diagonal multivariate Gaussians: densities, log-likelihood ratios and
//! closed-form KL divergence.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::scalar::Scalar;

/// Smallest variance accepted by any density evaluation.
pub const MIN_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian<S> {
    mean: Vec<S>,
    variance: Vec<S>,
}

impl<S: Scalar> DiagonalGaussian<S> {
    pub fn new(mean: Vec<S>, variance: Vec<S>) -> Result<Self> {
        check_dim("gaussian variance", mean.len(), variance.len())?;
        if mean.is_empty() {
            return Err(Error::Domain("gaussian must have dimension >= 1".into()));
        }
        for (i, (&m, &v)) in mean.iter().zip(&variance).enumerate() {
            if !m.is_finite() || !v.is_finite() {
                return Err(Error::Domain(format!("non-finite parameter at index {i}")));
            }
            if v <= S::lit(MIN_VARIANCE) {
                return Err(Error::Domain(format!(
                    "variance[{i}] = {v} is not above {MIN_VARIANCE}"
                )));
            }
        }
        Ok(Self { mean, variance })
    }

    /// Isotropic helper, mostly for tests and benchmarks.
    pub fn isotropic(mean: Vec<S>, variance: S) -> Result<Self> {
        let var = vec![variance; mean.len()];
        Self::new(mean, var)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[S] {
        &self.mean
    }

    pub fn variance(&self) -> &[S] {
        &self.variance
    }

    /// `log N(y; mean, diag(variance))`.
    pub fn log_density(&self, y: &[S]) -> Result<S> {
        check_dim("gaussian observation", self.dim(), y.len())?;
        let two_pi = S::lit(2.0) * S::PI();
        let mut acc = S::zero();
        for i in 0..y.len() {
            let d = y[i] - self.mean[i];
            acc = acc + (two_pi * self.variance[i]).ln() + d * d / self.variance[i];
        }
        Ok(S::lit(-0.5) * acc)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<S> {
        self.mean
            .iter()
            .zip(&self.variance)
            .map(|(&m, &v)| {
                let z: f64 = rng.sample(StandardNormal);
                m + v.sqrt() * S::lit(z)
            })
            .collect()
    }
}

/// `log p1(y) - log p0(y)`.
pub fn llr<S: Scalar>(p1: &DiagonalGaussian<S>, p0: &DiagonalGaussian<S>, y: &[S]) -> Result<S> {
    check_dim("llr alternative", p0.dim(), p1.dim())?;
    Ok(p1.log_density(y)? - p0.log_density(y)?)
}

/// Closed-form `KL(p1 || p0)` for diagonal Gaussians.
pub fn kl_divergence<S: Scalar>(p1: &DiagonalGaussian<S>, p0: &DiagonalGaussian<S>) -> Result<S> {
    check_dim("kl operands", p0.dim(), p1.dim())?;
    let half = S::lit(0.5);
    let mut acc = S::zero();
    for i in 0..p1.dim() {
        let (v1, v0) = (p1.variance[i], p0.variance[i]);
        let d = p1.mean[i] - p0.mean[i];
        acc = acc + half * ((v0 / v1).ln() + (v1 + d * d) / v0 - S::one());
    }
    // Rounding can push an exact zero slightly negative.
    Ok(acc.max(S::zero()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g(mean: &[f64], var: &[f64]) -> DiagonalGaussian<f64> {
        DiagonalGaussian::new(mean.to_vec(), var.to_vec()).unwrap()
    }

    #[test]
    fn log_density_reference_values() {
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((g(&[0.0], &[1.0]).log_density(&[0.0]).unwrap() + half_ln_2pi).abs() < 1e-12);
        assert!(
            (g(&[0.0, 0.0], &[1.0, 1.0]).log_density(&[0.0, 0.0]).unwrap() + 2.0 * half_ln_2pi)
                .abs()
                < 1e-12
        );
        // -0.5 ln(2 pi) - 0.5
        assert!((g(&[0.0], &[1.0]).log_density(&[1.0]).unwrap() + 1.4189385332046727).abs() < 1e-12);
    }

    #[test]
    fn llr_reference_values() {
        let p0 = g(&[0.0], &[1.0]);
        let p1 = g(&[1.0], &[1.0]);
        assert_eq!(llr(&p0, &p0, &[0.3]).unwrap(), 0.0);
        assert!((llr(&p1, &p0, &[1.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!((llr(&p1, &p0, &[0.0]).unwrap() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_reference_values() {
        let p0 = g(&[0.0], &[1.0]);
        let p1 = g(&[1.0], &[1.0]);
        assert_eq!(kl_divergence(&p0, &p0).unwrap(), 0.0);
        assert!((kl_divergence(&p1, &p0).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_variance_and_dimension_mismatch() {
        assert!(matches!(
            DiagonalGaussian::new(vec![0.0f64], vec![0.0]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            DiagonalGaussian::new(vec![0.0f64], vec![1e-13]),
            Err(Error::Domain(_))
        ));
        let p = g(&[0.0, 1.0], &[1.0, 1.0]);
        assert!(matches!(
            p.log_density(&[0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(llr(&p, &g(&[0.0], &[1.0]), &[0.0, 0.0]).is_err());
    }

    #[test]
    fn kl_matches_monte_carlo_expectation() {
        let p1 = g(&[0.3, -1.0, 2.0], &[0.5, 1.5, 0.8]);
        let p0 = g(&[0.0, 0.2, 1.5], &[1.0, 0.7, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 1_000_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n {
            let y = p1.sample(&mut rng);
            let l = llr(&p1, &p0, &y).unwrap();
            sum += l;
            sum_sq += l * l;
        }
        let mean = sum / n as f64;
        let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
        let kl = kl_divergence(&p1, &p0).unwrap();
        assert!((mean - kl).abs() < 3.0 * se, "mc={mean} kl={kl} se={se}");
    }

    #[test]
    fn llr_expectation_signs_follow_kl() {
        let p0 = g(&[0.0, 0.0], &[1.0, 2.0]);
        let p1 = g(&[1.0, -0.5], &[1.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 200_000;
        let under_p0: f64 =
            (0..n).map(|_| llr(&p1, &p0, &p0.sample(&mut rng)).unwrap()).sum::<f64>() / n as f64;
        let under_p1: f64 =
            (0..n).map(|_| llr(&p1, &p0, &p1.sample(&mut rng)).unwrap()).sum::<f64>() / n as f64;
        let kl01 = kl_divergence(&p0, &p1).unwrap();
        let kl10 = kl_divergence(&p1, &p0).unwrap();
        assert!(under_p0 < 0.0 && (under_p0 + kl01).abs() < 0.02);
        assert!(under_p1 > 0.0 && (under_p1 - kl10).abs() < 0.02);
    }

    #[test]
    fn density_integrates_to_one() {
        let p = g(&[0.7], &[0.3]);
        let (lo, hi, n) = (-10.0, 10.0, 200_000);
        let dx = (hi - lo) / n as f64;
        let mass: f64 = (0..n)
            .map(|i| {
                let x = lo + (i as f64 + 0.5) * dx;
                p.log_density(&[x]).unwrap().exp() * dx
            })
            .sum();
        assert!((mass - 1.0).abs() < 1e-6);
    }
}
