use crate::error::{shape_err, Error, Result};

use super::matrix::DenseVector;
use super::rng::Rng;

/// A reparameterized draw `mu + sqrt(var) * eps`, keeping `eps` so callers
/// can backpropagate into `mu` and `var`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSample {
    pub value: DenseVector,
    pub eps: DenseVector,
}

pub fn gaussian_sample(mu: &[f64], var: &[f64], rng: &mut Rng) -> Result<GaussianSample> {
    if mu.len() != var.len() {
        return Err(shape_err!("mean of {} vs variance of {}", mu.len(), var.len()));
    }
    if let Some(v) = var.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Domain(format!("variance must be non-negative, got {v}")));
    }
    let eps: DenseVector = (0..mu.len()).map(|_| rng.normal()).collect();
    let value = mu
        .iter()
        .zip(var)
        .zip(&eps)
        .map(|((m, v), e)| if *v == 0.0 { *m } else { m + v.sqrt() * e })
        .collect();
    Ok(GaussianSample { value, eps })
}

/// `KL(N(mu_q, var_q) || N(mu_p, var_p))` for diagonal Gaussians, summed
/// over dimensions.
pub fn kl_gaussian_diag(mu_q: &[f64], var_q: &[f64], mu_p: &[f64], var_p: &[f64]) -> Result<f64> {
    let d = mu_q.len();
    if var_q.len() != d || mu_p.len() != d || var_p.len() != d {
        return Err(shape_err!("kl_gaussian_diag: inconsistent lengths"));
    }
    if let Some(v) = var_q.iter().chain(var_p).find(|v| !(**v > 0.0)) {
        return Err(Error::Domain(format!("variance must be positive, got {v}")));
    }
    let mut kl = 0.0;
    for i in 0..d {
        let diff = mu_q[i] - mu_p[i];
        kl += (var_p[i] / var_q[i]).ln() + (var_q[i] + diff * diff) / var_p[i] - 1.0;
    }
    Ok(0.5 * kl)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_variance_returns_mean() {
        let mut rng = Rng::new(0);
        let s = gaussian_sample(&[1.5, -2.0], &[0.0, 0.0], &mut rng).unwrap();
        assert_eq!(s.value, vec![1.5, -2.0]);
    }

    #[test]
    fn negative_variance_is_domain_error() {
        let mut rng = Rng::new(0);
        assert!(matches!(gaussian_sample(&[0.0], &[-1.0], &mut rng), Err(Error::Domain(_))));
    }

    #[test]
    fn sample_mean_within_three_standard_errors() {
        let mut rng = Rng::new(17);
        let (mu, var) = ([0.7, -1.1], [0.5, 2.0]);
        let n = 100_000;
        let mut sums = [0.0; 2];
        for _ in 0..n {
            let s = gaussian_sample(&mu, &var, &mut rng).unwrap();
            sums[0] += s.value[0];
            sums[1] += s.value[1];
        }
        for k in 0..2 {
            let se = (var[k] / n as f64).sqrt();
            assert!((sums[k] / n as f64 - mu[k]).abs() < 3.0 * se);
        }
    }

    #[test]
    fn fixed_seed_reproducible() {
        let a = gaussian_sample(&[0.0; 3], &[1.0; 3], &mut Rng::new(5)).unwrap();
        let b = gaussian_sample(&[0.0; 3], &[1.0; 3], &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_gaussian_diag(&[0.3], &[2.0], &[0.3], &[2.0]).unwrap(), 0.0);
        assert!((kl_gaussian_diag(&[1.0], &[1.0], &[0.0], &[1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(kl_gaussian_diag(&[0.0], &[0.0], &[0.0], &[1.0]).is_err());
    }
}
