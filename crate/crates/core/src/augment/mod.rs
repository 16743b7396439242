//! Conditional variational autoencoder with a mixture-density decoder that
//! learns the distribution of PBM vectors given a probing configuration.

mod mixture;
mod model;
mod transform;

pub use mixture::{
    component_log_density, log_sum_exp, mixture_log_density, sample_pbm, CovarianceKind, HeadLoss, MixtureDensity,
    MixtureHead, UpperTriangular, DIAG_CLAMP,
};
pub use model::{AugmenterConfig, AugmenterModel, Generated, Loss1, TrainingReport, AUG_MAGIC, AUG_VERSION};
pub use transform::{PbmTransform, MAX_LOG};

use crate::error::{check_len, Error, Result};

/// Diagonal Gaussian posterior `N(μ, diag σ²)` produced by the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGaussian {
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl LatentGaussian {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        check_len("latent sigma", mu.len(), sigma.len())?;
        if sigma.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Config("latent sigma must be positive and finite".into()));
        }
        Ok(LatentGaussian { mu, sigma })
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// `z = μ + ε ⊙ σ`.
pub fn reparameterize(lat: &LatentGaussian, eps: &[f64]) -> Result<Vec<f64>> {
    check_len("reparameterization noise", lat.dim(), eps.len())?;
    Ok(lat
        .mu
        .iter()
        .zip(&lat.sigma)
        .zip(eps)
        .map(|((m, s), e)| m + e * s)
        .collect())
}

/// `KL(N(μ, diag σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² − 2 ln σ − 1)`.
pub fn kl_to_standard_normal(lat: &LatentGaussian) -> f64 {
    0.5 * lat
        .mu
        .iter()
        .zip(&lat.sigma)
        .map(|(m, s)| m * m + s * s - 2.0 * s.ln() - 1.0)
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_from_seed, standard_normal_vec};

    #[test]
    fn kl_closed_form_cases() {
        let lat = LatentGaussian::new(vec![0.0; 3], vec![1.0; 3]).unwrap();
        assert_eq!(kl_to_standard_normal(&lat), 0.0);
        let lat = LatentGaussian::new(vec![1.0], vec![1.0]).unwrap();
        assert!((kl_to_standard_normal(&lat) - 0.5).abs() < 1e-15);
        assert!(LatentGaussian::new(vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let lat = LatentGaussian::new(vec![0.7, -0.4], vec![0.6, 1.8]).unwrap();
        let mut rng = rng_from_seed(17);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let eps = standard_normal_vec(&mut rng, 2);
            let z = reparameterize(&lat, &eps).unwrap();
            let log_q: f64 = (0..2)
                .map(|j| -0.5 * eps[j] * eps[j] - lat.sigma()[j].ln())
                .sum();
            let log_p: f64 = z.iter().map(|v| -0.5 * v * v).sum();
            acc += log_q - log_p;
        }
        let mc = acc / n as f64;
        let exact = kl_to_standard_normal(&lat);
        assert!((mc - exact).abs() <= 0.01 * exact, "{mc} vs {exact}");
    }

    #[test]
    fn reparameterization_moments() {
        let lat = LatentGaussian::new(vec![1.5, -2.0], vec![0.5, 3.0]).unwrap();
        assert_eq!(reparameterize(&lat, &[0.0, 0.0]).unwrap(), lat.mu().to_vec());
        let unit = LatentGaussian::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(reparameterize(&unit, &[0.3, -1.0]).unwrap(), vec![0.3, -1.0]);

        let mut rng = rng_from_seed(2);
        let n = 100_000;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let z = reparameterize(&lat, &standard_normal_vec(&mut rng, 2)).unwrap();
            for j in 0..2 {
                sum[j] += z[j];
                sq[j] += z[j] * z[j];
            }
        }
        for j in 0..2 {
            let mean = sum[j] / n as f64;
            let std = (sq[j] / n as f64 - mean * mean).sqrt();
            assert!((mean - lat.mu()[j]).abs() <= 0.02 * lat.mu()[j].abs());
            assert!((std - lat.sigma()[j]).abs() <= 0.02 * lat.sigma()[j]);
        }
    }
}
