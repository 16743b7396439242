//! Distribution and pipeline metrics: Gaussian-kernel MMD and empirical CDFs.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Augmented,
    Baseline,
}

/// `n` vectors of a common dimension with a provenance tag.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    points: Vec<Vec<f64>>,
    dim: usize,
    provenance: Provenance,
}

impl SampleSet {
    pub fn new(points: Vec<Vec<f64>>, provenance: Provenance) -> Result<Self> {
        let dim = points
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::Config("sample set is empty".into()))?;
        for p in &points {
            check_len("sample set point", dim, p.len())?;
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("sample set contains non-finite entries".into()));
            }
        }
        Ok(SampleSet {
            points,
            dim,
            provenance,
        })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }
}

fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `exp(−‖x − y‖² / (2h²))`.
pub fn gaussian_kernel(x: &[f64], y: &[f64], bandwidth: f64) -> f64 {
    (-squared_distance(x, y) / (2.0 * bandwidth * bandwidth)).exp()
}

/// Median pairwise Euclidean distance over `X ∪ Y`; 1 when it is zero.
pub fn median_bandwidth(x: &SampleSet, y: &SampleSet) -> Result<f64> {
    check_len("sample set dimension", x.dim(), y.dim())?;
    let pooled: Vec<&[f64]> = x.points().iter().chain(y.points()).map(Vec::as_slice).collect();
    if pooled.len() < 2 {
        return Err(Error::Config("bandwidth needs at least two points".into()));
    }
    let mut d = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(squared_distance(pooled[i], pooled[j]).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let median = if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    };
    Ok(if median > 0.0 { median } else { 1.0 })
}

fn mean_kernel(a: &[Vec<f64>], b: &[Vec<f64>], h: f64) -> f64 {
    let mut acc = 0.0;
    for p in a {
        for q in b {
            acc += gaussian_kernel(p, q, h);
        }
    }
    acc / (a.len() * b.len()) as f64
}

/// Biased squared MMD with a Gaussian kernel of bandwidth `h`.
pub fn mmd(x: &SampleSet, y: &SampleSet, bandwidth: f64) -> Result<f64> {
    check_len("sample set dimension", x.dim(), y.dim())?;
    if !(bandwidth > 0.0) {
        return Err(Error::Config(format!("bandwidth {bandwidth} must be positive")));
    }
    let xx = mean_kernel(x.points(), x.points(), bandwidth);
    let yy = mean_kernel(y.points(), y.points(), bandwidth);
    let xy = mean_kernel(x.points(), y.points(), bandwidth);
    Ok(xx + yy - 2.0 * xy)
}

/// MMD with the median-heuristic bandwidth.
pub fn mmd_median(x: &SampleSet, y: &SampleSet) -> Result<f64> {
    let h = median_bandwidth(x, y)?;
    mmd(x, y, h)
}

/// Right-continuous empirical CDF as sorted `(value, k/n)` pairs.
pub fn empirical_cdf(values: &[f64]) -> Result<Vec<(f64, f64)>> {
    if values.is_empty() {
        return Err(Error::Config("empirical CDF of an empty list".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(sorted
        .into_iter()
        .enumerate()
        .map(|(k, v)| (v, (k + 1) as f64 / n))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(points: Vec<Vec<f64>>) -> SampleSet {
        SampleSet::new(points, Provenance::Real).unwrap()
    }

    #[test]
    fn kernel_values() {
        assert_eq!(gaussian_kernel(&[1.0, 2.0], &[1.0, 2.0], 0.7), 1.0);
        let h = 1.5;
        let y = [h * 2f64.sqrt(), 0.0];
        assert!((gaussian_kernel(&[0.0, 0.0], &y, h) - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn bandwidth_cases() {
        let a = set(vec![vec![0.0, 0.0]]);
        let b = set(vec![vec![0.0, 4.0]]);
        assert_eq!(median_bandwidth(&a, &b).unwrap(), 4.0);
        let c = set(vec![vec![1.0]; 3]);
        assert_eq!(median_bandwidth(&c, &c).unwrap(), 1.0);
    }

    #[test]
    fn mmd_single_points() {
        let x = set(vec![vec![0.3, -0.2]]);
        let y = set(vec![vec![1.0, 0.5]]);
        let h = 0.8;
        let k = gaussian_kernel(&[0.3, -0.2], &[1.0, 0.5], h);
        assert_eq!(mmd(&x, &y, h).unwrap(), 2.0 - 2.0 * k);
        assert!(mmd(&x, &x, h).unwrap().abs() <= 1e-12);
        assert!(mmd(&x, &set(vec![vec![1.0]]), h).is_err());
    }

    #[test]
    fn cdf_cases() {
        assert_eq!(empirical_cdf(&[5.0]).unwrap(), vec![(5.0, 1.0)]);
        assert_eq!(empirical_cdf(&[2.0, 1.0]).unwrap(), vec![(1.0, 0.5), (2.0, 1.0)]);
        assert!(empirical_cdf(&[]).is_err());
    }

    #[test]
    fn rejects_ragged_or_non_finite_sets() {
        assert!(SampleSet::new(vec![vec![1.0], vec![1.0, 2.0]], Provenance::Real).is_err());
        assert!(SampleSet::new(vec![vec![f64::NAN]], Provenance::Real).is_err());
        assert!(SampleSet::new(vec![], Provenance::Augmented).is_err());
    }
}
