//! Gaussian mixtures parameterized by Cholesky factors of the precision
//! matrices, `Σ_g^{-1} = U_gᵀ U_g`, and the MDN output head that produces
//! them from raw network outputs.

use std::f64::consts::PI;

use rand::Rng as _;

use crate::beamforming::PbmVector;
use crate::error::{check_len, Error, Result};
use crate::rng::{rng_from_seed, standard_normal_vec, Rng};

/// Raw diagonal pre-activations are clamped to `±DIAG_CLAMP` before `exp`.
pub const DIAG_CLAMP: f64 = 7.0;

fn half_log_two_pi() -> f64 {
    0.5 * (2.0 * PI).ln()
}

/// Upper-triangular matrix stored row by row (`(0,0), (0,1), …, (1,1), …`).
#[derive(Clone, Debug, PartialEq)]
pub struct UpperTriangular {
    dim: usize,
    packed: Vec<f64>,
}

impl UpperTriangular {
    pub fn packed_len(dim: usize) -> usize {
        dim * (dim + 1) / 2
    }

    /// Offset of entry `(i, i)` in the packed storage.
    fn row_start(dim: usize, i: usize) -> usize {
        i * dim - i * i.saturating_sub(1) / 2
    }

    pub fn from_packed(dim: usize, packed: Vec<f64>) -> Result<Self> {
        check_len("packed triangular factor", Self::packed_len(dim), packed.len())?;
        let u = UpperTriangular { dim, packed };
        for i in 0..dim {
            let d = u.diag(i);
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Config(format!("factor diagonal {i} is {d}, must be > 0")));
            }
        }
        Ok(u)
    }

    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        let mut packed = Vec::with_capacity(Self::packed_len(dim));
        for (i, row) in rows.iter().enumerate() {
            check_len("dense factor row", dim, row.len())?;
            if row[..i].iter().any(|v| *v != 0.0) {
                return Err(Error::Config(format!("row {i} has entries below the diagonal")));
            }
            packed.extend_from_slice(&row[i..]);
        }
        Self::from_packed(dim, packed)
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_diagonal(&vec![1.0; dim])
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let dim = diag.len();
        let mut packed = vec![0.0; Self::packed_len(dim)];
        for (i, v) in diag.iter().enumerate() {
            packed[Self::row_start(dim, i)] = *v;
        }
        UpperTriangular { dim, packed }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn packed(&self) -> &[f64] {
        &self.packed
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i > j {
            0.0
        } else {
            self.packed[Self::row_start(self.dim, i) + (j - i)]
        }
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.packed[Self::row_start(self.dim, i)]
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.get(i, j)).collect())
            .collect()
    }

    /// `U e`.
    pub fn mul_vec(&self, e: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        let mut k = 0;
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.packed[k..k + self.dim - i];
            *o = row.iter().zip(&e[i..]).map(|(a, b)| a * b).sum();
            k += self.dim - i;
        }
        out
    }

    /// `Uᵀ v`.
    pub fn transpose_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        let mut k = 0;
        for (i, &vi) in v.iter().enumerate() {
            let row = &self.packed[k..k + self.dim - i];
            for (o, a) in out[i..].iter_mut().zip(row) {
                *o += a * vi;
            }
            k += self.dim - i;
        }
        out
    }

    /// Solves `U y = b` by back substitution.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim];
        for i in (0..self.dim).rev() {
            let start = Self::row_start(self.dim, i);
            let row = &self.packed[start..start + self.dim - i];
            let tail: f64 = row[1..].iter().zip(&y[i + 1..]).map(|(a, v)| a * v).sum();
            y[i] = (b[i] - tail) / row[0];
        }
        y
    }

    /// `Σ_j ln u_jj`, i.e. half the log-determinant of the precision.
    pub fn log_diag_sum(&self) -> f64 {
        (0..self.dim).map(|i| self.diag(i).ln()).sum()
    }
}

/// `ln N(x; μ, (UᵀU)^{-1}) = −(d/2) ln 2π − ½‖U(x−μ)‖² + Σ_j ln u_jj`.
pub fn component_log_density(mean: &[f64], factor: &UpperTriangular, x: &[f64]) -> f64 {
    let e: Vec<f64> = x.iter().zip(mean).map(|(a, m)| a - m).collect();
    let v = factor.mul_vec(&e);
    let quad: f64 = v.iter().map(|t| t * t).sum();
    -(x.len() as f64) * half_log_two_pi() - 0.5 * quad + factor.log_diag_sum()
}

/// `ln Σ exp(a_i)` with the maximum factored out.
pub fn log_sum_exp(a: &[f64]) -> f64 {
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + a.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// A finite Gaussian mixture with Cholesky-factored precisions.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureDensity {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    factors: Vec<UpperTriangular>,
}

impl MixtureDensity {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, factors: Vec<UpperTriangular>) -> Result<Self> {
        let g = weights.len();
        if g == 0 {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        check_len("mixture means", g, means.len())?;
        check_len("mixture factors", g, factors.len())?;
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture weights {weights:?} are not on the simplex")));
        }
        let d = means[0].len();
        for (m, f) in means.iter().zip(&factors) {
            check_len("component mean", d, m.len())?;
            check_len("component factor", d, f.dim())?;
            if m.iter().any(|v| !v.is_finite()) || f.packed().iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("mixture has non-finite parameters".into()));
            }
        }
        Ok(MixtureDensity {
            weights,
            means,
            factors,
        })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, g: usize) -> &[f64] {
        &self.means[g]
    }

    pub fn factor(&self, g: usize) -> &UpperTriangular {
        &self.factors[g]
    }

    pub fn component_log_density(&self, g: usize, x: &[f64]) -> f64 {
        component_log_density(&self.means[g], &self.factors[g], x)
    }

    /// `ln Σ_g π_g p_g(x)`, stabilized by log-sum-exp.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.components())
            .map(|g| self.weights[g].ln() + self.component_log_density(g, x))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn pick_component(&self, rng: &mut Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (g, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc && *w > 0.0 {
                return g;
            }
        }
        // Rounding left u above the cumulative sum: last component with mass.
        self.weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }

    /// `μ_g + U_g^{-1} ε` with `g ∼ π`, `ε ∼ N(0, I)`; unclamped.
    pub fn sample_point(&self, rng: &mut Rng) -> Vec<f64> {
        let g = self.pick_component(rng);
        let eps = standard_normal_vec(rng, self.dim());
        self.sample_component(g, &eps)
    }

    /// `μ_g + U_g^{-1} ε` for a given component and noise vector.
    pub fn sample_component(&self, g: usize, eps: &[f64]) -> Vec<f64> {
        let y = self.factors[g].solve(eps);
        self.means[g].iter().zip(y).map(|(m, v)| m + v).collect()
    }
}

/// `ln Σ_g π_g p_g(x)` for a decoded mixture.
pub fn mixture_log_density(mix: &MixtureDensity, x: &[f64]) -> f64 {
    mix.log_density(x)
}

/// One draw from the mixture in PBM units, clamped at zero.
pub fn sample_pbm(mix: &MixtureDensity, users: usize, seed: u64) -> Result<PbmVector> {
    let mut rng = rng_from_seed(seed);
    let point = mix.sample_point(&mut rng);
    PbmVector::new(point.into_iter().map(|v| v.max(0.0)).collect(), users)
}

/// Full-covariance (triangular factor) or diagonal-covariance components.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CovarianceKind {
    Full,
    Diagonal,
}

impl CovarianceKind {
    pub fn factor_len(self, dim: usize) -> usize {
        match self {
            CovarianceKind::Full => UpperTriangular::packed_len(dim),
            CovarianceKind::Diagonal => dim,
        }
    }
}

/// Loss terms of one sample and their gradient wrt the raw head outputs.
#[derive(Clone, Debug)]
pub struct HeadLoss {
    /// `−ln Σ_g π_g p_g(x)`.
    pub nll: f64,
    /// `−(1/G) Σ_g ln p_g(x)`, zero when the term is disabled.
    pub anti_degeneracy: f64,
    pub grad: Vec<f64>,
}

/// Maps raw network outputs to mixture parameters.
///
/// Raw layout: `[logits (G) | means (G·d) | factor raws (G·F)]` where `F` is
/// `d(d+1)/2` packed upper-triangular entries (full) or `d` diagonal
/// entries. Diagonal raws pass through `exp(clamp(·, ±7))`, the rest is used
/// directly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MixtureHead {
    pub components: usize,
    pub dim: usize,
    pub kind: CovarianceKind,
}

impl MixtureHead {
    pub fn factor_len(&self) -> usize {
        self.kind.factor_len(self.dim)
    }

    pub fn raw_width(&self) -> usize {
        self.components * (1 + self.dim + self.factor_len())
    }

    fn mean_offset(&self, g: usize) -> usize {
        self.components + g * self.dim
    }

    fn factor_offset(&self, g: usize) -> usize {
        self.components * (1 + self.dim) + g * self.factor_len()
    }

    /// Positions of the diagonal entries inside one component's factor raws.
    fn diag_positions(&self) -> Vec<usize> {
        match self.kind {
            CovarianceKind::Full => (0..self.dim)
                .map(|i| UpperTriangular::row_start(self.dim, i))
                .collect(),
            CovarianceKind::Diagonal => (0..self.dim).collect(),
        }
    }

    fn factor_from_raw(&self, raw: &[f64]) -> UpperTriangular {
        let diag: Vec<f64> = self
            .diag_positions()
            .iter()
            .map(|&p| raw[p].clamp(-DIAG_CLAMP, DIAG_CLAMP).exp())
            .collect();
        match self.kind {
            CovarianceKind::Full => {
                let mut packed = raw.to_vec();
                for (i, &p) in self.diag_positions().iter().enumerate() {
                    packed[p] = diag[i];
                }
                UpperTriangular {
                    dim: self.dim,
                    packed,
                }
            }
            CovarianceKind::Diagonal => UpperTriangular::from_diagonal(&diag),
        }
    }

    fn log_weights(&self, raw: &[f64]) -> Vec<f64> {
        let logits = &raw[..self.components];
        let lse = log_sum_exp(logits);
        logits.iter().map(|a| a - lse).collect()
    }

    pub fn decode(&self, raw: &[f64]) -> Result<MixtureDensity> {
        check_len("mixture head raw output", self.raw_width(), raw.len())?;
        let weights: Vec<f64> = self.log_weights(raw).into_iter().map(f64::exp).collect();
        let means = (0..self.components)
            .map(|g| raw[self.mean_offset(g)..self.mean_offset(g) + self.dim].to_vec())
            .collect();
        let factors = (0..self.components)
            .map(|g| {
                let off = self.factor_offset(g);
                self.factor_from_raw(&raw[off..off + self.factor_len()])
            })
            .collect();
        MixtureDensity::new(weights, means, factors)
    }

    /// Negative log-likelihood (plus the optional anti-degeneracy term) of
    /// `x` and its exact gradient wrt `raw`.
    pub fn loss(&self, raw: &[f64], x: &[f64], anti_degeneracy: bool) -> Result<HeadLoss> {
        check_len("mixture head raw output", self.raw_width(), raw.len())?;
        check_len("mixture head target", self.dim, x.len())?;
        let g_count = self.components;
        let d = self.dim;
        let log_pi = self.log_weights(raw);
        let diag_pos = self.diag_positions();

        let mut log_p = vec![0.0; g_count];
        let mut residuals = Vec::with_capacity(g_count);
        let mut projected = Vec::with_capacity(g_count);
        let mut factors = Vec::with_capacity(g_count);
        for g in 0..g_count {
            let off = self.factor_offset(g);
            let factor = self.factor_from_raw(&raw[off..off + self.factor_len()]);
            let mean = &raw[self.mean_offset(g)..self.mean_offset(g) + d];
            let e: Vec<f64> = x.iter().zip(mean).map(|(a, m)| a - m).collect();
            let v = factor.mul_vec(&e);
            let quad: f64 = v.iter().map(|t| t * t).sum();
            let log_det: f64 = diag_pos
                .iter()
                .map(|&p| raw[off + p].clamp(-DIAG_CLAMP, DIAG_CLAMP))
                .sum();
            log_p[g] = -(d as f64) * half_log_two_pi() - 0.5 * quad + log_det;
            residuals.push(e);
            projected.push(v);
            factors.push(factor);
        }

        let joint: Vec<f64> = log_pi.iter().zip(&log_p).map(|(a, b)| a + b).collect();
        let lse = log_sum_exp(&joint);
        let nll = -lse;
        let anti = if anti_degeneracy {
            -log_p.iter().sum::<f64>() / g_count as f64
        } else {
            0.0
        };
        if !(nll.is_finite() && anti.is_finite()) {
            let component = log_p.iter().position(|v| !v.is_finite()).unwrap_or(0);
            let diags: Vec<f64> = (0..d).map(|i| factors[component].diag(i)).collect();
            return Err(Error::NumericalInstability {
                component,
                diag_min: diags.iter().copied().fold(f64::INFINITY, f64::min),
                diag_max: diags.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                detail: format!("nll {nll}, anti-degeneracy {anti}"),
            });
        }

        let posterior: Vec<f64> = joint.iter().map(|j| (j - lse).exp()).collect();
        let mut grad = vec![0.0; raw.len()];
        for g in 0..g_count {
            let pi = log_pi[g].exp();
            grad[g] = pi - posterior[g];
            // dLoss/d ln p_g
            let w = -(posterior[g] + if anti_degeneracy { 1.0 / g_count as f64 } else { 0.0 });
            let e = &residuals[g];
            let v = &projected[g];
            // d ln p_g / dμ_g = Uᵀ v
            let ut_v = factors[g].transpose_mul_vec(v);
            let moff = self.mean_offset(g);
            for j in 0..d {
                grad[moff + j] = w * ut_v[j];
            }
            let foff = self.factor_offset(g);
            match self.kind {
                CovarianceKind::Full => {
                    let mut k = 0;
                    for i in 0..d {
                        for j in i..d {
                            // d ln p_g / dU_ij = −v_i e_j (+ 1/u_ii on the diagonal)
                            let dval = -v[i] * e[j];
                            grad[foff + k] = if i == j {
                                let r = raw[foff + k];
                                if r.abs() < DIAG_CLAMP {
                                    w * (dval * factors[g].diag(i) + 1.0)
                                } else {
                                    0.0
                                }
                            } else {
                                w * dval
                            };
                            k += 1;
                        }
                    }
                }
                CovarianceKind::Diagonal => {
                    for i in 0..d {
                        let r = raw[foff + i];
                        grad[foff + i] = if r.abs() < DIAG_CLAMP {
                            w * (-v[i] * e[i] * factors[g].diag(i) + 1.0)
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
        Ok(HeadLoss {
            nll,
            anti_degeneracy: anti,
            grad,
        })
    }
}
