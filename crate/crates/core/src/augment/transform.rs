use std::io::{self, Read, Write};

use crate::binio::*;
use crate::error::{check_len, Error, Result};

/// Relative floor added before taking logs, scaled by the mean training PBM.
const RELATIVE_FLOOR: f64 = 1e-12;

/// Largest log-domain value mapped back by [`PbmTransform::inverse`].
pub const MAX_LOG: f64 = 700.0;

/// Log-domain standardization of PBM vectors: `x = (ln(r + floor) − mean) / std`
/// per coordinate, with statistics taken from a training set. The linear
/// variant skips the logarithm.
#[derive(Clone, Debug, PartialEq)]
pub struct PbmTransform {
    log: bool,
    floor: f64,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl PbmTransform {
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        Self::fit_with(samples, true)
    }

    /// Per-coordinate standardization without the logarithm.
    pub fn fit_linear<'a>(samples: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        Self::fit_with(samples, false)
    }

    fn fit_with<'a>(samples: impl IntoIterator<Item = &'a [f64]>, log: bool) -> Result<Self> {
        let samples: Vec<&[f64]> = samples.into_iter().collect();
        let first = samples
            .first()
            .ok_or_else(|| Error::Config("cannot fit a PBM transform on no samples".into()))?;
        let d = first.len();
        for s in &samples {
            check_len("PBM transform sample", d, s.len())?;
        }
        let n = samples.len() as f64;
        let mean_power = samples.iter().flat_map(|s| s.iter()).sum::<f64>() / (n * d as f64);
        let floor = if mean_power > 0.0 {
            RELATIVE_FLOOR * mean_power
        } else {
            RELATIVE_FLOOR
        };
        let base = PbmTransform {
            log,
            floor,
            mean: vec![0.0; d],
            std: vec![1.0; d],
        };
        let logs: Vec<Vec<f64>> = samples.iter().map(|s| base.forward(s)).collect();
        let mut mean = vec![0.0; d];
        for row in &logs {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for row in &logs {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let std = var
            .into_iter()
            .map(|v| if v.sqrt() > 1e-8 { v.sqrt() } else { 1.0 })
            .collect();
        Ok(PbmTransform { log, floor, mean, std })
    }

    pub fn identity(d: usize) -> Self {
        PbmTransform {
            log: true,
            floor: RELATIVE_FLOOR,
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn is_log(&self) -> bool {
        self.log
    }

    pub fn forward(&self, r: &[f64]) -> Vec<f64> {
        r.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| {
                let u = if self.log { (v.max(0.0) + self.floor).ln() } else { *v };
                (u - m) / s
            })
            .collect()
    }

    /// Maps back to PBM units; log-domain outputs are clamped to
    /// `[0, e^MAX_LOG]`.
    pub fn inverse(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| {
                let u = v * s + m;
                if self.log {
                    (u.min(MAX_LOG).exp() - self.floor).max(0.0)
                } else {
                    u
                }
            })
            .collect()
    }

    /// `ln |det ∂x/∂r|` at `r`, converting standardized-domain log-densities
    /// to PBM units.
    pub fn log_jacobian(&self, r: &[f64]) -> f64 {
        r.iter()
            .zip(&self.std)
            .map(|(v, s)| {
                let scale = if self.log { (v.max(0.0) + self.floor) * s } else { *s };
                -scale.ln()
            })
            .sum()
    }

    pub(crate) fn write(&self, w: &mut impl Write) -> io::Result<()> {
        put_u8(w, self.log as u8)?;
        put_f64(w, self.floor)?;
        put_f64s(w, &self.mean)?;
        put_f64s(w, &self.std)
    }

    pub(crate) fn read(r: &mut impl Read) -> Result<Self> {
        let log = get_u8(r)? == 1;
        let floor = get_f64(r)?;
        let mean = get_f64s(r, 1 << 24)?;
        let std = get_f64s(r, 1 << 24)?;
        if mean.len() != std.len() || !(floor > 0.0) || std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::format("<pbm transform>", "inconsistent statistics"));
        }
        Ok(PbmTransform { log, floor, mean, std })
    }
}
