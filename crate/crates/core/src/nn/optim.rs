use super::ParameterSet;
use crate::error::{check_len, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update with learning rate `lr` (overriding
/// `cfg.lr`, so a schedule can drive it).
pub fn adam_step(
    params: &mut ParameterSet,
    grad: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    check_len("Adam gradient", params.len(), grad.len())?;
    check_len("Adam state", params.len(), state.m.len())?;
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let values = params.values_mut();
    for i in 0..values.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        values[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// `base_lr · gamma^⌊epoch / step_size⌋`.
pub fn step_lr_schedule(base_lr: f64, step_size: usize, gamma: f64, epoch: usize) -> f64 {
    base_lr * gamma.powi((epoch / step_size.max(1)) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, DenseNetSpec};

    fn flat(values: Vec<f64>) -> (DenseNetSpec, ParameterSet) {
        let n = values.len();
        let spec = DenseNetSpec::new(vec![n - 1, 1], vec![Activation::Identity], vec![0.0]).unwrap();
        let p = ParameterSet::from_values(&spec, values).unwrap();
        (spec, p)
    }

    #[test]
    fn first_step_closed_form() {
        let (_, mut p) = flat(vec![1.0, -2.0, 0.5]);
        let g = [0.3, -4.0, 1e-9];
        let cfg = AdamConfig::default();
        let mut s = AdamState::new(3);
        adam_step(&mut p, &g, &mut s, &cfg, cfg.lr).unwrap();
        // After bias correction m̂ = g and v̂ = g², so Δ = −lr·g/(|g|+ε).
        for (i, start) in [1.0, -2.0, 0.5].iter().enumerate() {
            let expected = start - cfg.lr * g[i] / (g[i].abs() + cfg.eps);
            assert!((p.values()[i] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let (_, mut p) = flat(vec![1.0, 2.0]);
        let mut s = AdamState::new(2);
        let cfg = AdamConfig::default();
        for _ in 0..50 {
            adam_step(&mut p, &[0.0, 0.0], &mut s, &cfg, 0.1).unwrap();
        }
        assert_eq!(p.values(), &[1.0, 2.0]);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        let target = [3.0, -2.0, 1.5, 2.0];
        let (_, mut p) = flat(vec![0.0; 4]);
        let mut s = AdamState::new(4);
        let cfg = AdamConfig::default();
        let loss = |v: &[f64]| -> f64 { v.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum() };
        let mut history = Vec::new();
        for _ in 0..100 {
            let g: Vec<f64> = p.values().iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
            adam_step(&mut p, &g, &mut s, &cfg, 0.01).unwrap();
            history.push(loss(p.values()));
        }
        for w in history[5..].windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(step_lr_schedule(1e-3, 50, 0.5, 0), 1e-3);
        assert_eq!(step_lr_schedule(1.0, 10, 0.5, 20), 0.25);
        assert_eq!(step_lr_schedule(1.0, 10, 0.5, 19), 0.5);
        assert_eq!(step_lr_schedule(0.2, 10, 1.0, 1000), 0.2);
    }

    #[test]
    fn length_mismatch_is_error() {
        let (_, mut p) = flat(vec![0.0; 3]);
        let mut s = AdamState::new(3);
        assert!(adam_step(&mut p, &[0.0; 2], &mut s, &AdamConfig::default(), 0.1).is_err());
    }
}
