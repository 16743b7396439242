//! Python bindings for the probeopt core.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use probeopt::augment::{MixtureDensity, UpperTriangular};
use probeopt::beamforming::{evaluate_probing_config, PipelineParams, ProbingConfig};
use probeopt::channel::{generate_channel, ScenarioConfig};
use probeopt::eval::{mmd, mmd_median, Provenance, SampleSet};
use probeopt::experiment::{Experiment, ExperimentConfig};
use probeopt::optimizer::{exhaustive_select, fitness, ga_optimize, CombinationPool, GaConfig};
use probeopt::rng::rng_from_seed;

fn py_err(e: probeopt::Error) -> PyErr {
    PyValueError::new_err(format!("{}: {e}", e.kind()))
}

/// Channel scenario preset or TOML description.
#[pyclass(name = "Scenario", frozen)]
struct PyScenario {
    inner: ScenarioConfig,
}

#[pymethods]
impl PyScenario {
    #[staticmethod]
    fn desk() -> Self {
        PyScenario {
            inner: ScenarioConfig::desk(),
        }
    }

    #[staticmethod]
    fn six_user() -> Self {
        PyScenario {
            inner: ScenarioConfig::six_user(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyScenario {
            inner: ScenarioConfig::from_toml_str(text).map_err(py_err)?,
        })
    }

    #[getter]
    fn users(&self) -> usize {
        self.inner.users()
    }

    #[getter]
    fn aps(&self) -> usize {
        self.inner.aps()
    }

    #[getter]
    fn antennas(&self) -> usize {
        self.inner.antennas()
    }

    #[getter]
    fn noise_power(&self) -> f64 {
        self.inner.noise_power
    }

    /// PBM vector and compressed-pipeline sum-rate for one channel drop
    /// under horizontal-sector combination `combo` (0-based).
    #[pyo3(signature = (combo, seed, probes_per_ap = 8))]
    fn sample(&self, combo: usize, seed: u64, probes_per_ap: usize) -> PyResult<(Vec<f64>, f64)> {
        let s = &self.inner;
        let probe = ProbingConfig::horizontal_sector(combo, s.aps(), s.geometry, probes_per_ap).map_err(py_err)?;
        let ch = generate_channel(s, seed).map_err(py_err)?;
        let (pbm, rate) = evaluate_probing_config(&ch, &probe, &PipelineParams::for_scenario(s)).map_err(py_err)?;
        Ok((pbm.into_values(), rate))
    }
}

/// Gaussian mixture with Cholesky precision factors `Σ⁻¹ = UᵀU`.
#[pyclass(name = "MixtureDensity", frozen)]
struct PyMixture {
    inner: MixtureDensity,
}

#[pymethods]
impl PyMixture {
    /// `factors` are dense upper-triangular matrices with positive diagonals.
    #[new]
    fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, factors: Vec<Vec<Vec<f64>>>) -> PyResult<Self> {
        let factors = factors
            .iter()
            .map(|f| UpperTriangular::from_dense(f))
            .collect::<probeopt::Result<Vec<_>>>()
            .map_err(py_err)?;
        Ok(PyMixture {
            inner: MixtureDensity::new(weights, means, factors).map_err(py_err)?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn log_density(&self, x: Vec<f64>) -> PyResult<f64> {
        if x.len() != self.inner.dim() {
            return Err(PyValueError::new_err("point dimension mismatch"));
        }
        Ok(self.inner.log_density(&x))
    }

    fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| self.inner.sample_point(&mut rng)).collect()
    }
}

/// Squared MMD with a Gaussian kernel; median heuristic when `bandwidth` is None.
#[pyfunction]
#[pyo3(name = "mmd", signature = (x, y, bandwidth = None))]
fn py_mmd(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, bandwidth: Option<f64>) -> PyResult<f64> {
    let x = SampleSet::new(x, Provenance::Real).map_err(py_err)?;
    let y = SampleSet::new(y, Provenance::Augmented).map_err(py_err)?;
    match bandwidth {
        Some(h) => mmd(&x, &y, h),
        None => mmd_median(&x, &y),
    }
    .map_err(py_err)
}

fn pool(sampled: Vec<Vec<f64>>, augmented: Option<Vec<Vec<f64>>>) -> PyResult<CombinationPool> {
    let augmented = augmented.unwrap_or_else(|| vec![Vec::new(); sampled.len()]);
    CombinationPool::new(sampled, augmented).map_err(py_err)
}

/// Per-combination fitness (mean of sampled and augmented rates).
#[pyfunction]
#[pyo3(signature = (sampled, augmented = None))]
fn fitness_values(sampled: Vec<Vec<f64>>, augmented: Option<Vec<Vec<f64>>>) -> PyResult<Vec<f64>> {
    let p = pool(sampled, augmented)?;
    (0..p.len()).map(|l| fitness(&p, l).map_err(py_err)).collect()
}

/// 0-based index of the best combination by exhaustive scan.
#[pyfunction]
#[pyo3(name = "exhaustive_select", signature = (sampled, augmented = None))]
fn py_exhaustive_select(sampled: Vec<Vec<f64>>, augmented: Option<Vec<Vec<f64>>>) -> PyResult<usize> {
    exhaustive_select(&pool(sampled, augmented)?).map_err(py_err)
}

/// 0-based index and fitness of the combination chosen by the GA.
#[pyfunction]
#[pyo3(name = "ga_optimize", signature = (sampled, augmented = None, seed = 0, population = 6, iterations = 3, generations = 5))]
fn py_ga_optimize(
    sampled: Vec<Vec<f64>>,
    augmented: Option<Vec<Vec<f64>>>,
    seed: u64,
    population: usize,
    iterations: usize,
    generations: usize,
) -> PyResult<(usize, f64)> {
    let ga = GaConfig {
        population,
        iterations,
        generations,
        seed,
        ..Default::default()
    };
    let r = ga_optimize(&pool(sampled, augmented)?, &ga).map_err(py_err)?;
    Ok((r.best, r.fitness))
}

/// Labeled dataset of an experiment TOML as
/// `(location_set, combo (1-based), split, sum_rate, pbm)` tuples.
#[pyfunction]
#[pyo3(signature = (config_toml = ""))]
fn generate_dataset(config_toml: &str) -> PyResult<Vec<(u32, u32, String, f64, Vec<f64>)>> {
    let cfg = ExperimentConfig::from_toml_str(config_toml).map_err(py_err)?;
    let exp = Experiment::new(cfg).map_err(py_err)?;
    Ok(exp
        .generate_dataset()
        .map_err(py_err)?
        .into_iter()
        .map(|s| (s.location_set, s.combo + 1, s.split.name().to_string(), s.sum_rate, s.pbm))
        .collect())
}

#[pymodule]
fn probeopt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyMixture>()?;
    m.add_function(wrap_pyfunction!(py_mmd, m)?)?;
    m.add_function(wrap_pyfunction!(fitness_values, m)?)?;
    m.add_function(wrap_pyfunction!(py_exhaustive_select, m)?)?;
    m.add_function(wrap_pyfunction!(py_ga_optimize, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    Ok(())
}
