//! PBM-driven hybrid beamforming: probing measurements, sector compression of
//! the beamspace, strongest-beam-first analog selection, LMMSE digital
//! precoding and the resulting sum rate.

use ndarray::{s, Array1, Array2};
use num_complex::Complex64;

use crate::channel::{dft_codeword, ArrayGeometry, ChannelRealization, ScenarioConfig};
use crate::error::{Error, Result};

/// The probing beams each AP sweeps for one combination.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbingConfig {
    /// Zero-based position in the list of candidate combinations.
    pub combo_index: usize,
    pub geometry: ArrayGeometry,
    index_sets: Vec<Vec<usize>>,
    condition: Vec<f64>,
}

impl ProbingConfig {
    pub fn new(
        combo_index: usize,
        geometry: ArrayGeometry,
        index_sets: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let m = geometry.antennas();
        let n_b = index_sets.first().map_or(0, Vec::len);
        if index_sets.is_empty() || n_b == 0 {
            return Err(Error::Config("probing config needs at least one beam per AP".into()));
        }
        for (b, set) in index_sets.iter().enumerate() {
            if set.len() != n_b {
                return Err(Error::Config(format!(
                    "AP {b} probes {} beams, AP 0 probes {n_b}",
                    set.len()
                )));
            }
            for (k, &i) in set.iter().enumerate() {
                if i >= m {
                    return Err(Error::Config(format!(
                        "probing index {i} of AP {b} outside codebook of size {m}"
                    )));
                }
                if set[..k].contains(&i) {
                    return Err(Error::Config(format!("AP {b} repeats probing index {i}")));
                }
            }
        }
        let condition = codeword_condition(geometry, &index_sets[0]);
        Ok(ProbingConfig {
            combo_index,
            geometry,
            index_sets,
            condition,
        })
    }

    /// Every AP probes the same `n_b` consecutive codewords starting at
    /// `combo * n_b`, i.e. one horizontal sector of the 2D-DFT codebook when
    /// `n_b == m_z`.
    pub fn horizontal_sector(
        combo: usize,
        aps: usize,
        geometry: ArrayGeometry,
        n_b: usize,
    ) -> Result<Self> {
        let first = combo * n_b;
        if first + n_b > geometry.antennas() {
            return Err(Error::Config(format!(
                "combination {} with {n_b} probes exceeds codebook of size {}",
                combo + 1,
                geometry.antennas()
            )));
        }
        let set: Vec<usize> = (first..first + n_b).collect();
        Self::new(combo, geometry, vec![set; aps])
    }

    /// All `l_total` horizontal-sector combinations.
    pub fn sector_layout(
        l_total: usize,
        aps: usize,
        geometry: ArrayGeometry,
        n_b: usize,
    ) -> Result<Vec<Self>> {
        (0..l_total)
            .map(|l| Self::horizontal_sector(l, aps, geometry, n_b))
            .collect()
    }

    pub fn index_sets(&self) -> &[Vec<usize>] {
        &self.index_sets
    }

    pub fn aps(&self) -> usize {
        self.index_sets.len()
    }

    /// `N_b`, identical for every AP.
    pub fn probes_per_ap(&self) -> usize {
        self.index_sets[0].len()
    }

    /// `N = Σ_b N_b`.
    pub fn total_probes(&self) -> usize {
        self.aps() * self.probes_per_ap()
    }

    /// Real/imaginary parts of AP 0's probing codewords, codeword by codeword:
    /// `[re f_0, im f_0, re f_1, im f_1, ...]`, length `2·N_b·M`.
    pub fn condition(&self) -> &[f64] {
        &self.condition
    }
}

fn codeword_condition(geometry: ArrayGeometry, set: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * set.len() * geometry.antennas());
    for &i in set {
        let f = dft_codeword(geometry, i);
        out.extend(f.iter().map(|c| c.re));
        out.extend(f.iter().map(|c| c.im));
    }
    out
}

/// Received probing powers of all users, user-major then (AP, beam).
#[derive(Clone, Debug, PartialEq)]
pub struct PbmVector {
    values: Vec<f64>,
    users: usize,
}

impl PbmVector {
    pub fn new(values: Vec<f64>, users: usize) -> Result<Self> {
        if users == 0 || values.len() % users != 0 {
            return Err(Error::Config(format!(
                "PBM length {} not divisible by {users} users",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Config(format!("PBM entries must be finite and >= 0, got {v}")));
        }
        Ok(PbmVector { values, users })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn users(&self) -> usize {
        self.users
    }

    /// `N`, the per-user block width.
    pub fn probes(&self) -> usize {
        self.values.len() / self.users
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, user: usize, ap: usize, beam: usize, per_ap: usize) -> f64 {
        self.values[user * self.probes() + ap * per_ap + beam]
    }
}

fn inner(f: &Array1<Complex64>, h: ndarray::ArrayView1<'_, Complex64>) -> Complex64 {
    f.iter().zip(h.iter()).map(|(a, b)| a.conj() * b).sum()
}

/// `r_{b,u,i} = |f̃_{b,i}^H h_{b,u}|²` for every probing beam.
pub fn compute_pbm(channel: &ChannelRealization, config: &ProbingConfig) -> Result<PbmVector> {
    if channel.antennas() != config.geometry.antennas() {
        return Err(Error::Shape {
            context: "channel antennas vs probing geometry",
            expected: config.geometry.antennas(),
            got: channel.antennas(),
        });
    }
    if channel.aps() != config.aps() {
        return Err(Error::Shape {
            context: "channel APs vs probing config",
            expected: config.aps(),
            got: channel.aps(),
        });
    }
    let n = config.total_probes();
    let per_ap = config.probes_per_ap();
    let users = channel.users();
    let mut values = vec![0.0; users * n];
    for (b, set) in config.index_sets().iter().enumerate() {
        for (i, &m) in set.iter().enumerate() {
            let f = dft_codeword(config.geometry, m);
            for u in 0..users {
                values[u * n + b * per_ap + i] = inner(&f, channel.link(b, u)).norm_sqr();
            }
        }
    }
    PbmVector::new(values, users)
}

/// Ranks `classes` contiguous beamspace sectors per AP by the PBM energy of
/// the probing beams falling inside them and keeps the `keep` strongest
/// (ties go to the lower sector). Returns the sorted candidate beams `A_b`.
pub fn compress_beamspace(
    pbm: &PbmVector,
    config: &ProbingConfig,
    classes: usize,
    keep: usize,
) -> Result<Vec<Vec<usize>>> {
    let m = config.geometry.antennas();
    if classes == 0 || m % classes != 0 {
        return Err(Error::Config(format!(
            "{classes} classes do not divide a beamspace of {m}"
        )));
    }
    if keep == 0 || keep > classes {
        return Err(Error::Config(format!("keep {keep} outside 1..={classes}")));
    }
    let width = m / classes;
    let per_ap = config.probes_per_ap();
    if pbm.probes() != config.total_probes() {
        return Err(Error::Shape {
            context: "PBM width vs probing config",
            expected: config.total_probes(),
            got: pbm.probes(),
        });
    }
    Ok(config
        .index_sets()
        .iter()
        .enumerate()
        .map(|(b, set)| {
            let mut energy = vec![0.0; classes];
            for (i, &beam) in set.iter().enumerate() {
                let e: f64 = (0..pbm.users()).map(|u| pbm.get(u, b, i, per_ap)).sum();
                energy[beam / width] += e;
            }
            let mut order: Vec<usize> = (0..classes).collect();
            // Stable sort keeps lower class indices first on ties.
            order.sort_by(|&a, &c| energy[c].total_cmp(&energy[a]));
            let mut beams: Vec<usize> = order[..keep]
                .iter()
                .flat_map(|&c| c * width..(c + 1) * width)
                .collect();
            beams.sort_unstable();
            beams
        })
        .collect())
}

/// Strongest-beam-first selection per AP. Users are served in descending
/// order of their best candidate gain (ties: lower user index); each takes
/// its strongest beam not yet taken (ties: lower beam index). Entry `u` of
/// each returned set is the beam of user `u`.
pub fn select_analog_beams_sbf(
    channel: &ChannelRealization,
    geometry: ArrayGeometry,
    candidates: &[Vec<usize>],
) -> Result<Vec<Vec<usize>>> {
    let users = channel.users();
    if candidates.len() != channel.aps() {
        return Err(Error::Shape {
            context: "candidate sets vs APs",
            expected: channel.aps(),
            got: candidates.len(),
        });
    }
    candidates
        .iter()
        .enumerate()
        .map(|(b, cand)| {
            if cand.len() < users {
                return Err(Error::InfeasibleCandidates {
                    ap: b,
                    available: cand.len(),
                    needed: users,
                });
            }
            let mut beams = cand.clone();
            beams.sort_unstable();
            beams.dedup();
            if beams.len() < users {
                return Err(Error::InfeasibleCandidates {
                    ap: b,
                    available: beams.len(),
                    needed: users,
                });
            }
            // gains[u][k] for candidate beams[k]
            let gains: Vec<Vec<f64>> = (0..users)
                .map(|u| {
                    beams
                        .iter()
                        .map(|&m| inner(&dft_codeword(geometry, m), channel.link(b, u)).norm_sqr())
                        .collect()
                })
                .collect();
            Ok(sbf_assign(&gains, &beams))
        })
        .collect()
}

/// Greedy assignment on a precomputed gain table, `gains[u][k]` for beam
/// `beams[k]` (sorted ascending).
pub(crate) fn sbf_assign(gains: &[Vec<f64>], beams: &[usize]) -> Vec<usize> {
    let users = gains.len();
    let strongest: Vec<f64> = gains
        .iter()
        .map(|g| g.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut order: Vec<usize> = (0..users).collect();
    order.sort_by(|&a, &c| strongest[c].total_cmp(&strongest[a]));

    let mut taken = vec![false; beams.len()];
    let mut assigned = vec![0; users];
    for u in order {
        let mut best: Option<usize> = None;
        for k in 0..beams.len() {
            if taken[k] {
                continue;
            }
            // Strict comparison keeps the lowest beam index on ties.
            if best.is_none_or(|j| gains[u][k] > gains[u][j]) {
                best = Some(k);
            }
        }
        let k = best.expect("at least as many beams as users");
        taken[k] = true;
        assigned[u] = beams[k];
    }
    assigned
}

/// Block-diagonal `F_RF` (`B·M × B·U`) from per-AP analog beams.
pub fn analog_precoder(geometry: ArrayGeometry, analog: &[Vec<usize>]) -> Array2<Complex64> {
    let m = geometry.antennas();
    let per_ap = analog.first().map_or(0, Vec::len);
    let mut f = Array2::zeros((analog.len() * m, analog.len() * per_ap));
    for (b, set) in analog.iter().enumerate() {
        for (k, &beam) in set.iter().enumerate() {
            f.slice_mut(s![b * m..(b + 1) * m, b * per_ap + k])
                .assign(&dft_codeword(geometry, beam));
        }
    }
    f
}

pub(crate) fn hermitian(a: &Array2<Complex64>) -> Array2<Complex64> {
    a.t().mapv(|c| c.conj())
}

/// Solves `A X = B` for Hermitian positive-definite `A` by Cholesky.
/// Fails when a pivot collapses below `1e-12` of the largest diagonal entry.
pub(crate) fn cholesky_solve(a: &Array2<Complex64>, rhs: &Array2<Complex64>) -> Result<Array2<Complex64>> {
    let n = a.nrows();
    let scale = (0..n).map(|i| a[[i, i]].re).fold(0.0, f64::max);
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::NumericalRank("Gram matrix has no positive diagonal".into()));
    }
    let mut l = Array2::<Complex64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]].re;
        for k in 0..j {
            d -= l[[j, k]].norm_sqr();
        }
        if d <= 1e-12 * scale {
            return Err(Error::NumericalRank(format!(
                "pivot {j} is {d:.3e} against scale {scale:.3e}"
            )));
        }
        let d = d.sqrt();
        l[[j, j]] = Complex64::new(d, 0.0);
        for i in j + 1..n {
            let mut v = a[[i, j]];
            for k in 0..j {
                v -= l[[i, k]] * l[[j, k]].conj();
            }
            l[[i, j]] = v / d;
        }
    }
    let mut x = rhs.clone();
    for col in 0..x.ncols() {
        // L y = b
        for i in 0..n {
            let mut v = x[[i, col]];
            for k in 0..i {
                v -= l[[i, k]] * x[[k, col]];
            }
            x[[i, col]] = v / l[[i, i]];
        }
        // L^H x = y
        for i in (0..n).rev() {
            let mut v = x[[i, col]];
            for k in i + 1..n {
                v -= l[[k, i]].conj() * x[[k, col]];
            }
            x[[i, col]] = v / l[[i, i]];
        }
    }
    Ok(x)
}

/// LMMSE digital precoder `W_BB = H̄ (H̄^H H̄ + λI)^{-1} Σ` with
/// `H̄ = F_RF^H H`, each column scaled so that `‖F_RF w_u‖² = P_u`.
pub fn lmmse_digital(
    f_rf: &Array2<Complex64>,
    h: &Array2<Complex64>,
    lambda: f64,
    powers: &[f64],
) -> Result<Array2<Complex64>> {
    let users = h.ncols();
    if powers.len() != users {
        return Err(Error::Shape {
            context: "per-user powers",
            expected: users,
            got: powers.len(),
        });
    }
    if f_rf.nrows() != h.nrows() {
        return Err(Error::Shape {
            context: "F_RF rows vs H rows",
            expected: h.nrows(),
            got: f_rf.nrows(),
        });
    }
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("regularizer must be >= 0, got {lambda}")));
    }
    let h_bar = hermitian(f_rf).dot(h);
    let mut gram = hermitian(&h_bar).dot(&h_bar);
    for i in 0..users {
        gram[[i, i]] += lambda;
    }
    let inv = cholesky_solve(&gram, &Array2::eye(users))?;
    let mut w = h_bar.dot(&inv);
    let effective = f_rf.dot(&w);
    for u in 0..users {
        let norm = effective.column(u).iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::NumericalRank(format!(
                "precoder column {u} vanishes; user {u} has no channel through F_RF"
            )));
        }
        let rho = powers[u].sqrt() / norm;
        w.column_mut(u).mapv_inplace(|c| c * rho);
    }
    Ok(w)
}

/// `Σ_u log₂(1 + S_u / (I_u + σ²))` in bits/s/Hz.
pub fn sum_rate(
    h: &Array2<Complex64>,
    f_rf: &Array2<Complex64>,
    w_bb: &Array2<Complex64>,
    noise_power: f64,
) -> f64 {
    let e = hermitian(h).dot(&f_rf.dot(w_bb));
    (0..e.nrows())
        .map(|u| {
            let signal = e[[u, u]].norm_sqr();
            let interference: f64 = (0..e.ncols())
                .filter(|&v| v != u)
                .map(|v| e[[u, v]].norm_sqr())
                .sum();
            (1.0 + signal / (interference + noise_power)).log2()
        })
        .sum()
}

/// Hybrid beamformer chosen for one channel realization.
#[derive(Clone, Debug)]
pub struct HybridBeamformer {
    pub analog: Vec<Vec<usize>>,
    pub f_rf: Array2<Complex64>,
    pub w_bb: Array2<Complex64>,
}

/// Knobs of the PBM-driven beamforming chain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineParams {
    pub classes: usize,
    pub keep: usize,
    /// `None` selects `U·σ²/P_total`.
    pub lambda: Option<f64>,
    pub noise_power: f64,
    pub total_power: f64,
}

impl PipelineParams {
    /// Eight sectors, two kept: 75% of the beamspace is discarded.
    pub fn for_scenario(scenario: &ScenarioConfig) -> Self {
        PipelineParams {
            classes: 8,
            keep: 2,
            lambda: None,
            noise_power: scenario.noise_power,
            total_power: scenario.total_power(),
        }
    }

    /// Full-beamspace SBF (compression disabled).
    pub fn uncompressed(self) -> Self {
        PipelineParams {
            classes: 1,
            keep: 1,
            ..self
        }
    }

    pub fn lambda_for(&self, users: usize) -> f64 {
        self.lambda
            .unwrap_or(users as f64 * self.noise_power / self.total_power)
    }

    /// Equal split of the total power.
    pub fn user_powers(&self, users: usize) -> Vec<f64> {
        vec![self.total_power / users as f64; users]
    }
}

/// Everything produced by one pass of the chain.
#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub pbm: PbmVector,
    pub candidates: Vec<Vec<usize>>,
    pub beamformer: HybridBeamformer,
    pub sum_rate: f64,
}

/// PBM → sector compression → SBF → LMMSE → sum rate.
pub fn run_pipeline(
    channel: &ChannelRealization,
    config: &ProbingConfig,
    params: &PipelineParams,
) -> Result<PipelineOutcome> {
    let pbm = compute_pbm(channel, config)?;
    let candidates = compress_beamspace(&pbm, config, params.classes, params.keep)?;
    let analog = select_analog_beams_sbf(channel, config.geometry, &candidates)?;
    let f_rf = analog_precoder(config.geometry, &analog);
    let users = channel.users();
    let w_bb = lmmse_digital(
        &f_rf,
        channel.stacked(),
        params.lambda_for(users),
        &params.user_powers(users),
    )?;
    let rate = sum_rate(channel.stacked(), &f_rf, &w_bb, params.noise_power);
    Ok(PipelineOutcome {
        pbm,
        candidates,
        beamformer: HybridBeamformer { analog, f_rf, w_bb },
        sum_rate: rate,
    })
}

/// The labeled sample `(r, R_sum)` for one channel under one probing config.
pub fn evaluate_probing_config(
    channel: &ChannelRealization,
    config: &ProbingConfig,
    params: &PipelineParams,
) -> Result<(PbmVector, f64)> {
    let out = run_pipeline(channel, config, params)?;
    Ok((out.pbm, out.sum_rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(m_y: usize, m_z: usize) -> ArrayGeometry {
        ArrayGeometry::new(m_y, m_z).unwrap()
    }

    #[test]
    fn probing_config_validation() {
        let g = geom(4, 2);
        assert!(ProbingConfig::new(0, g, vec![vec![0, 8]]).is_err());
        assert!(ProbingConfig::new(0, g, vec![vec![1, 1]]).is_err());
        assert!(ProbingConfig::new(0, g, vec![vec![0, 1], vec![2]]).is_err());
        let c = ProbingConfig::horizontal_sector(1, 3, g, 2).unwrap();
        assert_eq!(c.index_sets(), &[vec![2, 3], vec![2, 3], vec![2, 3]]);
        assert_eq!(c.condition().len(), 2 * 2 * 8);
        assert!(ProbingConfig::horizontal_sector(4, 1, g, 2).is_err());
    }

    #[test]
    fn desk_condition_width() {
        let c = ProbingConfig::horizontal_sector(0, 3, geom(8, 8), 8).unwrap();
        assert_eq!(c.condition().len(), 1024);
        assert_eq!(c.total_probes(), 24);
    }

    #[test]
    fn compression_errors() {
        let g = geom(4, 2);
        let c = ProbingConfig::horizontal_sector(0, 1, g, 2).unwrap();
        let pbm = PbmVector::new(vec![1.0, 2.0], 1).unwrap();
        assert!(matches!(compress_beamspace(&pbm, &c, 3, 1), Err(Error::Config(_))));
        assert!(compress_beamspace(&pbm, &c, 4, 5).is_err());
        assert!(compress_beamspace(&pbm, &c, 4, 0).is_err());
    }

    #[test]
    fn full_keep_is_identity() {
        let g = geom(4, 2);
        let c = ProbingConfig::horizontal_sector(2, 2, g, 2).unwrap();
        let pbm = PbmVector::new(vec![0.5; 8], 2).unwrap();
        let a = compress_beamspace(&pbm, &c, 4, 4).unwrap();
        for set in a {
            assert_eq!(set, (0..8).collect::<Vec<_>>());
        }
    }

    #[test]
    fn pbm_rejects_negative_entries() {
        assert!(PbmVector::new(vec![1.0, -1.0], 1).is_err());
        assert!(PbmVector::new(vec![1.0, f64::NAN], 1).is_err());
        assert!(PbmVector::new(vec![1.0, 2.0, 3.0], 2).is_err());
    }

    #[test]
    fn sbf_rejects_too_few_candidates() {
        let ch = ChannelRealization::zeros(1, 3, 4);
        let r = select_analog_beams_sbf(&ch, geom(4, 1), &[vec![0, 1]]);
        assert!(matches!(r, Err(Error::InfeasibleCandidates { ap: 0, available: 2, needed: 3 })));
    }

    #[test]
    fn lmmse_rank_error_without_regularizer() {
        // Two users with identical channels and no regularization.
        let g = geom(4, 1);
        let h1 = dft_codeword(g, 1);
        let ch = ChannelRealization::from_links(&[vec![h1.clone(), h1]]).unwrap();
        let f = analog_precoder(g, &[vec![0, 1]]);
        let r = lmmse_digital(&f, ch.stacked(), 0.0, &[1.0, 1.0]);
        assert!(matches!(r, Err(Error::NumericalRank(_))));
        assert!(lmmse_digital(&f, ch.stacked(), -1.0, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn lambda_default_is_regularized_zf_scaling() {
        let p = PipelineParams {
            classes: 8,
            keep: 2,
            lambda: None,
            noise_power: 2.0,
            total_power: 30.0,
        };
        assert!((p.lambda_for(3) - 0.2).abs() < 1e-15);
        assert_eq!(p.user_powers(3), vec![10.0; 3]);
    }
}
