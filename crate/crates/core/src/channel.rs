//! Synthetic geometric multipath channels for a uniform planar array, plus
//! the array-response and 2D-DFT codebook primitives.
//!
//! Antenna and codeword indices follow the Kronecker order `a_y ⊗ a_z`:
//! element `iy * m_z + iz`. The horizontal (azimuth) DFT beam of codeword
//! `m` is therefore `m / m_z`.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1};
use num_complex::Complex64;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, stream, Rng};

const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Azimuth spread of non-line-of-sight paths around the geometric bearing.
const AZIMUTH_SPREAD: f64 = 30.0 * PI / 180.0;
const ELEVATION_RANGE: (f64, f64) = (80.0 * PI / 180.0, 100.0 * PI / 180.0);
const MAX_DELAY: f64 = 100e-9;
const PATHLOSS_EXPONENT: f64 = 3.0;
/// Per-path power decay of the exponential profile, in nepers per path.
const POWER_DECAY: f64 = 1.0;
/// Target median single-AP MRT receive SNR used when calibrating noise.
const TARGET_MEDIAN_SNR_DB: f64 = 10.0;
const CALIBRATION_DRAWS: u64 = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub m_y: usize,
    pub m_z: usize,
}

impl ArrayGeometry {
    pub fn new(m_y: usize, m_z: usize) -> Result<Self> {
        let g = ArrayGeometry { m_y, m_z };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_y == 0 || self.m_z == 0 {
            return Err(Error::Config(format!(
                "array geometry must have at least one antenna per axis, got {}x{}",
                self.m_y, self.m_z
            )));
        }
        Ok(())
    }

    /// Total antenna count `M`.
    pub fn antennas(&self) -> usize {
        self.m_y * self.m_z
    }
}

/// One propagation path of a link.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathComponent {
    /// Linear power gain.
    pub gain: f64,
    /// Seconds.
    pub delay: f64,
    /// Radians in `[-π, π)`.
    pub azimuth: f64,
    /// Radians from the vertical axis, in `(0, π)`.
    pub elevation: f64,
}

/// Deployment and radio parameters of the synthetic cell-free scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub geometry: ArrayGeometry,
    pub paths: usize,
    pub bandwidth: f64,
    pub carrier: f64,
    /// AP positions in meters; their count is `B`.
    pub ap_positions: Vec<[f64; 2]>,
    /// Boresight azimuth of each AP array in the global frame, radians.
    pub ap_orientations: Vec<f64>,
    /// One square user region per user; their count is `U`.
    pub region_centers: Vec<[f64; 2]>,
    pub region_side: f64,
    /// Transmit power per AP, watts.
    pub tx_power: f64,
    /// Receiver noise power, watts.
    pub noise_power: f64,
}

/// On-disk flat key/value form of [`ScenarioConfig`]. All quantities in SI units.
///
/// ```toml
/// m_y = 8
/// m_z = 8
/// paths = 5
/// bandwidth_hz = 100e6
/// carrier_hz = 28e9
/// ap_positions_m = [[-60.0, -20.0], [-60.0, 0.0], [-60.0, 20.0]]
/// region_centers_m = [[0.0, -6.0], [0.0, 0.0], [0.0, 6.0]]
/// region_side_m = 4.0
/// tx_power_w = 10.0
/// # optional; calibrated to a 10 dB median single-AP MRT SNR when absent
/// noise_power_w = 1e-12
/// # optional; defaults to facing the centroid of the user regions
/// ap_orientations_rad = [0.0, 0.0, 0.0]
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub m_y: usize,
    pub m_z: usize,
    #[serde(default = "default_paths")]
    pub paths: usize,
    pub bandwidth_hz: f64,
    pub carrier_hz: f64,
    pub ap_positions_m: Vec<[f64; 2]>,
    #[serde(default)]
    pub ap_orientations_rad: Option<Vec<f64>>,
    pub region_centers_m: Vec<[f64; 2]>,
    pub region_side_m: f64,
    pub tx_power_w: f64,
    #[serde(default)]
    pub noise_power_w: Option<f64>,
}

fn default_paths() -> usize {
    5
}

impl ScenarioFile {
    pub fn resolve(&self) -> Result<ScenarioConfig> {
        let geometry = ArrayGeometry::new(self.m_y, self.m_z)?;
        let orientations = match &self.ap_orientations_rad {
            Some(o) => o.clone(),
            None => facing_centroid(&self.ap_positions_m, &self.region_centers_m),
        };
        let mut scenario = ScenarioConfig {
            geometry,
            paths: self.paths,
            bandwidth: self.bandwidth_hz,
            carrier: self.carrier_hz,
            ap_positions: self.ap_positions_m.clone(),
            ap_orientations: orientations,
            region_centers: self.region_centers_m.clone(),
            region_side: self.region_side_m,
            tx_power: self.tx_power_w,
            noise_power: 1.0,
        };
        scenario.noise_power = match self.noise_power_w {
            Some(n) => n,
            None => {
                scenario.validate()?;
                calibrate_noise_power(&scenario, CALIBRATION_DRAWS, 0)
            }
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

fn facing_centroid(aps: &[[f64; 2]], regions: &[[f64; 2]]) -> Vec<f64> {
    let n = regions.len().max(1) as f64;
    let cx = regions.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = regions.iter().map(|p| p[1]).sum::<f64>() / n;
    aps.iter().map(|a| (cy - a[1]).atan2(cx - a[0])).collect()
}

impl ScenarioConfig {
    pub fn aps(&self) -> usize {
        self.ap_positions.len()
    }

    pub fn users(&self) -> usize {
        self.region_centers.len()
    }

    pub fn antennas(&self) -> usize {
        self.geometry.antennas()
    }

    /// Total transmit power across APs.
    pub fn total_power(&self) -> f64 {
        self.tx_power * self.aps() as f64
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.aps() == 0 {
            return bad("scenario needs at least one AP".into());
        }
        if self.users() == 0 {
            return bad("scenario needs at least one user region".into());
        }
        if self.paths == 0 {
            return bad("paths per link must be at least 1".into());
        }
        if self.ap_orientations.len() != self.aps() {
            return bad(format!(
                "{} AP orientations for {} APs",
                self.ap_orientations.len(),
                self.aps()
            ));
        }
        if !(self.region_side > 0.0) {
            return bad(format!("region side must be positive, got {}", self.region_side));
        }
        if !(self.tx_power > 0.0) {
            return bad(format!("tx power must be positive, got {}", self.tx_power));
        }
        if !(self.noise_power > 0.0) || !self.noise_power.is_finite() {
            return bad(format!("noise power must be positive, got {}", self.noise_power));
        }
        if !(self.carrier > 0.0) || !(self.bandwidth > 0.0) {
            return bad("carrier and bandwidth must be positive".into());
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ScenarioFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("scenario: {e}")))?;
        file.resolve()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::Missing(path.into()))?;
        Self::from_toml_str(&text)
    }

    /// Three APs facing a compact street segment with three user regions.
    /// Small enough that the full training pipeline runs on one core.
    pub fn desk() -> Self {
        Self::with_layout(
            vec![[-55.0, -25.0], [-60.0, 0.0], [-55.0, 25.0]],
            vec![[0.0, -12.0], [3.0, 0.0], [0.0, 12.0]],
        )
    }

    /// Three APs with 8x8 arrays serving six users, the dimensions used in
    /// the original cell-free experiment.
    pub fn six_user() -> Self {
        Self::with_layout(
            vec![[-55.0, -25.0], [-60.0, 0.0], [-55.0, 25.0]],
            vec![
                [0.0, -10.0],
                [4.0, -6.0],
                [0.0, -2.0],
                [4.0, 2.0],
                [0.0, 6.0],
                [4.0, 10.0],
            ],
        )
    }

    fn with_layout(ap_positions: Vec<[f64; 2]>, region_centers: Vec<[f64; 2]>) -> Self {
        let ap_orientations = facing_centroid(&ap_positions, &region_centers);
        let mut s = ScenarioConfig {
            geometry: ArrayGeometry { m_y: 8, m_z: 8 },
            paths: default_paths(),
            bandwidth: 100e6,
            carrier: 28e9,
            ap_positions,
            ap_orientations,
            region_centers,
            region_side: 4.0,
            tx_power: 10.0,
            noise_power: 1.0,
        };
        s.noise_power = calibrate_noise_power(&s, CALIBRATION_DRAWS, 0);
        s
    }

    /// Log-distance pathloss (free space at 1 m, exponent 3) as a linear gain.
    pub fn pathloss_gain(&self, distance: f64) -> f64 {
        let lambda = SPEED_OF_LIGHT / self.carrier;
        let pl0_db = 20.0 * (4.0 * PI / lambda).log10();
        let pl_db = pl0_db + 10.0 * PATHLOSS_EXPONENT * distance.max(1.0).log10();
        10f64.powf(-pl_db / 10.0)
    }
}

/// Channel vectors of every (AP, user) link, stacked as `H` (`B·M × U`).
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    aps: usize,
    antennas: usize,
    stacked: Array2<Complex64>,
    pub user_positions: Vec<[f64; 2]>,
}

impl ChannelRealization {
    /// Builds a realization from per-link vectors indexed `[b][u]`.
    pub fn from_links(links: &[Vec<Array1<Complex64>>]) -> Result<Self> {
        let aps = links.len();
        if aps == 0 || links[0].is_empty() {
            return Err(Error::Config("channel needs at least one AP and one user".into()));
        }
        let users = links[0].len();
        let antennas = links[0][0].len();
        let mut stacked = Array2::zeros((aps * antennas, users));
        for (b, row) in links.iter().enumerate() {
            if row.len() != users {
                return Err(Error::Shape {
                    context: "channel users per AP",
                    expected: users,
                    got: row.len(),
                });
            }
            for (u, h) in row.iter().enumerate() {
                if h.len() != antennas {
                    return Err(Error::Shape {
                        context: "channel vector length",
                        expected: antennas,
                        got: h.len(),
                    });
                }
                stacked
                    .slice_mut(s![b * antennas..(b + 1) * antennas, u])
                    .assign(h);
            }
        }
        Ok(ChannelRealization {
            aps,
            antennas,
            stacked,
            user_positions: Vec::new(),
        })
    }

    pub fn zeros(aps: usize, users: usize, antennas: usize) -> Self {
        ChannelRealization {
            aps,
            antennas,
            stacked: Array2::zeros((aps * antennas, users)),
            user_positions: Vec::new(),
        }
    }

    pub fn aps(&self) -> usize {
        self.aps
    }

    pub fn users(&self) -> usize {
        self.stacked.ncols()
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    /// `h_{b,u}`.
    pub fn link(&self, b: usize, u: usize) -> ArrayView1<'_, Complex64> {
        self.stacked
            .slice(s![b * self.antennas..(b + 1) * self.antennas, u])
    }

    /// The stacked matrix `H`, column `u` being `h_u`.
    pub fn stacked(&self) -> &Array2<Complex64> {
        &self.stacked
    }
}

/// `a_y(φ_az, φ_el) ⊗ a_z(φ_el)` for a half-wavelength UPA.
pub fn array_response(azimuth: f64, elevation: f64, geometry: ArrayGeometry) -> Array1<Complex64> {
    let ky = PI * elevation.sin() * azimuth.sin();
    let kz = PI * elevation.cos();
    let mut out = Array1::zeros(geometry.antennas());
    for iy in 0..geometry.m_y {
        let ay = Complex64::from_polar(1.0, ky * iy as f64);
        for iz in 0..geometry.m_z {
            out[iy * geometry.m_z + iz] = ay * Complex64::from_polar(1.0, kz * iz as f64);
        }
    }
    out
}

fn dft_entry(n: usize, k: usize, size: usize) -> Complex64 {
    // Reduce the exponent mod size first so large products stay exact.
    let phase = -2.0 * PI * ((n * k) % size) as f64 / size as f64;
    Complex64::from_polar(1.0 / (size as f64).sqrt(), phase)
}

/// Column `m` of the 2D-DFT codebook.
pub fn dft_codeword(geometry: ArrayGeometry, m: usize) -> Array1<Complex64> {
    let (ky, kz) = (m / geometry.m_z, m % geometry.m_z);
    let mut out = Array1::zeros(geometry.antennas());
    for iy in 0..geometry.m_y {
        let fy = dft_entry(iy, ky, geometry.m_y);
        for iz in 0..geometry.m_z {
            out[iy * geometry.m_z + iz] = fy * dft_entry(iz, kz, geometry.m_z);
        }
    }
    out
}

/// Unitary 2D-DFT codebook `F_y ⊗ F_z` (`M × M`).
pub fn dft_codebook(geometry: ArrayGeometry) -> Array2<Complex64> {
    let m = geometry.antennas();
    let mut f = Array2::zeros((m, m));
    for col in 0..m {
        f.column_mut(col).assign(&dft_codeword(geometry, col));
    }
    f
}

/// `Σ_l sqrt(ρ_l) exp(j2π τ_l W) a(φ_az,l, φ_el,l)`.
pub fn link_from_paths(
    paths: &[PathComponent],
    bandwidth: f64,
    geometry: ArrayGeometry,
) -> Array1<Complex64> {
    let mut h = Array1::zeros(geometry.antennas());
    for p in paths {
        let coeff = Complex64::from_polar(p.gain.sqrt(), 2.0 * PI * p.delay * bandwidth);
        let a = array_response(p.azimuth, p.elevation, geometry);
        h.scaled_add(coeff, &a);
    }
    h
}

fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly π.
    if w >= PI {
        -PI
    } else {
        w
    }
}

/// Draws the paths of one link. The first path is the line-of-sight one at
/// the exact geometric bearing; later paths scatter uniformly within ±30°.
pub fn draw_link_paths(
    scenario: &ScenarioConfig,
    ap: usize,
    user_position: [f64; 2],
    rng: &mut Rng,
) -> Vec<PathComponent> {
    let a = scenario.ap_positions[ap];
    let (dx, dy) = (user_position[0] - a[0], user_position[1] - a[1]);
    let distance = dx.hypot(dy);
    let bearing = wrap_angle(dy.atan2(dx) - scenario.ap_orientations[ap]);

    let mut delays: Vec<f64> = (0..scenario.paths)
        .map(|_| rng.random_range(0.0..MAX_DELAY))
        .collect();
    delays.sort_by(f64::total_cmp);

    let weights: Vec<f64> = (0..scenario.paths)
        .map(|l| (-POWER_DECAY * l as f64).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let budget = scenario.pathloss_gain(distance);

    (0..scenario.paths)
        .map(|l| {
            let azimuth = if l == 0 {
                bearing
            } else {
                wrap_angle(bearing + rng.random_range(-AZIMUTH_SPREAD..AZIMUTH_SPREAD))
            };
            PathComponent {
                gain: budget * weights[l] / total,
                delay: delays[l],
                azimuth,
                elevation: rng.random_range(ELEVATION_RANGE.0..ELEVATION_RANGE.1),
            }
        })
        .collect()
}

/// Uniform user drops, one per region square.
pub fn sample_user_positions(scenario: &ScenarioConfig, rng: &mut Rng) -> Vec<[f64; 2]> {
    let half = scenario.region_side / 2.0;
    scenario
        .region_centers
        .iter()
        .map(|c| {
            [
                c[0] + rng.random_range(-half..half),
                c[1] + rng.random_range(-half..half),
            ]
        })
        .collect()
}

/// Channel for fixed user positions; path draws depend only on `seed`.
pub fn generate_channel_at(
    scenario: &ScenarioConfig,
    user_positions: &[[f64; 2]],
    seed: u64,
) -> Result<ChannelRealization> {
    scenario.validate()?;
    if user_positions.len() != scenario.users() {
        return Err(Error::Shape {
            context: "user positions",
            expected: scenario.users(),
            got: user_positions.len(),
        });
    }
    let users = scenario.users();
    let links: Vec<Vec<Array1<Complex64>>> = (0..scenario.aps())
        .map(|b| {
            (0..users)
                .map(|u| {
                    let mut rng =
                        rng_from_seed(derive_seed(seed, stream::PATHS, (b * users + u) as u64));
                    let paths = draw_link_paths(scenario, b, user_positions[u], &mut rng);
                    link_from_paths(&paths, scenario.bandwidth, scenario.geometry)
                })
                .collect()
        })
        .collect();
    let mut realization = ChannelRealization::from_links(&links)?;
    realization.user_positions = user_positions.to_vec();
    Ok(realization)
}

/// One drop of user positions and the resulting channels, a pure function of
/// `(scenario, seed)`.
pub fn generate_channel(scenario: &ScenarioConfig, seed: u64) -> Result<ChannelRealization> {
    let mut rng = rng_from_seed(derive_seed(seed, stream::LOCATIONS, 0));
    let positions = sample_user_positions(scenario, &mut rng);
    generate_channel_at(scenario, &positions, seed)
}

/// Noise power giving the target median receive SNR when each user is
/// served alone by its strongest AP with maximum-ratio transmission.
pub fn calibrate_noise_power(scenario: &ScenarioConfig, draws: u64, seed: u64) -> f64 {
    let mut snr_numerators = Vec::new();
    for i in 0..draws {
        let ch = match generate_channel(scenario, derive_seed(seed, stream::CALIBRATION, i)) {
            Ok(ch) => ch,
            Err(_) => return 1.0,
        };
        for u in 0..ch.users() {
            let best = (0..ch.aps())
                .map(|b| ch.link(b, u).iter().map(|c| c.norm_sqr()).sum::<f64>())
                .fold(0.0, f64::max);
            snr_numerators.push(scenario.tx_power * best);
        }
    }
    snr_numerators.sort_by(f64::total_cmp);
    let median = snr_numerators[snr_numerators.len() / 2];
    median / 10f64.powf(TARGET_MEDIAN_SNR_DB / 10.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn broadside_response_is_all_ones() {
        let g = ArrayGeometry::new(4, 3).unwrap();
        let a = array_response(0.0, PI / 2.0, g);
        for v in a.iter() {
            assert!(close(v.re, 1.0, 1e-12) && close(v.im, 0.0, 1e-12));
        }
    }

    #[test]
    fn two_element_endfire_flips_sign() {
        let g = ArrayGeometry::new(2, 1).unwrap();
        let a = array_response(PI / 2.0, PI / 2.0, g);
        assert!(close(a[0].re, 1.0, 1e-12));
        assert!(close(a[1].re, -1.0, 1e-12) && close(a[1].im, 0.0, 1e-12));
    }

    #[test]
    fn tiny_codebooks() {
        let f = dft_codebook(ArrayGeometry::new(1, 1).unwrap());
        assert_eq!(f.dim(), (1, 1));
        assert!(close(f[[0, 0]].re, 1.0, 1e-15));

        let f = dft_codebook(ArrayGeometry::new(2, 1).unwrap());
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!(close(f[[0, 0]].re, r, 1e-15) && close(f[[1, 0]].re, r, 1e-15));
        assert!(close(f[[0, 1]].re, r, 1e-15) && close(f[[1, 1]].re, -r, 1e-15));
        assert!(f.iter().all(|c| c.im.abs() < 1e-15));
    }

    #[test]
    fn invalid_geometry_rejected() {
        assert!(ArrayGeometry::new(0, 4).is_err());
        let mut s = ScenarioConfig::desk();
        s.noise_power = 0.0;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn wrap_angle_half_open() {
        assert!(close(wrap_angle(PI), -PI, 1e-15));
        assert!(close(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, 1e-12));
        assert!(wrap_angle(-PI) >= -PI);
    }

    #[test]
    fn scenario_file_round_trip() {
        let text = r#"
            m_y = 4
            m_z = 2
            paths = 3
            bandwidth_hz = 100e6
            carrier_hz = 28e9
            ap_positions_m = [[-50.0, 0.0], [-50.0, 10.0]]
            region_centers_m = [[0.0, 0.0]]
            region_side_m = 4.0
            tx_power_w = 10.0
            noise_power_w = 1e-13
        "#;
        let s = ScenarioConfig::from_toml_str(text).unwrap();
        assert_eq!(s.aps(), 2);
        assert_eq!(s.users(), 1);
        assert_eq!(s.antennas(), 8);
        assert_eq!(s.noise_power, 1e-13);
        // Orientation defaults to facing the region centroid.
        assert!(close(s.ap_orientations[0], 0.0, 1e-12));
        assert!(s.ap_orientations[1] < 0.0);

        let bad = text.replace("paths = 3", "paths = 0");
        assert!(ScenarioConfig::from_toml_str(&bad).is_err());
        let unknown = format!("{text}\nfoo = 1\n");
        assert!(ScenarioConfig::from_toml_str(&unknown).is_err());
    }

    #[test]
    fn calibrated_noise_hits_target_median() {
        let s = ScenarioConfig::desk();
        // Recompute the median SNR on the calibration draws.
        let mut snrs = Vec::new();
        for i in 0..CALIBRATION_DRAWS {
            let ch = generate_channel(&s, derive_seed(0, stream::CALIBRATION, i)).unwrap();
            for u in 0..ch.users() {
                let best = (0..ch.aps())
                    .map(|b| ch.link(b, u).iter().map(|c| c.norm_sqr()).sum::<f64>())
                    .fold(0.0, f64::max);
                snrs.push(10.0 * (s.tx_power * best / s.noise_power).log10());
            }
        }
        snrs.sort_by(f64::total_cmp);
        assert!(close(snrs[snrs.len() / 2], 10.0, 1e-9));
    }

    #[test]
    fn paths_respect_parameter_ranges() {
        let s = ScenarioConfig::desk();
        let mut rng = rng_from_seed(3);
        for _ in 0..50 {
            let pos = sample_user_positions(&s, &mut rng);
            for b in 0..s.aps() {
                let paths = draw_link_paths(&s, b, pos[0], &mut rng);
                assert_eq!(paths.len(), s.paths);
                let total: f64 = paths.iter().map(|p| p.gain).sum();
                let d = (pos[0][0] - s.ap_positions[b][0]).hypot(pos[0][1] - s.ap_positions[b][1]);
                assert!((total / s.pathloss_gain(d) - 1.0).abs() < 1e-12);
                for w in paths.windows(2) {
                    assert!(w[0].delay <= w[1].delay && w[0].gain > w[1].gain);
                }
                for p in &paths {
                    assert!(p.azimuth >= -PI && p.azimuth < PI);
                    assert!(p.elevation > 0.0 && p.elevation < PI);
                    assert!(p.delay >= 0.0 && p.delay < MAX_DELAY);
                }
            }
        }
    }
}
