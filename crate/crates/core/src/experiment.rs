//! End-to-end experiment plumbing shared by the command-line verbs: config
//! resolution, dataset generation, model training, selection and metrics.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{AugmenterConfig, AugmenterModel, CovarianceKind, PbmTransform, TrainingReport};
use crate::beamforming::{evaluate_probing_config, PipelineParams, ProbingConfig};
use crate::binio::*;
use crate::channel::{generate_channel, ScenarioConfig, ScenarioFile};
use crate::dataset::{ensure_no_test, LabeledSample, Split};
use crate::error::{Error, Result};
use crate::eval::{mmd_median, Provenance, SampleSet};
use crate::mapper::{MapperConfig, MapperReport, RateExample, RateMapperModel};
use crate::nn::AdamConfig;
use crate::optimizer::{exhaustive_select, ga_optimize, CombinationPool, GaConfig, GaResult};
use crate::rng::{derive_seed, stream};

/// Generative model family used for augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Conditional VAE with a full-covariance mixture decoder.
    CvaeMdn,
    /// Conditional VAE with one diagonal Gaussian.
    Cvae,
    /// Unconditioned VAE with a mixture decoder, one per sampled combination.
    VaeMdn,
}

impl ModelKind {
    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::CvaeMdn => "cvae-mdn",
            ModelKind::Cvae => "cvae",
            ModelKind::VaeMdn => "vae-mdn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cvae-mdn" => Ok(ModelKind::CvaeMdn),
            "cvae" => Ok(ModelKind::Cvae),
            "vae-mdn" => Ok(ModelKind::VaeMdn),
            _ => Err(Error::Config(format!("unknown model {s:?} (cvae-mdn, cvae, vae-mdn)"))),
        }
    }

    fn code(self) -> u8 {
        match self {
            ModelKind::CvaeMdn => 0,
            ModelKind::Cvae => 1,
            ModelKind::VaeMdn => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        [ModelKind::CvaeMdn, ModelKind::Cvae, ModelKind::VaeMdn]
            .into_iter()
            .find(|k| k.code() == c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmenterSection {
    pub components: usize,
    pub latent: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub dropout: f64,
    pub full_covariance: bool,
    pub anti_degeneracy: bool,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_step: usize,
    pub gamma: f64,
}

impl Default for AugmenterSection {
    fn default() -> Self {
        let d = AugmenterConfig::default();
        AugmenterSection {
            components: d.components,
            latent: d.latent,
            encoder_hidden: d.encoder_hidden,
            decoder_hidden: d.decoder_hidden,
            dropout: d.dropout,
            full_covariance: true,
            anti_degeneracy: d.anti_degeneracy,
            epochs: d.epochs,
            batch: d.batch,
            lr: d.adam.lr,
            lr_step: d.lr_step,
            gamma: d.gamma,
        }
    }
}

impl AugmenterSection {
    pub fn to_config(&self, seed: u64) -> AugmenterConfig {
        AugmenterConfig {
            components: self.components,
            latent: self.latent,
            encoder_hidden: self.encoder_hidden.clone(),
            decoder_hidden: self.decoder_hidden.clone(),
            dropout: self.dropout,
            covariance: if self.full_covariance {
                CovarianceKind::Full
            } else {
                CovarianceKind::Diagonal
            },
            anti_degeneracy: self.anti_degeneracy,
            use_condition: true,
            epochs: self.epochs,
            batch: self.batch,
            adam: AdamConfig {
                lr: self.lr,
                ..Default::default()
            },
            lr_step: self.lr_step,
            gamma: self.gamma,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapperSection {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_step: usize,
    pub gamma: f64,
}

impl Default for MapperSection {
    fn default() -> Self {
        let d = MapperConfig::default();
        MapperSection {
            hidden: d.hidden,
            dropout: d.dropout,
            epochs: d.epochs,
            batch: d.batch,
            lr: d.adam.lr,
            lr_step: d.lr_step,
            gamma: d.gamma,
        }
    }
}

impl MapperSection {
    pub fn to_config(&self, seed: u64) -> MapperConfig {
        MapperConfig {
            hidden: self.hidden.clone(),
            dropout: self.dropout,
            log_inputs: true,
            epochs: self.epochs,
            batch: self.batch,
            adam: AdamConfig {
                lr: self.lr,
                ..Default::default()
            },
            lr_step: self.lr_step,
            gamma: self.gamma,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaSection {
    pub population: usize,
    pub iterations: usize,
    pub generations: usize,
    pub crossover: f64,
    pub mutation: f64,
    pub elitism: usize,
}

impl Default for GaSection {
    fn default() -> Self {
        let d = GaConfig::default();
        GaSection {
            population: d.population,
            iterations: d.iterations,
            generations: d.generations,
            crossover: d.crossover,
            mutation: d.mutation,
            elitism: d.elitism,
        }
    }
}

/// Experiment description as read from TOML. Combination indices are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// `desk` or `six-user`; ignored when `[scenario]` is given.
    pub preset: String,
    pub scenario: Option<ScenarioFile>,
    pub probes_per_ap: usize,
    pub combinations: usize,
    /// Combinations with real training data; empty means all.
    pub sampled_combos: Vec<usize>,
    pub location_sets: usize,
    /// `Ñ_l`, real training samples per sampled combination; 0 means all.
    pub train_per_combo: usize,
    /// `Ñ_l^aug`, generated samples per combination.
    pub augmented_per_combo: usize,
    /// Real test samples per combination used by MMD; 0 means all.
    pub test_per_combo: usize,
    /// Training sizes swept by `evaluate`.
    pub train_sizes: Vec<usize>,
    pub seed: u64,
    pub augmenter: AugmenterSection,
    pub mapper: MapperSection,
    pub ga: GaSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            preset: "desk".into(),
            scenario: None,
            probes_per_ap: 8,
            combinations: 8,
            sampled_combos: Vec::new(),
            location_sets: 200,
            train_per_combo: 0,
            augmented_per_combo: 100,
            test_per_combo: 0,
            train_sizes: vec![20, 40, 60, 80, 100],
            seed: 0,
            augmenter: AugmenterSection::default(),
            mapper: MapperSection::default(),
            ga: GaSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("experiment: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::Missing(path.into()))?;
        Self::from_toml_str(&text)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn ga_config(&self) -> GaConfig {
        GaConfig {
            population: self.ga.population,
            iterations: self.ga.iterations,
            generations: self.ga.generations,
            crossover: self.ga.crossover,
            mutation: self.ga.mutation,
            elitism: self.ga.elitism,
            seed: derive_seed(self.seed, stream::GA, 0),
            cover_all_codes: false,
        }
    }
}

/// A resolved experiment: scenario, candidate combinations and pipeline knobs.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub scenario: ScenarioConfig,
    pub probes: Vec<ProbingConfig>,
    pub params: PipelineParams,
    /// 0-based sampled combinations.
    pub sampled: Vec<usize>,
    pub hash: String,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let scenario = match &config.scenario {
            Some(file) => file.resolve()?,
            None => match config.preset.as_str() {
                "desk" => ScenarioConfig::desk(),
                "six-user" => ScenarioConfig::six_user(),
                p => return Err(Error::Config(format!("unknown preset {p:?} (desk, six-user)"))),
            },
        };
        if config.combinations == 0 {
            return Err(Error::Config("combinations must be positive".into()));
        }
        if config.location_sets < 3 {
            return Err(Error::Config("need at least three location sets".into()));
        }
        let probes =
            ProbingConfig::sector_layout(config.combinations, scenario.aps(), scenario.geometry, config.probes_per_ap)?;
        let sampled = if config.sampled_combos.is_empty() {
            (0..config.combinations).collect()
        } else {
            let mut s = Vec::new();
            for &c in &config.sampled_combos {
                if c == 0 || c > config.combinations {
                    return Err(Error::Config(format!(
                        "sampled combo {c} outside 1..={}",
                        config.combinations
                    )));
                }
                if !s.contains(&(c - 1)) {
                    s.push(c - 1);
                }
            }
            s.sort_unstable();
            s
        };
        config.augmenter.to_config(0).validate()?;
        config.ga_config().validate()?;
        let params = PipelineParams::for_scenario(&scenario);
        let hash = config.hash();
        Ok(Experiment {
            config,
            scenario,
            probes,
            params,
            sampled,
            hash,
        })
    }

    pub fn combinations(&self) -> usize {
        self.probes.len()
    }

    pub fn condition(&self, combo: usize) -> &[f64] {
        self.probes[combo].condition()
    }

    pub fn channel_seed(&self, location_set: usize) -> u64 {
        derive_seed(self.config.seed, stream::LOCATIONS, location_set as u64)
    }

    pub fn split_of(&self, location_set: usize) -> Split {
        Split::for_location_set(location_set, self.config.location_sets)
    }

    /// Labeled samples: sampled combinations on train/validation location
    /// sets, every combination on test location sets.
    pub fn generate_dataset(&self) -> Result<Vec<LabeledSample>> {
        let mut out = Vec::new();
        for s in 0..self.config.location_sets {
            let split = self.split_of(s);
            let ch = generate_channel(&self.scenario, self.channel_seed(s))?;
            for (l, probe) in self.probes.iter().enumerate() {
                if split != Split::Test && !self.sampled.contains(&l) {
                    continue;
                }
                let (pbm, rate) = evaluate_probing_config(&ch, probe, &self.params)?;
                out.push(LabeledSample {
                    location_set: s as u32,
                    combo: l as u32,
                    split,
                    pbm: pbm.into_values(),
                    sum_rate: rate,
                });
            }
        }
        Ok(out)
    }

    /// Mean pipeline and full-beamspace SBF sum-rates over the test split.
    pub fn compression_rates(&self, combo: usize) -> Result<(f64, f64)> {
        let full = self.params.uncompressed();
        let (mut a, mut b, mut n) = (0.0, 0.0, 0usize);
        for s in 0..self.config.location_sets {
            if self.split_of(s) != Split::Test {
                continue;
            }
            let ch = generate_channel(&self.scenario, self.channel_seed(s))?;
            a += evaluate_probing_config(&ch, &self.probes[combo], &self.params)?.1;
            b += evaluate_probing_config(&ch, &self.probes[combo], &full)?.1;
            n += 1;
        }
        Ok((a / n as f64, b / n as f64))
    }
}

/// Real data of one split, grouped per combination in location-set order.
pub fn by_combo(samples: &[LabeledSample], split: Split, combos: usize) -> Vec<Vec<&LabeledSample>> {
    let mut out = vec![Vec::new(); combos];
    let mut sorted: Vec<&LabeledSample> = samples.iter().filter(|s| s.split == split).collect();
    sorted.sort_by_key(|s| (s.combo, s.location_set));
    for s in sorted {
        if (s.combo as usize) < combos {
            out[s.combo as usize].push(s);
        }
    }
    out
}

fn cap(n: usize, limit: usize) -> usize {
    if limit == 0 {
        n
    } else {
        n.min(limit)
    }
}

/// Training and validation sets restricted to the sampled combinations,
/// with at most `per_combo` training samples each (0 keeps all).
pub fn training_sets(
    exp: &Experiment,
    samples: &[LabeledSample],
    per_combo: usize,
) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    let l = exp.combinations();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (split, dst, limit) in [
        (Split::Train, &mut train, per_combo),
        (Split::Validation, &mut val, 0),
    ] {
        for (combo, list) in by_combo(samples, split, l).into_iter().enumerate() {
            if !exp.sampled.contains(&combo) {
                continue;
            }
            let n = cap(list.len(), limit);
            dst.extend(list[..n].iter().map(|s| (*s).clone()));
        }
    }
    ensure_no_test(&train)?;
    ensure_no_test(&val)?;
    if train.is_empty() {
        return Err(Error::Config("no training samples for the sampled combinations".into()));
    }
    Ok((train, val))
}

/// One shared model, or one unconditioned model per sampled combination.
#[derive(Clone, Debug)]
pub struct AugmenterBank {
    pub kind: ModelKind,
    models: BTreeMap<Option<usize>, AugmenterModel>,
}

pub const BANK_MAGIC: &[u8; 4] = b"PBBK";

impl AugmenterBank {
    /// Model responsible for `combo`, if any.
    pub fn model_for(&self, combo: usize) -> Option<&AugmenterModel> {
        self.models.get(&None).or_else(|| self.models.get(&Some(combo)))
    }

    pub fn models(&self) -> impl Iterator<Item = (Option<usize>, &AugmenterModel)> {
        self.models.iter().map(|(k, v)| (*k, v))
    }

    pub fn generate(&self, exp: &Experiment, combo: usize, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let model = self.model_for(combo).ok_or_else(|| {
            Error::Config(format!(
                "{} has no model for unsampled combo {}",
                self.kind.tag(),
                combo + 1
            ))
        })?;
        Ok(model.generate(exp.condition(combo), n, seed)?.pbm)
    }

    pub fn write(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(BANK_MAGIC)?;
        put_u8(w, self.kind.code())?;
        put_u32(w, self.models.len() as u32)?;
        for (combo, m) in &self.models {
            put_u32(w, combo.map_or(0, |c| c as u32 + 1))?;
            m.write(w)?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BANK_MAGIC {
            return Err(Error::Config("not an augmenter checkpoint".into()));
        }
        let kind = ModelKind::from_code(get_u8(r)?).ok_or_else(|| Error::Config("unknown model kind".into()))?;
        let n = get_u32(r)?;
        let mut models = BTreeMap::new();
        for _ in 0..n {
            let c = get_u32(r)?;
            let combo = if c == 0 { None } else { Some(c as usize - 1) };
            models.insert(combo, AugmenterModel::read(r)?);
        }
        Ok(AugmenterBank { kind, models })
    }
}

fn pairs(exp: &Experiment, samples: &[LabeledSample]) -> Vec<(Vec<f64>, Vec<f64>)> {
    samples
        .iter()
        .map(|s| (s.pbm.clone(), exp.condition(s.combo as usize).to_vec()))
        .collect()
}

/// Trains the augmenter family `kind` on the given train/validation samples.
pub fn train_augmenter(
    exp: &Experiment,
    kind: ModelKind,
    train: &[LabeledSample],
    validation: &[LabeledSample],
    seed: u64,
) -> Result<(AugmenterBank, Vec<(Option<usize>, TrainingReport)>)> {
    ensure_no_test(train)?;
    ensure_no_test(validation)?;
    let base = exp.config.augmenter.to_config(seed);
    let mut models = BTreeMap::new();
    let mut reports = Vec::new();
    match kind {
        ModelKind::CvaeMdn | ModelKind::Cvae => {
            let cfg = if kind == ModelKind::Cvae { base.cvae_baseline() } else { base };
            let (m, rep) = AugmenterModel::train(&cfg, &pairs(exp, train), &pairs(exp, validation))?;
            models.insert(None, m);
            reports.push((None, rep));
        }
        ModelKind::VaeMdn => {
            let cfg = base.unconditioned();
            for &l in &exp.sampled {
                let only = |v: &[LabeledSample]| {
                    let sel: Vec<LabeledSample> = v.iter().filter(|s| s.combo as usize == l).cloned().collect();
                    pairs(exp, &sel)
                };
                let t = only(train);
                if t.is_empty() {
                    continue;
                }
                let cfg = AugmenterConfig {
                    seed: derive_seed(seed, stream::INIT, 100 + l as u64),
                    ..cfg.clone()
                };
                let (m, rep) = AugmenterModel::train(&cfg, &t, &only(validation))?;
                models.insert(Some(l), m);
                reports.push((Some(l), rep));
            }
        }
    }
    Ok((AugmenterBank { kind, models }, reports))
}

/// Trains a model with the condition input zeroed on all sampled combinations.
pub fn train_zero_condition(
    exp: &Experiment,
    train: &[LabeledSample],
    validation: &[LabeledSample],
    seed: u64,
) -> Result<AugmenterModel> {
    ensure_no_test(train)?;
    let cfg = exp.config.augmenter.to_config(seed).unconditioned();
    Ok(AugmenterModel::train(&cfg, &pairs(exp, train), &pairs(exp, validation))?.0)
}

pub fn train_mapper(
    exp: &Experiment,
    train: &[LabeledSample],
    validation: &[LabeledSample],
    seed: u64,
) -> Result<(RateMapperModel, MapperReport)> {
    ensure_no_test(train)?;
    ensure_no_test(validation)?;
    let ex = |v: &[LabeledSample]| -> Vec<RateExample> {
        v.iter()
            .map(|s| (s.pbm.clone(), exp.condition(s.combo as usize).to_vec(), s.sum_rate))
            .collect()
    };
    RateMapperModel::train(&exp.config.mapper.to_config(seed), &ex(train), &ex(validation))
}

/// Log-standardization fitted once on the full training split; every MMD
/// is computed in this space.
pub fn evaluation_transform(samples: &[LabeledSample]) -> Result<PbmTransform> {
    PbmTransform::fit(samples.iter().filter(|s| s.split == Split::Train).map(|s| s.pbm.as_slice()))
}

/// MMD between held-out real PBMs and `generated`, in the evaluation space.
pub fn combo_mmd(transform: &PbmTransform, real: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<f64> {
    let map = |v: &[Vec<f64>]| v.iter().map(|r| transform.forward(r)).collect::<Vec<_>>();
    let x = SampleSet::new(map(real), Provenance::Real)?;
    let y = SampleSet::new(map(generated), Provenance::Augmented)?;
    mmd_median(&x, &y)
}

/// Test-split PBMs of every combination, capped at `test_per_combo`.
pub fn test_pbms(exp: &Experiment, samples: &[LabeledSample]) -> Vec<Vec<Vec<f64>>> {
    by_combo(samples, Split::Test, exp.combinations())
        .into_iter()
        .map(|list| {
            let n = cap(list.len(), exp.config.test_per_combo);
            list[..n].iter().map(|s| s.pbm.clone()).collect()
        })
        .collect()
}

/// Per-combination MMD of a bank against the test split; `None` where the
/// bank has no model.
pub fn bank_mmd(
    exp: &Experiment,
    bank: &AugmenterBank,
    transform: &PbmTransform,
    test: &[Vec<Vec<f64>>],
    seed: u64,
) -> Result<Vec<Option<f64>>> {
    (0..exp.combinations())
        .map(|l| {
            if bank.model_for(l).is_none() || test[l].is_empty() {
                return Ok(None);
            }
            let gen = bank.generate(exp, l, test[l].len(), derive_seed(seed, stream::SAMPLING, l as u64))?;
            combo_mmd(transform, &test[l], &gen).map(Some)
        })
        .collect()
}

/// Mean test-split sum-rate of every combination.
pub fn true_means(exp: &Experiment, samples: &[LabeledSample]) -> Vec<f64> {
    by_combo(samples, Split::Test, exp.combinations())
        .into_iter()
        .map(|list| {
            if list.is_empty() {
                f64::NAN
            } else {
                list.iter().map(|s| s.sum_rate).sum::<f64>() / list.len() as f64
            }
        })
        .collect()
}

/// Everything the selection step produces.
#[derive(Clone, Debug)]
pub struct Selection {
    pub pool: CombinationPool,
    pub exhaustive: usize,
    pub ga: GaResult,
    /// Generated PBMs per combination.
    pub augmented_pbm: Vec<Vec<Vec<f64>>>,
}

/// Builds the fitness pool from real training rates and mapped augmented
/// PBMs, then selects by exhaustive scan and by GA.
pub fn select(
    exp: &Experiment,
    train: &[LabeledSample],
    bank: &AugmenterBank,
    mapper: &RateMapperModel,
    seed: u64,
) -> Result<Selection> {
    ensure_no_test(train)?;
    let l_total = exp.combinations();
    let mut sampled = vec![Vec::new(); l_total];
    for s in train {
        sampled[s.combo as usize].push(s.sum_rate);
    }
    let n_aug = exp.config.augmented_per_combo;
    let mut augmented = vec![Vec::new(); l_total];
    let mut augmented_pbm = vec![Vec::new(); l_total];
    for l in 0..l_total {
        if n_aug == 0 || bank.model_for(l).is_none() {
            continue;
        }
        let gen = bank.generate(exp, l, n_aug, derive_seed(seed, stream::SAMPLING, 1000 + l as u64))?;
        let rows: Vec<(&[f64], &[f64])> = gen.iter().map(|r| (r.as_slice(), exp.condition(l))).collect();
        augmented[l] = mapper.predict_batch(&rows)?;
        augmented_pbm[l] = gen;
    }
    let pool = CombinationPool::new(sampled, augmented)?;
    let exhaustive = exhaustive_select(&pool)?;
    let ga = ga_optimize(&pool, &exp.config.ga_config())?;
    Ok(Selection {
        pool,
        exhaustive,
        ga,
        augmented_pbm,
    })
}
