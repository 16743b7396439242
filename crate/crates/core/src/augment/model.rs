use std::io::{self, Read, Write};

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;

use super::mixture::{log_sum_exp, CovarianceKind, MixtureDensity, MixtureHead};
use super::transform::PbmTransform;
use super::{kl_to_standard_normal, LatentGaussian};
use crate::binio::*;
use crate::error::{check_len, Error, Result};
use crate::nn::{
    adam_step, backward, forward, read_net, step_lr_schedule, write_net, AdamConfig, AdamState, DenseNetSpec, Mode,
    ParameterSet,
};
use crate::rng::{derive_seed, rng_from_seed, standard_normal_vec, stream};

pub const AUG_MAGIC: &[u8; 4] = b"PBAG";
pub const AUG_VERSION: u32 = 1;

/// Architecture and training hyperparameters of the augmenter.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmenterConfig {
    /// Mixture components `G`.
    pub components: usize,
    /// Latent width `N_z`.
    pub latent: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub dropout: f64,
    pub covariance: CovarianceKind,
    /// Adds `−(1/G) Σ_g ln p_g` to the loss.
    pub anti_degeneracy: bool,
    /// When false the condition input is replaced by zeros.
    pub use_condition: bool,
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub lr_step: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for AugmenterConfig {
    fn default() -> Self {
        AugmenterConfig {
            components: 8,
            latent: 16,
            encoder_hidden: vec![128],
            decoder_hidden: vec![128],
            dropout: 0.3,
            covariance: CovarianceKind::Full,
            anti_degeneracy: true,
            use_condition: true,
            epochs: 200,
            batch: 32,
            adam: AdamConfig::default(),
            lr_step: 50,
            gamma: 0.5,
            seed: 0,
        }
    }
}

impl AugmenterConfig {
    /// Plain conditional VAE: one diagonal Gaussian, no anti-degeneracy term.
    pub fn cvae_baseline(mut self) -> Self {
        self.components = 1;
        self.covariance = CovarianceKind::Diagonal;
        self.anti_degeneracy = false;
        self
    }

    /// Mixture-density VAE without the condition input.
    pub fn unconditioned(mut self) -> Self {
        self.use_condition = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.components == 0 || self.latent == 0 || self.batch == 0 {
            return Err(Error::Config("components, latent and batch must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("schedule gamma {} outside (0, 1]", self.gamma)));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Batch-mean Loss₁ and its parts, with gradients for both networks.
#[derive(Clone, Debug)]
pub struct Loss1 {
    pub total: f64,
    pub nll: f64,
    pub kl: f64,
    pub anti_degeneracy: f64,
    pub encoder_grad: Vec<f64>,
    pub decoder_grad: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingReport {
    /// Mean training Loss₁ per epoch (train mode).
    pub train_loss: Vec<f64>,
    /// Validation Loss₁ per epoch (eval mode, fixed noise).
    pub validation_loss: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_validation_loss: f64,
    /// Set when training stopped on a non-finite loss.
    pub aborted: Option<String>,
}

/// Generated PBMs with the model log-density of each draw in the
/// standardized domain.
#[derive(Clone, Debug)]
pub struct Generated {
    pub pbm: Vec<Vec<f64>>,
    pub log_density: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AugmenterModel {
    head: MixtureHead,
    latent: usize,
    condition_width: usize,
    anti_degeneracy: bool,
    use_condition: bool,
    encoder_spec: DenseNetSpec,
    encoder: ParameterSet,
    decoder_spec: DenseNetSpec,
    decoder: ParameterSet,
    transform: PbmTransform,
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

impl AugmenterModel {
    /// Randomly initialized model for PBMs of length `transform.dim()`.
    pub fn new(cfg: &AugmenterConfig, condition_width: usize, transform: PbmTransform) -> Result<Self> {
        cfg.validate()?;
        let dim = transform.dim();
        let head = MixtureHead {
            components: cfg.components,
            dim,
            kind: cfg.covariance,
        };
        let encoder_spec = DenseNetSpec::mlp(
            widths(dim + condition_width, &cfg.encoder_hidden, 2 * cfg.latent),
            cfg.dropout,
        )?;
        let decoder_spec = DenseNetSpec::mlp(
            widths(cfg.latent + condition_width, &cfg.decoder_hidden, head.raw_width()),
            cfg.dropout,
        )?;
        let encoder = ParameterSet::init(&encoder_spec, derive_seed(cfg.seed, stream::INIT, 0));
        let decoder = ParameterSet::init(&decoder_spec, derive_seed(cfg.seed, stream::INIT, 1));
        Ok(AugmenterModel {
            head,
            latent: cfg.latent,
            condition_width,
            anti_degeneracy: cfg.anti_degeneracy,
            use_condition: cfg.use_condition,
            encoder_spec,
            encoder,
            decoder_spec,
            decoder,
            transform,
        })
    }

    pub fn head(&self) -> MixtureHead {
        self.head
    }

    pub fn dim(&self) -> usize {
        self.head.dim
    }

    pub fn latent(&self) -> usize {
        self.latent
    }

    pub fn condition_width(&self) -> usize {
        self.condition_width
    }

    pub fn uses_condition(&self) -> bool {
        self.use_condition
    }

    pub fn transform(&self) -> &PbmTransform {
        &self.transform
    }

    pub fn encoder_spec(&self) -> &DenseNetSpec {
        &self.encoder_spec
    }

    pub fn decoder_spec(&self) -> &DenseNetSpec {
        &self.decoder_spec
    }

    pub fn encoder_params(&self) -> &ParameterSet {
        &self.encoder
    }

    pub fn decoder_params(&self) -> &ParameterSet {
        &self.decoder
    }

    pub fn encoder_params_mut(&mut self) -> &mut ParameterSet {
        &mut self.encoder
    }

    pub fn decoder_params_mut(&mut self) -> &mut ParameterSet {
        &mut self.decoder
    }

    pub fn parameter_count(&self) -> usize {
        self.encoder.len() + self.decoder.len()
    }

    fn check_condition(&self, condition: &[f64]) -> Result<()> {
        check_len("augmenter condition", self.condition_width, condition.len())
    }

    /// Rows `[lead | condition]`, with the condition zeroed when unused.
    fn stack<'a>(&self, lead: ArrayView2<'_, f64>, conditions: impl Iterator<Item = &'a [f64]>) -> Array2<f64> {
        let (n, w) = lead.dim();
        let mut out = Array2::zeros((n, w + self.condition_width));
        out.slice_mut(s![.., ..w]).assign(&lead);
        if self.use_condition {
            for (mut row, c) in out.rows_mut().into_iter().zip(conditions) {
                for (o, v) in row.iter_mut().skip(w).zip(c) {
                    *o = *v;
                }
            }
        }
        out
    }

    fn latent_from_row(&self, row: &[f64]) -> Result<LatentGaussian> {
        let (mu, log_sigma) = row.split_at(self.latent);
        LatentGaussian::new(mu.to_vec(), log_sigma.iter().map(|v| v.exp()).collect())
    }

    /// Encoder posterior for one PBM vector (eval mode).
    pub fn encode(&self, r: &[f64], condition: &[f64]) -> Result<LatentGaussian> {
        check_len("augmenter PBM", self.dim(), r.len())?;
        self.check_condition(condition)?;
        let x = Array2::from_shape_vec((1, self.dim()), self.transform.forward(r)).expect("shape");
        let input = self.stack(x.view(), std::iter::once(condition));
        let (out, _) = forward(&self.encoder_spec, &self.encoder, input.view(), Mode::Eval)?;
        self.latent_from_row(out.row(0).as_slice().expect("contiguous"))
    }

    /// Mixture over the standardized PBM domain for latent `z` (eval mode).
    pub fn decode(&self, z: &[f64], condition: &[f64]) -> Result<MixtureDensity> {
        check_len("augmenter latent", self.latent, z.len())?;
        self.check_condition(condition)?;
        let z = Array2::from_shape_vec((1, self.latent), z.to_vec()).expect("shape");
        let input = self.stack(z.view(), std::iter::once(condition));
        let (raw, _) = forward(&self.decoder_spec, &self.decoder, input.view(), Mode::Eval)?;
        self.head.decode(raw.row(0).as_slice().expect("contiguous"))
    }

    /// Loss₁ of one PBM vector with explicit reparameterization noise, in
    /// eval mode.
    pub fn loss1(&self, r: &[f64], condition: &[f64], eps: &[f64]) -> Result<Loss1> {
        check_len("augmenter PBM", self.dim(), r.len())?;
        self.check_condition(condition)?;
        check_len("reparameterization noise", self.latent, eps.len())?;
        let x = Array2::from_shape_vec((1, self.dim()), self.transform.forward(r)).expect("shape");
        let eps = Array2::from_shape_vec((1, self.latent), eps.to_vec()).expect("shape");
        self.batch_loss(x.view(), &[condition], eps.view(), Mode::Eval, Mode::Eval, true)
    }

    /// Batch-mean Loss₁ on standardized inputs `x` (rows are samples).
    fn batch_loss(
        &self,
        x: ArrayView2<'_, f64>,
        conditions: &[&[f64]],
        eps: ArrayView2<'_, f64>,
        encoder_mode: Mode,
        decoder_mode: Mode,
        with_grad: bool,
    ) -> Result<Loss1> {
        let n = x.nrows();
        let nz = self.latent;
        let enc_in = self.stack(x, conditions.iter().copied());
        let (enc_out, enc_tape) = forward(&self.encoder_spec, &self.encoder, enc_in.view(), encoder_mode)?;
        let mu = enc_out.slice(s![.., ..nz]);
        let sigma = enc_out.slice(s![.., nz..]).mapv(f64::exp);
        let z = &mu + &(&eps * &sigma);
        let dec_in = self.stack(z.view(), conditions.iter().copied());
        let (raw, dec_tape) = forward(&self.decoder_spec, &self.decoder, dec_in.view(), decoder_mode)?;

        let scale = 1.0 / n as f64;
        let mut grad_raw = Array2::zeros(raw.dim());
        let (mut nll, mut anti, mut kl) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let xi = x.row(i).to_vec();
            let hl = self.head.loss(raw.row(i).as_slice().expect("contiguous"), &xi, self.anti_degeneracy)?;
            nll += hl.nll * scale;
            anti += hl.anti_degeneracy * scale;
            for (g, v) in grad_raw.row_mut(i).iter_mut().zip(&hl.grad) {
                *g = v * scale;
            }
            let lat = LatentGaussian {
                mu: mu.row(i).to_vec(),
                sigma: sigma.row(i).to_vec(),
            };
            kl += kl_to_standard_normal(&lat) * scale;
        }
        let total = nll + kl + anti;
        if !total.is_finite() {
            return Err(Error::NumericalInstability {
                component: 0,
                diag_min: f64::NAN,
                diag_max: f64::NAN,
                detail: format!("Loss₁ {total} (nll {nll}, kl {kl})"),
            });
        }
        if !with_grad {
            return Ok(Loss1 {
                total,
                nll,
                kl,
                anti_degeneracy: anti,
                encoder_grad: Vec::new(),
                decoder_grad: Vec::new(),
            });
        }

        let (decoder_grad, dec_in_grad) = backward(&self.decoder_spec, &self.decoder, &dec_tape, grad_raw.view())?;
        let dz = dec_in_grad.slice(s![.., ..nz]);
        let mut grad_enc = Array2::zeros(enc_out.dim());
        grad_enc.slice_mut(s![.., ..nz]).assign(&(&dz + &(&mu * scale)));
        let d_log_sigma = &(&dz * &eps) * &sigma + &sigma.mapv(|s| (s * s - 1.0) * scale);
        grad_enc.slice_mut(s![.., nz..]).assign(&d_log_sigma);
        let (encoder_grad, _) = backward(&self.encoder_spec, &self.encoder, &enc_tape, grad_enc.view())?;
        Ok(Loss1 {
            total,
            nll,
            kl,
            anti_degeneracy: anti,
            encoder_grad,
            decoder_grad,
        })
    }

    /// Mean eval-mode Loss₁ over standardized samples, with noise fixed by
    /// `seed`.
    fn evaluate_loss(&self, xs: &[Vec<f64>], conditions: &[&[f64]], batch: usize, seed: u64) -> Result<f64> {
        let mut acc = 0.0;
        for (b, start) in (0..xs.len()).step_by(batch).enumerate() {
            let end = (start + batch).min(xs.len());
            let x = rows(&xs[start..end]);
            let eps = noise(end - start, self.latent, derive_seed(seed, b as u64, 0));
            let l = self.batch_loss(x.view(), &conditions[start..end], eps.view(), Mode::Eval, Mode::Eval, false)?;
            acc += l.total * (end - start) as f64;
        }
        Ok(acc / xs.len() as f64)
    }

    /// Mini-batch Adam on Loss₁ with a step learning-rate schedule. The PBM
    /// transform is fitted on `train`; the returned model is the one with
    /// the lowest validation loss (training loss when `validation` is empty).
    pub fn train(
        cfg: &AugmenterConfig,
        train: &[(Vec<f64>, Vec<f64>)],
        validation: &[(Vec<f64>, Vec<f64>)],
    ) -> Result<(AugmenterModel, TrainingReport)> {
        let first = train
            .first()
            .ok_or_else(|| Error::Config("augmenter training set is empty".into()))?;
        let transform = PbmTransform::fit(train.iter().map(|(r, _)| r.as_slice()))?;
        let model = AugmenterModel::new(cfg, first.1.len(), transform)?;
        model.fit(cfg, train, validation)
    }

    /// Continues training this model (its transform is kept).
    pub fn fit(
        mut self,
        cfg: &AugmenterConfig,
        train: &[(Vec<f64>, Vec<f64>)],
        validation: &[(Vec<f64>, Vec<f64>)],
    ) -> Result<(AugmenterModel, TrainingReport)> {
        if train.is_empty() {
            return Err(Error::Config("augmenter training set is empty".into()));
        }
        for (r, c) in train.iter().chain(validation) {
            check_len("augmenter PBM", self.dim(), r.len())?;
            self.check_condition(c)?;
        }
        let xs: Vec<Vec<f64>> = train.iter().map(|(r, _)| self.transform.forward(r)).collect();
        let conds: Vec<&[f64]> = train.iter().map(|(_, c)| c.as_slice()).collect();
        let val_xs: Vec<Vec<f64>> = validation.iter().map(|(r, _)| self.transform.forward(r)).collect();
        let val_conds: Vec<&[f64]> = validation.iter().map(|(_, c)| c.as_slice()).collect();
        let val_seed = derive_seed(cfg.seed, stream::VALIDATION, 0);
        let score = |m: &AugmenterModel| -> Result<f64> {
            if val_xs.is_empty() {
                m.evaluate_loss(&xs, &conds, cfg.batch, val_seed)
            } else {
                m.evaluate_loss(&val_xs, &val_conds, cfg.batch, val_seed)
            }
        };

        let mut report = TrainingReport {
            best_validation_loss: f64::INFINITY,
            ..Default::default()
        };
        let mut best = self.clone();
        if let Ok(v) = score(&self) {
            report.best_validation_loss = v;
        }
        let mut enc_state = AdamState::new(self.encoder.len());
        let mut dec_state = AdamState::new(self.decoder.len());
        let mut order: Vec<usize> = (0..xs.len()).collect();

        'epochs: for epoch in 0..cfg.epochs {
            let lr = step_lr_schedule(cfg.adam.lr, cfg.lr_step, cfg.gamma, epoch);
            order.sort_unstable();
            order.shuffle(&mut rng_from_seed(derive_seed(cfg.seed, stream::SHUFFLE, epoch as u64)));
            let dropout_base = derive_seed(cfg.seed, stream::DROPOUT, epoch as u64);
            let eps_base = derive_seed(cfg.seed, stream::EPSILON, epoch as u64);
            let mut epoch_loss = 0.0;
            for (b, chunk) in order.chunks(cfg.batch).enumerate() {
                let batch_x: Vec<Vec<f64>> = chunk.iter().map(|&i| xs[i].clone()).collect();
                let batch_c: Vec<&[f64]> = chunk.iter().map(|&i| conds[i]).collect();
                let x = rows(&batch_x);
                let eps = noise(chunk.len(), self.latent, derive_seed(eps_base, b as u64, 0));
                let result = self.batch_loss(
                    x.view(),
                    &batch_c,
                    eps.view(),
                    Mode::Train {
                        seed: derive_seed(dropout_base, b as u64, 0),
                    },
                    Mode::Train {
                        seed: derive_seed(dropout_base, b as u64, 1),
                    },
                    true,
                );
                let loss = match result {
                    Ok(l) if l.encoder_grad.iter().chain(&l.decoder_grad).all(|g| g.is_finite()) => l,
                    Ok(l) => {
                        report.aborted = Some(format!("epoch {epoch}: non-finite gradient at loss {}", l.total));
                        break 'epochs;
                    }
                    Err(e) => {
                        report.aborted = Some(format!("epoch {epoch}: {e}"));
                        break 'epochs;
                    }
                };
                epoch_loss += loss.total * chunk.len() as f64;
                adam_step(&mut self.encoder, &loss.encoder_grad, &mut enc_state, &cfg.adam, lr)?;
                adam_step(&mut self.decoder, &loss.decoder_grad, &mut dec_state, &cfg.adam, lr)?;
            }
            report.train_loss.push(epoch_loss / xs.len() as f64);
            match score(&self) {
                Ok(v) => {
                    report.validation_loss.push(v);
                    if v < report.best_validation_loss {
                        report.best_validation_loss = v;
                        report.best_epoch = Some(epoch);
                        best = self.clone();
                    }
                }
                Err(e) => {
                    report.validation_loss.push(f64::NAN);
                    report.aborted = Some(format!("epoch {epoch}: validation {e}"));
                    break;
                }
            }
        }
        Ok((best, report))
    }

    /// Draws `n` PBM vectors for one probing condition: `z ∼ N(0, I)`,
    /// decode, sample the mixture, invert the transform.
    pub fn generate(&self, condition: &[f64], n: usize, seed: u64) -> Result<Generated> {
        self.check_condition(condition)?;
        let mut rng = rng_from_seed(derive_seed(seed, stream::SAMPLING, 0));
        let z = noise(n, self.latent, derive_seed(seed, stream::SAMPLING, 1));
        let input = self.stack(z.view(), std::iter::repeat(condition));
        let (raw, _) = forward(&self.decoder_spec, &self.decoder, input.view(), Mode::Eval)?;
        let mut pbm = Vec::with_capacity(n);
        let mut log_density = Vec::with_capacity(n);
        for row in raw.rows() {
            let mix = self.head.decode(row.as_slice().expect("contiguous"))?;
            let x = mix.sample_point(&mut rng);
            log_density.push(mix.log_density(&x));
            pbm.push(self.transform.inverse(&x));
        }
        Ok(Generated { pbm, log_density })
    }

    /// Importance-weighted estimate of `ln p(r | condition)` in PBM units,
    /// using the encoder posterior as proposal over `draws` latents.
    pub fn log_density(&self, r: &[f64], condition: &[f64], draws: usize, seed: u64) -> Result<f64> {
        let lat = self.encode(r, condition)?;
        let x = self.transform.forward(r);
        let eps = noise(draws.max(1), self.latent, seed);
        let mut z = eps.clone();
        for mut row in z.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = lat.mu()[j] + *v * lat.sigma()[j];
            }
        }
        let input = self.stack(z.view(), std::iter::repeat(condition));
        let (raw, _) = forward(&self.decoder_spec, &self.decoder, input.view(), Mode::Eval)?;
        let log_sigma: f64 = lat.sigma().iter().map(|s| s.ln()).sum();
        let mut terms = Vec::with_capacity(z.nrows());
        for i in 0..z.nrows() {
            let mix = self.head.decode(raw.row(i).as_slice().expect("contiguous"))?;
            // ln N(z; 0, I) − ln N(z; μ, σ²); the 2π constants cancel.
            let prior: f64 = z.row(i).iter().map(|v| -0.5 * v * v).sum();
            let proposal: f64 = eps.row(i).iter().map(|e| -0.5 * e * e).sum::<f64>() - log_sigma;
            terms.push(mix.log_density(&x) + prior - proposal);
        }
        Ok(log_sum_exp(&terms) - (terms.len() as f64).ln() + self.transform.log_jacobian(r))
    }

    pub fn write(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(AUG_MAGIC)?;
        put_u32(w, AUG_VERSION)?;
        put_u64(w, self.head.components as u64)?;
        put_u64(w, self.head.dim as u64)?;
        put_u64(w, self.latent as u64)?;
        put_u64(w, self.condition_width as u64)?;
        put_u8(w, matches!(self.head.kind, CovarianceKind::Full) as u8)?;
        put_u8(w, self.anti_degeneracy as u8)?;
        put_u8(w, self.use_condition as u8)?;
        write_net(w, &self.encoder_spec, &self.encoder)?;
        write_net(w, &self.decoder_spec, &self.decoder)?;
        self.transform.write(w)
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let bad = |d: String| Error::format("<augmenter checkpoint>", d);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != AUG_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = get_u32(r)?;
        if version != AUG_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let components = get_u64(r)? as usize;
        let dim = get_u64(r)? as usize;
        let latent = get_u64(r)? as usize;
        let condition_width = get_u64(r)? as usize;
        let kind = if get_u8(r)? == 1 {
            CovarianceKind::Full
        } else {
            CovarianceKind::Diagonal
        };
        let anti_degeneracy = get_u8(r)? == 1;
        let use_condition = get_u8(r)? == 1;
        let (encoder_spec, encoder) = read_net(r)?;
        let (decoder_spec, decoder) = read_net(r)?;
        let transform = PbmTransform::read(r)?;
        let head = MixtureHead { components, dim, kind };
        if encoder_spec.input_width() != dim + condition_width
            || encoder_spec.output_width() != 2 * latent
            || decoder_spec.input_width() != latent + condition_width
            || decoder_spec.output_width() != head.raw_width()
            || transform.dim() != dim
        {
            return Err(bad("network widths disagree with the header".into()));
        }
        Ok(AugmenterModel {
            head,
            latent,
            condition_width,
            anti_degeneracy,
            use_condition,
            encoder_spec,
            encoder,
            decoder_spec,
            decoder,
            transform,
        })
    }
}

fn rows(xs: &[Vec<f64>]) -> Array2<f64> {
    let d = xs.first().map_or(0, Vec::len);
    Array2::from_shape_vec((xs.len(), d), xs.concat()).expect("rectangular rows")
}

fn noise(n: usize, width: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_from_seed(seed);
    Array2::from_shape_vec((n, width), standard_normal_vec(&mut rng, n * width)).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{component_log_density, reparameterize};

    fn tiny(kind: CovarianceKind, g: usize, d: usize, nz: usize, cond: usize, anti: bool) -> AugmenterModel {
        let cfg = AugmenterConfig {
            components: g,
            latent: nz,
            encoder_hidden: vec![5],
            decoder_hidden: vec![6],
            covariance: kind,
            anti_degeneracy: anti,
            seed: 11,
            ..Default::default()
        };
        let mut m = AugmenterModel::new(&cfg, cond, PbmTransform::identity(d)).unwrap();
        // Non-zero biases and slopes away from the PReLU kink defaults.
        let mut rng = rng_from_seed(99);
        for p in [&mut m.encoder, &mut m.decoder] {
            let noise = standard_normal_vec(&mut rng, p.len());
            for (v, e) in p.values_mut().iter_mut().zip(noise) {
                *v += 0.1 * e;
            }
        }
        m
    }

    fn total(m: &AugmenterModel, r: &[f64], c: &[f64], eps: &[f64]) -> f64 {
        m.loss1(r, c, eps).unwrap().total
    }

    fn check_gradients(m: &mut AugmenterModel, r: &[f64], c: &[f64], eps: &[f64]) {
        let l = m.loss1(r, c, eps).unwrap();
        let h = 1e-5;
        for which in 0..2 {
            let analytic = if which == 0 { &l.encoder_grad } else { &l.decoder_grad };
            for i in 0..analytic.len() {
                let p = if which == 0 { m.encoder_params_mut() } else { m.decoder_params_mut() };
                let orig = p.values()[i];
                p.values_mut()[i] = orig + h;
                let plus = total(m, r, c, eps);
                let p = if which == 0 { m.encoder_params_mut() } else { m.decoder_params_mut() };
                p.values_mut()[i] = orig - h;
                let minus = total(m, r, c, eps);
                let p = if which == 0 { m.encoder_params_mut() } else { m.decoder_params_mut() };
                p.values_mut()[i] = orig;
                let fd = (plus - minus) / (2.0 * h);
                let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-6);
                assert!(rel <= 1e-4, "net {which} param {i}: {} vs {fd}", analytic[i]);
            }
        }
    }

    #[test]
    fn loss1_gradient_matches_finite_differences() {
        let mut m = tiny(CovarianceKind::Full, 2, 3, 2, 2, true);
        check_gradients(&mut m, &[0.3, 1.5, 0.8], &[0.2, -0.1], &[0.4, -1.2]);
        let mut m = tiny(CovarianceKind::Diagonal, 1, 3, 2, 0, false);
        check_gradients(&mut m, &[0.3, 1.5, 0.8], &[], &[0.9, 0.1]);
        let mut m = tiny(CovarianceKind::Full, 3, 2, 2, 1, true);
        check_gradients(&mut m, &[0.3, 1.5], &[0.7], &[-0.2, 0.5]);
    }

    #[test]
    fn single_component_identity() {
        let m = tiny(CovarianceKind::Full, 1, 3, 2, 1, true);
        let (r, c, eps) = ([0.1, 0.2, -0.4], [0.5], [0.3, -0.7]);
        let l = m.loss1(&r, &c, &eps).unwrap();
        let lat = m.encode(&r, &c).unwrap();
        let z = reparameterize(&lat, &eps).unwrap();
        let mix = m.decode(&z, &c).unwrap();
        let lp = component_log_density(mix.mean(0), mix.factor(0), &m.transform().forward(&r));
        assert!((l.total - (-2.0 * lp + kl_to_standard_normal(&lat))).abs() < 1e-10);
    }

    #[test]
    fn zero_weight_encoder_outputs_bias() {
        let mut m = tiny(CovarianceKind::Full, 1, 2, 2, 1, true);
        let spec = m.encoder_spec().clone();
        let (layout, len) = spec.layout();
        let mut values = vec![0.0; len];
        let last = layout.last().unwrap();
        let bias = [0.5, -1.0, 0.2, -0.3];
        values[last.bias..last.bias + 4].copy_from_slice(&bias);
        *m.encoder_params_mut() = ParameterSet::from_values(&spec, values).unwrap();
        let lat = m.encode(&[1.0, 2.0], &[3.0]).unwrap();
        assert_eq!(lat.mu(), &bias[..2]);
        assert!((lat.sigma()[0] - 0.2f64.exp()).abs() < 1e-15);
        assert!((lat.sigma()[1] - (-0.3f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn zeroed_condition_is_ignored() {
        let cfg = AugmenterConfig {
            components: 2,
            latent: 2,
            encoder_hidden: vec![4],
            decoder_hidden: vec![4],
            ..Default::default()
        }
        .unconditioned();
        let m = AugmenterModel::new(&cfg, 3, PbmTransform::identity(2)).unwrap();
        let a = m.decode(&[0.1, 0.2], &[1.0, 2.0, 3.0]).unwrap();
        let b = m.decode(&[0.1, 0.2], &[-5.0, 0.0, 9.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn clamp_boundary_stays_finite() {
        let mut m = tiny(CovarianceKind::Full, 1, 2, 1, 0, true);
        let spec = m.decoder_spec().clone();
        let (layout, len) = spec.layout();
        let mut values = vec![0.0; len];
        let last = layout.last().unwrap();
        // Drive every factor raw far past the clamp: point-mass limit.
        for v in &mut values[last.bias + 1 + 2..last.bias + last.fan_out] {
            *v = 50.0;
        }
        *m.decoder_params_mut() = ParameterSet::from_values(&spec, values).unwrap();
        let l = m.loss1(&[0.0, 0.0], &[], &[0.0]).unwrap();
        assert!(l.total.is_finite());
        assert!(l.decoder_grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny(CovarianceKind::Full, 2, 3, 2, 2, true);
        let mut buf = Vec::new();
        m.write(&mut buf).unwrap();
        let back = AugmenterModel::read(&mut buf.as_slice()).unwrap();
        let a = m.generate(&[0.1, 0.2], 5, 3).unwrap();
        let b = back.generate(&[0.1, 0.2], 5, 3).unwrap();
        assert_eq!(a.pbm, b.pbm);
        buf[0] = b'Z';
        assert!(AugmenterModel::read(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn generation_is_seeded_and_finite() {
        let m = tiny(CovarianceKind::Full, 3, 4, 2, 1, true);
        let a = m.generate(&[0.3], 50, 8).unwrap();
        let b = m.generate(&[0.3], 50, 8).unwrap();
        assert_eq!(a.pbm, b.pbm);
        assert!(a.log_density.iter().all(|v| v.is_finite()));
        assert!(a.pbm.iter().flatten().all(|v| *v >= 0.0));
        assert_ne!(a.pbm, m.generate(&[0.3], 50, 9).unwrap().pbm);
    }
}
