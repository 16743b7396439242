//! Regressor from a PBM vector and its probing condition to the sum-rate.

use std::io::{self, Read, Write};

use ndarray::Array2;
use rand::seq::SliceRandom;

use crate::augment::PbmTransform;
use crate::binio::*;
use crate::error::{check_len, Error, Result};
use crate::nn::{
    adam_step, backward, forward, read_net, step_lr_schedule, write_net, AdamConfig, AdamState, DenseNetSpec, Mode,
    ParameterSet,
};
use crate::rng::{derive_seed, rng_from_seed, stream};

pub const MAPPER_MAGIC: &[u8; 4] = b"PBRM";
pub const MAPPER_VERSION: u32 = 1;

/// One training example: PBM vector, condition, sum-rate label.
pub type RateExample = (Vec<f64>, Vec<f64>, f64);

#[derive(Clone, Debug, PartialEq)]
pub struct MapperConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    /// Log-standardize PBM inputs; plain standardization otherwise.
    pub log_inputs: bool,
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub lr_step: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for MapperConfig {
    fn default() -> Self {
        MapperConfig {
            hidden: vec![256, 128, 64],
            dropout: 0.3,
            log_inputs: true,
            epochs: 200,
            batch: 32,
            adam: AdamConfig::default(),
            lr_step: 50,
            gamma: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MapperReport {
    pub train_rmse: Vec<f64>,
    pub validation_rmse: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_validation_rmse: f64,
    pub aborted: Option<String>,
}

#[derive(Clone, Debug)]
pub struct RateMapperModel {
    spec: DenseNetSpec,
    params: ParameterSet,
    transform: PbmTransform,
    condition_width: usize,
    label_mean: f64,
    label_std: f64,
}

impl RateMapperModel {
    pub fn new(
        cfg: &MapperConfig,
        condition_width: usize,
        transform: PbmTransform,
        label_mean: f64,
        label_std: f64,
    ) -> Result<Self> {
        if !(label_std > 0.0 && label_mean.is_finite()) {
            return Err(Error::Config(format!("label statistics ({label_mean}, {label_std}) invalid")));
        }
        let mut widths = vec![transform.dim() + condition_width];
        widths.extend_from_slice(&cfg.hidden);
        widths.push(1);
        let spec = DenseNetSpec::mlp(widths, cfg.dropout)?;
        let params = ParameterSet::init(&spec, derive_seed(cfg.seed, stream::INIT, 2));
        Ok(RateMapperModel {
            spec,
            params,
            transform,
            condition_width,
            label_mean,
            label_std,
        })
    }

    pub fn spec(&self) -> &DenseNetSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn transform(&self) -> &PbmTransform {
        &self.transform
    }

    pub fn label_stats(&self) -> (f64, f64) {
        (self.label_mean, self.label_std)
    }

    fn input_row(&self, r: &[f64], condition: &[f64]) -> Result<Vec<f64>> {
        check_len("mapper PBM", self.transform.dim(), r.len())?;
        check_len("mapper condition", self.condition_width, condition.len())?;
        let mut row = self.transform.forward(r);
        row.extend_from_slice(condition);
        Ok(row)
    }

    fn inputs<'a>(&self, rows: impl Iterator<Item = (&'a [f64], &'a [f64])>) -> Result<Array2<f64>> {
        let data = rows
            .map(|(r, c)| self.input_row(r, c))
            .collect::<Result<Vec<_>>>()?;
        let n = data.len();
        let w = self.spec.input_width();
        Ok(Array2::from_shape_vec((n, w), data.concat()).expect("rectangular"))
    }

    /// Predicted sum-rate in bits/s/Hz, clamped at zero.
    pub fn predict(&self, r: &[f64], condition: &[f64]) -> Result<f64> {
        Ok(self.predict_batch(&[(r, condition)])?[0])
    }

    pub fn predict_batch(&self, rows: &[(&[f64], &[f64])]) -> Result<Vec<f64>> {
        let x = self.inputs(rows.iter().copied())?;
        let (out, _) = forward(&self.spec, &self.params, x.view(), Mode::Eval)?;
        Ok(out
            .column(0)
            .iter()
            .map(|v| (v * self.label_std + self.label_mean).max(0.0))
            .collect())
    }

    /// Squared error on the standardized label for one example (eval mode)
    /// and its parameter gradient.
    pub fn loss2(&self, r: &[f64], condition: &[f64], rate: f64) -> Result<(f64, Vec<f64>)> {
        let x = self.inputs(std::iter::once((r, condition)))?;
        let (out, tape) = forward(&self.spec, &self.params, x.view(), Mode::Eval)?;
        let diff = out[[0, 0]] - (rate - self.label_mean) / self.label_std;
        let grad_out = Array2::from_elem((1, 1), 2.0 * diff);
        let (grad, _) = backward(&self.spec, &self.params, &tape, grad_out.view())?;
        Ok((diff * diff, grad))
    }

    fn rmse(&self, data: &[RateExample]) -> Result<f64> {
        let mut acc = 0.0;
        for chunk in data.chunks(256) {
            let rows: Vec<(&[f64], &[f64])> = chunk.iter().map(|(r, c, _)| (r.as_slice(), c.as_slice())).collect();
            let x = self.inputs(rows.into_iter())?;
            let (out, _) = forward(&self.spec, &self.params, x.view(), Mode::Eval)?;
            for (o, (_, _, y)) in out.column(0).iter().zip(chunk) {
                acc += (o * self.label_std + self.label_mean - y).powi(2);
            }
        }
        Ok((acc / data.len() as f64).sqrt())
    }

    /// Mini-batch Adam on the squared error of standardized labels. Input
    /// and label statistics come from `train`; the model with the lowest
    /// validation RMSE (training RMSE without validation data) is returned.
    pub fn train(
        cfg: &MapperConfig,
        train: &[RateExample],
        validation: &[RateExample],
    ) -> Result<(RateMapperModel, MapperReport)> {
        let first = train
            .first()
            .ok_or_else(|| Error::Config("mapper training set is empty".into()))?;
        let pbms = train.iter().map(|(r, _, _)| r.as_slice());
        let transform = if cfg.log_inputs {
            PbmTransform::fit(pbms)?
        } else {
            PbmTransform::fit_linear(pbms)?
        };
        let n = train.len() as f64;
        let mean = train.iter().map(|e| e.2).sum::<f64>() / n;
        let var = train.iter().map(|e| (e.2 - mean).powi(2)).sum::<f64>() / n;
        let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        let mut model = RateMapperModel::new(cfg, first.1.len(), transform, mean, std)?;

        let x_all = model.inputs(train.iter().map(|(r, c, _)| (r.as_slice(), c.as_slice())))?;
        let y_all: Vec<f64> = train.iter().map(|e| (e.2 - mean) / std).collect();
        let score = |m: &RateMapperModel| {
            if validation.is_empty() {
                m.rmse(train)
            } else {
                m.rmse(validation)
            }
        };
        let mut report = MapperReport {
            best_validation_rmse: score(&model)?,
            ..Default::default()
        };
        let mut best = model.clone();
        let mut state = AdamState::new(model.params.len());
        let mut order: Vec<usize> = (0..train.len()).collect();
        'epochs: for epoch in 0..cfg.epochs {
            let lr = step_lr_schedule(cfg.adam.lr, cfg.lr_step, cfg.gamma, epoch);
            order.sort_unstable();
            order.shuffle(&mut rng_from_seed(derive_seed(cfg.seed, stream::SHUFFLE, 1 << 32 | epoch as u64)));
            let dropout_base = derive_seed(cfg.seed, stream::DROPOUT, 1 << 32 | epoch as u64);
            for (b, chunk) in order.chunks(cfg.batch.max(1)).enumerate() {
                let x = x_all.select(ndarray::Axis(0), chunk);
                let (out, tape) = forward(
                    &model.spec,
                    &model.params,
                    x.view(),
                    Mode::Train {
                        seed: derive_seed(dropout_base, b as u64, 0),
                    },
                )?;
                let scale = 2.0 / chunk.len() as f64;
                let grad_out = Array2::from_shape_fn((chunk.len(), 1), |(i, _)| scale * (out[[i, 0]] - y_all[chunk[i]]));
                let (grad, _) = backward(&model.spec, &model.params, &tape, grad_out.view())?;
                if grad.iter().any(|g| !g.is_finite()) {
                    report.aborted = Some(format!("epoch {epoch}: non-finite gradient"));
                    break 'epochs;
                }
                adam_step(&mut model.params, &grad, &mut state, &cfg.adam, lr)?;
            }
            let train_rmse = model.rmse(train)?;
            let val = score(&model)?;
            report.train_rmse.push(train_rmse);
            report.validation_rmse.push(val);
            if !val.is_finite() {
                report.aborted = Some(format!("epoch {epoch}: validation RMSE {val}"));
                break;
            }
            if val < report.best_validation_rmse {
                report.best_validation_rmse = val;
                report.best_epoch = Some(epoch);
                best = model.clone();
            }
        }
        Ok((best, report))
    }

    pub fn write(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(MAPPER_MAGIC)?;
        put_u32(w, MAPPER_VERSION)?;
        put_u64(w, self.condition_width as u64)?;
        put_f64(w, self.label_mean)?;
        put_f64(w, self.label_std)?;
        write_net(w, &self.spec, &self.params)?;
        self.transform.write(w)
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let bad = |d: &str| Error::format("<mapper checkpoint>", d);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAPPER_MAGIC {
            return Err(bad("bad magic"));
        }
        if get_u32(r)? != MAPPER_VERSION {
            return Err(bad("unsupported version"));
        }
        let condition_width = get_u64(r)? as usize;
        let label_mean = get_f64(r)?;
        let label_std = get_f64(r)?;
        let (spec, params) = read_net(r)?;
        let transform = PbmTransform::read(r)?;
        if spec.input_width() != transform.dim() + condition_width || spec.output_width() != 1 || !(label_std > 0.0) {
            return Err(bad("network widths disagree with the header"));
        }
        Ok(RateMapperModel {
            spec,
            params,
            transform,
            condition_width,
            label_mean,
            label_std,
        })
    }
}
