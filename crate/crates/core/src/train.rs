//! Loss, Adam, the epoch loop with early stopping, grid search and
//! evaluation metrics.

use std::fmt::Write as _;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Sample, SPEED_DIVISOR};
use crate::error::{Error, Result};
use crate::layers::NormMode;
use crate::model::{Model, HEAD};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub adam: AdamParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.003,
            l2: 0.0002,
            batch_size: 4,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            shuffle: true,
            adam: AdamParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.learning_rate)));
        }
        if self.l2 < 0.0 || self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "l2 must be nonnegative; batch size, patience and epochs at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub params: AdamParams,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(params: AdamParams, shapes: &[&[usize]]) -> Self {
        Self {
            params,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) {
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let AdamParams { beta1, beta2, epsilon } = self.params;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= lr * mh / (vh.sqrt() + epsilon);
            }
        }
    }
}

/// Mean squared residual plus `l2 * sum(w^2)` over `penalized`.
pub fn loss(g: &mut Graph, pred: Var, target: Var, penalized: Option<Var>, l2: f64) -> Result<Var> {
    let r = g.sub(pred, target)?;
    let sq = g.mul(r, r)?;
    let mse = g.mean(sq)?;
    match penalized {
        Some(w) if l2 > 0.0 => {
            let w2 = g.mul(w, w)?;
            let s = g.sum(w2)?;
            let pen = g.scale(s, l2)?;
            g.add(mse, pen)
        }
        _ => Ok(mse),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,train_loss,val_mse,val_mae";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.train_loss, self.val_mse, self.val_mae)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl FitResult {
    pub fn best(&self) -> &EpochRecord {
        &self.history[self.best_epoch - 1]
    }

    pub fn epoch_log(&self) -> String {
        let mut s = format!("{EPOCH_LOG_HEADER}\n");
        for r in &self.history {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

fn param_norms(model: &Model) -> String {
    let mut s = String::new();
    for e in model.params().entries().iter().filter(|e| e.trainable) {
        let _ = write!(s, "{}={:.4e} ", e.key(), e.value.norm());
    }
    s.trim_end().to_string()
}

/// One optimizer step on `batch`; returns the loss before the update.
fn train_step(model: &mut Model, adam: &mut Adam, batch: &Batch, cfg: &TrainConfig) -> Result<f64> {
    let mut g = Graph::new();
    let fwd = model.forward_graph(&mut g, batch, NormMode::Train, true)?;
    let target = g.constant(batch.target.clone());
    let head = model
        .params()
        .position(HEAD, "kernel")
        .and_then(|i| fwd.param_vars[i]);
    let l = loss(&mut g, fwd.output, target, head, cfg.l2)?;
    let value = g.value(l).item().expect("scalar loss");
    if !value.is_finite() {
        return Ok(value);
    }
    g.backward(l)?;
    let entries: Vec<usize> = (0..fwd.param_vars.len()).filter(|&i| fwd.param_vars[i].is_some()).collect();
    let grads: Vec<Tensor> = entries
        .iter()
        .map(|&i| {
            let v = fwd.param_vars[i].expect("trainable");
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
        })
        .collect();
    if grads.iter().any(|t| !t.is_finite()) {
        return Ok(f64::NAN);
    }
    let mut params: Vec<&mut Tensor> = model
        .params_mut()
        .entries_mut()
        .iter_mut()
        .filter(|e| e.trainable)
        .map(|e| &mut e.value)
        .collect();
    let grad_refs: Vec<&Tensor> = grads.iter().collect();
    adam.step(&mut params, &grad_refs, cfg.learning_rate);
    model.update_batch_stats(&fwd.bn_stats);
    Ok(value)
}

/// Train with seeded shuffling and early stopping on validation MSE; the
/// model ends up holding the best epoch's parameters. `on_epoch` sees each
/// record as it is produced.
pub fn fit(
    model: &mut Model,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitResult> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation sets must be nonempty".into()));
    }
    model.set_l2(cfg.l2);
    let shapes: Vec<Vec<usize>> = model
        .params()
        .entries()
        .iter()
        .filter(|e| e.trainable)
        .map(|e| e.value.shape().to_vec())
        .collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut adam = Adam::new(cfg.adam, &shape_refs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = Batch::from_samples(&refs)?;
            let l = train_step(model, &mut adam, &batch, cfg)?;
            if !l.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b + 1,
                    norms: param_norms(model),
                });
            }
            total += l * chunk.len() as f64;
        }
        let report = evaluate(model, val)?;
        let rec = EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            val_mse: report.mse,
            val_mae: report.mae,
        };
        on_epoch(&rec);
        history.push(rec);
        if best.as_ref().map_or(true, |(m, _, _)| report.mse < *m) {
            best = Some((report.mse, epoch, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch ran");
    *model = best_model;
    Ok(FitResult {
        history,
        best_epoch,
        stopped_early,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub day: usize,
    pub date: NaiveDate,
    pub target_slot: usize,
    pub site: usize,
    pub observed: f64,
    pub predicted: f64,
}

impl Prediction {
    pub fn residual(&self) -> f64 {
        self.observed - self.predicted
    }
}

/// Errors in normalized speed units, with mph equivalents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mse: f64,
    pub mae: f64,
    pub mse_mph: f64,
    pub mae_mph: f64,
    pub n_predictions: usize,
    pub predictions: Vec<Prediction>,
}

impl EvalReport {
    /// Score `preds[i]` (shape `[sites, 1]`) against `samples[i].target`.
    pub fn from_predictions(samples: &[Sample], preds: &[Tensor]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("cannot evaluate an empty sample set".into()));
        }
        if samples.len() != preds.len() {
            return Err(Error::invalid(format!(
                "{} samples but {} predictions",
                samples.len(),
                preds.len()
            )));
        }
        let mut predictions = Vec::new();
        let (mut se, mut ae) = (0.0, 0.0);
        for (s, p) in samples.iter().zip(preds) {
            if p.shape() != s.target.shape() {
                return Err(Error::shape("evaluate", p.shape(), s.target.shape()));
            }
            for (site, (&y, &yhat)) in s.target.data().iter().zip(p.data()).enumerate() {
                let r = y - yhat;
                se += r * r;
                ae += r.abs();
                predictions.push(Prediction {
                    day: s.anchor.day,
                    date: s.anchor.date,
                    target_slot: s.anchor.target_slot,
                    site,
                    observed: y,
                    predicted: yhat,
                });
            }
        }
        let n = predictions.len() as f64;
        let (mse, mae) = (se / n, ae / n);
        Ok(Self {
            mse,
            mae,
            mse_mph: mse * SPEED_DIVISOR * SPEED_DIVISOR,
            mae_mph: mae * SPEED_DIVISOR,
            n_predictions: predictions.len(),
            predictions,
        })
    }

    pub fn predictions_csv(&self) -> String {
        let mut s = String::from("date,target_slot,site,observed,predicted,residual\n");
        for p in &self.predictions {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                p.date,
                p.target_slot,
                p.site,
                p.observed,
                p.predicted,
                p.residual()
            );
        }
        s
    }
}

pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<EvalReport> {
    if samples.iter().any(|s| !s.scaled) {
        return Err(Error::Data("evaluation samples must be scaled".into()));
    }
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty sample set".into()));
    }
    let preds = model.predict(samples)?;
    EvalReport::from_predictions(samples, &preds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub learning_rates: Vec<f64>,
    pub l2s: Vec<f64>,
    pub batch_sizes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub learning_rate: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub val_mse: f64,
    pub epochs: usize,
}

/// Train every grid point for at most `epochs` epochs and rank by the best
/// validation MSE. Ties keep the earlier grid point.
pub fn grid_search(
    mut factory: impl FnMut() -> Result<Model>,
    grid: &Grid,
    base: &TrainConfig,
    epochs: usize,
    train: &[Sample],
    val: &[Sample],
) -> Result<(TrainConfig, Vec<GridRow>)> {
    if grid.learning_rates.is_empty() || grid.l2s.is_empty() || grid.batch_sizes.is_empty() {
        return Err(Error::Config("grid search needs at least one value per axis".into()));
    }
    let mut rows = Vec::new();
    let mut best: Option<(f64, TrainConfig)> = None;
    for &lr in &grid.learning_rates {
        for &l2 in &grid.l2s {
            for &bs in &grid.batch_sizes {
                let cfg = TrainConfig {
                    learning_rate: lr,
                    l2,
                    batch_size: bs,
                    max_epochs: epochs,
                    ..base.clone()
                };
                let mut model = factory()?;
                let res = fit(&mut model, train, val, &cfg, |_| {})?;
                let mse = res.best().val_mse;
                rows.push(GridRow {
                    learning_rate: lr,
                    l2,
                    batch_size: bs,
                    val_mse: mse,
                    epochs: res.history.len(),
                });
                if best.as_ref().map_or(true, |(m, _)| mse < *m) {
                    best = Some((mse, TrainConfig { max_epochs: base.max_epochs, ..cfg }));
                }
            }
        }
    }
    Ok((best.expect("nonempty grid").1, rows))
}
