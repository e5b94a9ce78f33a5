//! Optimizers, the four training modes, early stopping and evaluation.
//!
//! All modes share one loop: shuffle the training windows, take mini-batches of
//! `batch_size` windows (every channel of a window becomes one row), take one Adam
//! step on the joint parameter vector, then score train/val/test and apply early
//! stopping on validation MSE. Grid search is the exception: it follows the
//! two-level candidate loop and returns a trajectory instead of a single model.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Tape};
use crate::data::{PreparedData, Scaler, WindowDataset};
use crate::error::{config_err, dim_err, Result};
use crate::models::{
    flatten_grads, flatten_params, load_flat_params, param_count, ModelConfig, Module, Predictor,
    ReconstructionNet,
};
use crate::scam_loss::{self, LossBreakdown, MaskSet};
use crate::sharpness::{lambda_max, HvpContext};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Windows per evaluation chunk; only affects memory, never results.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Supervised,
    GridSearch,
    CoObjective,
    #[default]
    Scam,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Supervised => "supervised",
            TrainMode::GridSearch => "grid_search",
            TrainMode::CoObjective => "co_objective",
            TrainMode::Scam => "scam",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "supervised" => Ok(TrainMode::Supervised),
            "grid_search" => Ok(TrainMode::GridSearch),
            "co_objective" => Ok(TrainMode::CoObjective),
            "scam" => Ok(TrainMode::Scam),
            _ => Err(config_err!("unknown training mode {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InnerOptimizer {
    #[default]
    Adam,
    Sgd,
}

/// Parameters of the candidate grid search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Number of candidates `N`.
    pub candidates: usize,
    /// Inner step cap `J`.
    pub inner_max_steps: usize,
    /// Inner stopping threshold `α` on the root-mean-square gradient entry.
    pub inner_grad_threshold: f64,
    /// Learning rate of the full-batch reconstruction step between candidates.
    pub outer_lr: f64,
    pub inner_optimizer: InnerOptimizer,
    /// Start the reconstruction network at the exact identity.
    pub identity_init: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            candidates: 10,
            inner_max_steps: 2000,
            inner_grad_threshold: 1e-3,
            outer_lr: 1e-2,
            inner_optimizer: InnerOptimizer::Adam,
            identity_init: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Log λ_max of the supervised loss on a fixed validation batch every epoch.
    pub track_sharpness: bool,
    pub sharpness_batch: usize,
    pub grid: GridConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Scam,
            lr: 1e-3,
            batch_size: 32,
            patience: 20,
            max_epochs: 100,
            seed: 0,
            track_sharpness: false,
            sharpness_batch: 512,
            grid: GridConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!("lr must be positive, got {}", self.lr));
        }
        if self.patience == 0 {
            return Err(config_err!("patience must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(config_err!("max_epochs must be at least 1"));
        }
        if self.track_sharpness && self.sharpness_batch == 0 {
            return Err(config_err!("sharpness_batch must be at least 1"));
        }
        let g = &self.grid;
        if g.candidates == 0 || g.inner_max_steps == 0 {
            return Err(config_err!("grid search needs at least one candidate and one inner step"));
        }
        if !(g.outer_lr > 0.0) || !(g.inner_grad_threshold >= 0.0) {
            return Err(config_err!("grid outer_lr must be positive and the threshold non-negative"));
        }
        Ok(())
    }
}

/// Bias-corrected Adam moments over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    /// Steps skipped because of non-finite gradients.
    pub skipped: usize,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            skipped: 0,
        }
    }
}

/// One Adam update in place. Returns `false` (and leaves everything untouched apart
/// from the skip counter) when any gradient entry is non-finite.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<bool> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(dim_err!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        state.skipped += 1;
        log::warn!("skipping optimizer step with non-finite gradient");
        return Ok(false);
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(true)
}

pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<bool> {
    if params.len() != grads.len() {
        return Err(dim_err!("sgd: {} params vs {} grads", params.len(), grads.len()));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Ok(false);
    }
    params.iter_mut().zip(grads).for_each(|(p, g)| *p -= lr * g);
    Ok(true)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

/// Metrics over every window, channel and horizon step of `data`, in standardized
/// units, or in raw units when a scaler is given.
pub fn evaluate_with(f: &Predictor, data: &WindowDataset, raw: Option<&Scaler>) -> Result<Metrics> {
    if data.horizon() != f.horizon {
        return Err(dim_err!("dataset horizon {} vs model horizon {}", data.horizon(), f.horizon));
    }
    let channels = data.channels();
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch(chunk);
        let pred = f.predict(&x)?;
        let h = f.horizon;
        for (k, (p, t)) in pred.data().iter().zip(y.data()).enumerate() {
            let (p, t) = match raw {
                Some(s) => {
                    let c = (k / h) % channels;
                    (s.inverse_value(c, *p), s.inverse_value(c, *t))
                }
                None => (*p, *t),
            };
            let d = p - t;
            se += d * d;
            ae += d.abs();
        }
        n += pred.len();
    }
    Ok(Metrics {
        mse: se / n as f64,
        mae: ae / n as f64,
    })
}

pub fn evaluate(f: &Predictor, data: &WindowDataset) -> Result<Metrics> {
    evaluate_with(f, data, None)
}

/// One row of the per-epoch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: Metrics,
    pub val: Metrics,
    pub test: Metrics,
    /// Mean optimized loss over the epoch's mini-batches.
    pub train_loss: f64,
    /// Point-weighted mean of per-batch breakdowns, for modes with a reconstruction.
    pub breakdown: Option<LossBreakdown>,
    pub lambda_max: Option<f64>,
    pub wall_time_s: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: [&'static str; 16] = [
        "epoch",
        "train_mse",
        "train_mae",
        "val_mse",
        "val_mae",
        "test_mse",
        "test_mae",
        "train_loss",
        "rec_corrected",
        "pred_corrected",
        "sup_in_mask",
        "sup_out_mask",
        "l_rec",
        "l_pred",
        "l_target",
        "lambda_max",
    ];

    /// CSV fields in [`Self::CSV_HEADER`] order. Wall time is deliberately absent so
    /// the file is reproducible byte for byte.
    pub fn csv_fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let b = self.breakdown;
        vec![
            self.epoch.to_string(),
            self.train.mse.to_string(),
            self.train.mae.to_string(),
            self.val.mse.to_string(),
            self.val.mae.to_string(),
            self.test.mse.to_string(),
            self.test.mae.to_string(),
            self.train_loss.to_string(),
            opt(b.map(|b| b.rec_corrected)),
            opt(b.map(|b| b.pred_corrected)),
            opt(b.map(|b| b.sup_in_mask)),
            opt(b.map(|b| b.sup_out_mask)),
            opt(b.map(|b| b.l_rec)),
            opt(b.map(|b| b.l_pred)),
            opt(b.map(|b| b.l_target)),
            opt(self.lambda_max),
        ]
    }
}

/// A finished training run with the best-validation parameters restored.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub predictor: Predictor,
    pub recon: Option<ReconstructionNet>,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub skipped_steps: usize,
}

impl TrainOutcome {
    pub fn best_record(&self) -> &EpochRecord {
        &self.records[self.best_epoch - 1]
    }
}

/// Which objective a joint step optimizes.
#[derive(Clone, Copy, Debug)]
pub enum JointLoss<'a> {
    CoObjective,
    /// Masks recomputed from the current forward pass.
    Scam,
    /// Masked loss with externally supplied masks over `[rows, S, H]`.
    FixedMasks(&'a MaskSet),
}

/// Gradients and diagnostics of one joint forward/backward pass.
#[derive(Clone, Debug)]
pub struct JointStep {
    pub loss: f64,
    pub grads_f: Vec<f64>,
    pub grads_g: Vec<f64>,
    pub masks: MaskSet,
    pub breakdown: LossBreakdown,
    /// Number of scored points (`rows · S · H`).
    pub points: usize,
}

pub fn joint_gradients(
    f: &Predictor,
    g: &ReconstructionNet,
    x: &Array,
    y: &Array,
    loss: JointLoss,
) -> Result<JointStep> {
    let mut tape = Tape::new();
    let fv = f.bind(&mut tape, true);
    let gv = g.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let pred = f.forward(&mut tape, &fv, xv)?;
    let out = g.forward(&mut tape, &gv, yv)?;
    let s = g.series();
    let pred_t = scam_loss::tile_series(&mut tape, pred, s)?;
    let y_t = scam_loss::tile_series(&mut tape, yv, s)?;
    let (recon_v, pred_v, y_v) = (tape.value(out.series), tape.value(pred_t), tape.value(y_t));
    let masks = scam_loss::compute_masks(recon_v, pred_v, y_v)?;
    let breakdown = scam_loss::loss_breakdown(recon_v, pred_v, y_v, &masks)?;
    let points = recon_v.len();
    let root = match loss {
        JointLoss::CoObjective => scam_loss::co_objective_loss(&mut tape, out.series, pred_t, y_t)?,
        JointLoss::Scam => scam_loss::scam_masked_loss(&mut tape, out.series, pred_t, y_t, &masks)?,
        JointLoss::FixedMasks(m) => scam_loss::scam_masked_loss(&mut tape, out.series, pred_t, y_t, m)?,
    };
    tape.backward(root)?;
    Ok(JointStep {
        loss: tape.value(root).item(),
        grads_f: flatten_grads::<Predictor>(&tape, &fv),
        grads_g: flatten_grads::<ReconstructionNet>(&tape, &gv),
        masks,
        breakdown,
        points,
    })
}

/// Gradient of the supervised ℓ1 loss `mean |y − f(x)|`, or of `mean |target − f(x)|`
/// averaged over candidates when `target` is `[rows, S, H]`.
pub fn predictor_gradients(f: &Predictor, x: &Array, target: &Array) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let fv = f.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let tv = tape.constant(target.clone());
    let pred = f.forward(&mut tape, &fv, xv)?;
    let pred = if target.ndim() == 3 {
        scam_loss::tile_series(&mut tape, pred, target.shape()[1])?
    } else {
        pred
    };
    let root = scam_loss::supervised_loss(&mut tape, pred, tv)?;
    tape.backward(root)?;
    Ok((tape.value(root).item(), flatten_grads::<Predictor>(&tape, &fv)))
}

/// Independent generator streams derived from a run seed.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;

/// Predictor and reconstruction network initialized from `seed`.
pub fn init_models(cfg: &ModelConfig, channels: usize, seed: u64) -> Result<(Predictor, ReconstructionNet)> {
    let mut rng = seeded_rng(seed, STREAM_INIT);
    let f = Predictor::new(cfg, channels, &mut rng)?;
    let g = ReconstructionNet::new(cfg, &mut rng)?;
    Ok((f, g))
}

/// Evenly spaced window indices, at most `count` of them.
pub fn spread_indices(len: usize, count: usize) -> Vec<usize> {
    if count >= len {
        return (0..len).collect();
    }
    (0..count).map(|i| i * len / count).collect()
}

fn check_data(data: &PreparedData, f: &Predictor, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if data.train.lookback() != f.lookback || data.train.horizon() != f.horizon {
        return Err(config_err!(
            "data windows {}→{} do not match model {}→{}",
            data.train.lookback(),
            data.train.horizon(),
            f.lookback,
            f.horizon
        ));
    }
    if data.train.is_empty() || data.val.is_empty() || data.test.is_empty() {
        return Err(config_err!("every split needs at least one window"));
    }
    Ok(())
}

fn fit(
    data: &PreparedData,
    mut f: Predictor,
    mut g: Option<ReconstructionNet>,
    cfg: &TrainConfig,
    joint: Option<JointLoss>,
) -> Result<TrainOutcome> {
    check_data(data, &f, cfg)?;
    let nf = param_count(&f);
    let mut params = flatten_params(&f);
    if let Some(g) = &g {
        params.extend(flatten_params(g));
    }
    let mut adam = AdamState::new(params.len());
    let mut shuffle = seeded_rng(cfg.seed, STREAM_SHUFFLE);
    let sharp_idx = spread_indices(data.val.len(), cfg.sharpness_batch);

    let mut records = Vec::new();
    let mut best: Option<(f64, usize, Predictor, Option<ReconstructionNet>)> = None;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut loss_weight) = (0.0, 0usize);
        let mut parts = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.train.batch(chunk);
            let grads = match (&g, joint) {
                (Some(gnet), Some(kind)) => {
                    let step = joint_gradients(&f, gnet, &x, &y, kind)?;
                    loss_sum += step.loss * step.points as f64;
                    loss_weight += step.points;
                    parts.push((step.breakdown, step.points));
                    let mut grads = step.grads_f;
                    grads.extend(step.grads_g);
                    grads
                }
                _ => {
                    let (loss, grads) = predictor_gradients(&f, &x, &y)?;
                    loss_sum += loss * y.len() as f64;
                    loss_weight += y.len();
                    grads
                }
            };
            adam_step(&mut params, &grads, &mut adam, cfg.lr)?;
            load_flat_params(&mut f, &params[..nf]);
            if let Some(g) = &mut g {
                load_flat_params(g, &params[nf..]);
            }
            f.refresh_spectral_state();
        }
        let lambda = if cfg.track_sharpness {
            let (x, y) = data.val.batch(&sharp_idx);
            let weights = Array::ones(y.shape());
            let ctx = HvpContext::for_predictor(&f, x, y, weights);
            Some(lambda_max(&ctx, cfg.seed)?.value)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            train: evaluate(&f, &data.train)?,
            val: evaluate(&f, &data.val)?,
            test: evaluate(&f, &data.test)?,
            train_loss: loss_sum / loss_weight as f64,
            breakdown: (!parts.is_empty()).then(|| LossBreakdown::weighted_mean(&parts)),
            lambda_max: lambda,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} val mse {:.5} test mse {:.5}",
            record.train_loss,
            record.val.mse,
            record.test.mse
        );
        let val = record.val.mse;
        records.push(record);
        if best.as_ref().is_none_or(|b| val < b.0) {
            best = Some((val, epoch, f.clone(), g.clone()));
        }
        let best_epoch = best.as_ref().map(|b| b.1).unwrap_or(epoch);
        if epoch - best_epoch >= cfg.patience {
            log::info!("early stop at epoch {epoch}; best epoch {best_epoch}");
            break;
        }
    }
    let (_, best_epoch, predictor, recon) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        predictor,
        recon,
        records,
        best_epoch,
        skipped_steps: adam.skipped,
    })
}

/// Mini-batch ℓ1 training of the predictor alone.
pub fn train_supervised(data: &PreparedData, f: Predictor, cfg: &TrainConfig) -> Result<TrainOutcome> {
    fit(data, f, None, cfg, None)
}

/// Joint single-step optimization of reconstruction and prediction losses.
pub fn train_co_objective(
    data: &PreparedData,
    g: ReconstructionNet,
    f: Predictor,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    fit(data, f, Some(g), cfg, Some(JointLoss::CoObjective))
}

/// Same loop as the co-objective, with the masked loss and masks refreshed every step.
pub fn train_scam(data: &PreparedData, g: ReconstructionNet, f: Predictor, cfg: &TrainConfig) -> Result<TrainOutcome> {
    fit(data, f, Some(g), cfg, Some(JointLoss::Scam))
}

/// One candidate of the grid search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    pub candidate: usize,
    /// Train-split means of `|ỹ − y|`, `|ỹ − ŷ|` and `|y − ŷ|` for the trained predictor.
    pub l_rec: f64,
    pub l_pred: f64,
    pub l_target: f64,
    pub test: Metrics,
    pub inner_steps: usize,
    pub final_grad_rms: f64,
}

#[derive(Clone, Debug)]
pub struct GridOutcome {
    pub records: Vec<GridRecord>,
    /// Reconstruction parameters each candidate was generated from.
    pub snapshots: Vec<ReconstructionNet>,
    pub predictors: Vec<Predictor>,
}

fn reconstruct_split(g: &ReconstructionNet, data: &WindowDataset) -> Result<Vec<(Vec<usize>, Array)>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    idx.chunks(EVAL_CHUNK)
        .map(|chunk| {
            let (_, y) = data.batch(chunk);
            Ok((chunk.to_vec(), g.reconstruct(&y)?.0))
        })
        .collect()
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

/// Candidate grid search: freeze `g` to relabel the training set, train a fresh
/// predictor on the relabeled targets, then take one full-batch gradient step on the
/// reconstruction loss before generating the next candidate.
pub fn train_grid_search(
    data: &PreparedData,
    mut g: ReconstructionNet,
    f_factory: impl Fn(u64) -> Result<Predictor>,
    cfg: &TrainConfig,
) -> Result<GridOutcome> {
    let grid = &cfg.grid;
    let mut out = GridOutcome {
        records: Vec::new(),
        snapshots: Vec::new(),
        predictors: Vec::new(),
    };
    let train = &data.train;
    for i in 0..grid.candidates {
        let labels = reconstruct_split(&g, train)?;
        let lookup: std::collections::HashMap<usize, (usize, usize)> = labels
            .iter()
            .enumerate()
            .flat_map(|(c, (chunk, _))| chunk.iter().enumerate().map(move |(k, w)| (*w, (c, k))))
            .collect();
        let series = g.series();
        let rows_per_window = train.channels();
        let (h, stride) = (g.horizon, series * g.horizon);
        let candidate_batch = |windows: &[usize]| -> Result<Array> {
            let mut data = Vec::with_capacity(windows.len() * rows_per_window * stride);
            for w in windows {
                let (c, k) = lookup[w];
                let block = rows_per_window * stride;
                data.extend_from_slice(&labels[c].1.data()[k * block..(k + 1) * block]);
            }
            Array::new(vec![windows.len() * rows_per_window, series, h], data)
        };

        let mut f = f_factory(cfg.seed.wrapping_add(i as u64))?;
        check_data(data, &f, cfg)?;
        let nf = param_count(&f);
        let mut params = flatten_params(&f);
        let mut adam = AdamState::new(nf);
        let mut shuffle = seeded_rng(cfg.seed.wrapping_add(i as u64), STREAM_SHUFFLE);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let (mut steps, mut grad_rms) = (0, f64::INFINITY);
        'inner: loop {
            order.shuffle(&mut shuffle);
            for chunk in order.chunks(cfg.batch_size) {
                if steps >= grid.inner_max_steps || grad_rms <= grid.inner_grad_threshold {
                    break 'inner;
                }
                let (x, _) = train.batch(chunk);
                let target = candidate_batch(chunk)?;
                let (_, grads) = predictor_gradients(&f, &x, &target)?;
                grad_rms = rms(&grads);
                match grid.inner_optimizer {
                    InnerOptimizer::Adam => adam_step(&mut params, &grads, &mut adam, cfg.lr)?,
                    InnerOptimizer::Sgd => sgd_step(&mut params, &grads, cfg.lr)?,
                };
                load_flat_params(&mut f, &params);
                f.refresh_spectral_state();
                steps += 1;
            }
        }

        // train-split losses of this candidate, plus the full-batch ℓ_rec gradient
        let (mut rec, mut prd, mut tgt, mut n) = (0.0, 0.0, 0.0, 0usize);
        let mut rec_grad = vec![0.0; param_count(&g)];
        for (chunk, recon) in &labels {
            let (x, y) = train.batch(chunk);
            let pred = f.predict(&x)?;
            let (pt, yt) = (
                scam_loss::tile_series_array(&pred, series)?,
                scam_loss::tile_series_array(&y, series)?,
            );
            let b = scam_loss::loss_breakdown(recon, &pt, &yt, &scam_loss::compute_masks(recon, &pt, &yt)?)?;
            let w = recon.len();
            rec += b.l_rec * w as f64;
            prd += b.l_pred * w as f64;
            tgt += b.l_target * w as f64;
            n += w;

            let mut tape = Tape::new();
            let gv = g.bind(&mut tape, true);
            let yv = tape.constant(y);
            let o = g.forward(&mut tape, &gv, yv)?;
            let y_t = scam_loss::tile_series(&mut tape, yv, series)?;
            let loss = scam_loss::supervised_loss(&mut tape, o.series, y_t)?;
            tape.backward(loss)?;
            for (acc, gi) in rec_grad.iter_mut().zip(flatten_grads::<ReconstructionNet>(&tape, &gv)) {
                *acc += gi * w as f64;
            }
        }
        let nf64 = n as f64;
        let record = GridRecord {
            candidate: i,
            l_rec: rec / nf64,
            l_pred: prd / nf64,
            l_target: tgt / nf64,
            test: evaluate(&f, &data.test)?,
            inner_steps: steps,
            final_grad_rms: grad_rms,
        };
        log::info!(
            "candidate {i}: l_rec {:.5} test mse {:.5} ({steps} inner steps)",
            record.l_rec,
            record.test.mse
        );
        out.records.push(record);
        out.snapshots.push(g.clone());
        out.predictors.push(f);

        rec_grad.iter_mut().for_each(|v| *v /= nf64);
        let mut phi = flatten_params(&g);
        sgd_step(&mut phi, &rec_grad, grid.outer_lr)?;
        load_flat_params(&mut g, &phi);
    }
    Ok(out)
}

/// Trains one seed of `cfg.mode` with freshly initialized models. Grid search is
/// not a single-model mode and is rejected here.
pub fn train_mode(data: &PreparedData, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let (f, g) = init_models(model, data.train.channels(), cfg.seed)?;
    match cfg.mode {
        TrainMode::Supervised => train_supervised(data, f, cfg),
        TrainMode::CoObjective => train_co_objective(data, g, f, cfg),
        TrainMode::Scam => train_scam(data, g, f, cfg),
        TrainMode::GridSearch => Err(config_err!("grid search produces a trajectory; use train_grid_search")),
    }
}
