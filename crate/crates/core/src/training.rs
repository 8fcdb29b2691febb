//! Mini-batch AdaGrad on the regularized squared error, early stopping on
//! validation MSE, and grid search over model hyperparameters.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::models::{Gradient, Model, ModelConfig, ModelKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// L2 strength.
    pub l2: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Shuffling seed.
    pub seed: u64,
    pub epsilon: f64,
    /// Penalize bias terms too.
    pub regularize_biases: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            l2: 1e-5,
            lr: 0.005,
            batch_size: 32,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            epsilon: 1e-8,
            regularize_biases: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        if self.l2.is_nan() || self.l2 < 0.0 {
            return Err(Error::Config(format!("l2 must be >= 0, got {}", self.l2)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Per-parameter AdaGrad state.
#[derive(Clone, Debug)]
pub struct AdaGrad {
    pub lr: f64,
    pub epsilon: f64,
    accum: Vec<f64>,
}

impl AdaGrad {
    pub fn new(len: usize, lr: f64, epsilon: f64) -> Self {
        AdaGrad {
            lr,
            epsilon,
            accum: vec![0.0; len],
        }
    }

    /// `G += g^2; theta -= lr * g / (sqrt(G) + eps)` over touched entries.
    pub fn step(&mut self, params: &mut [f64], grad: &Gradient) {
        for &i in grad.touched() {
            let g = grad.get(i);
            self.accum[i] += g * g;
            params[i] -= self.lr * g / (self.accum[i].sqrt() + self.epsilon);
        }
    }

    pub fn accumulators(&self) -> &[f64] {
        &self.accum
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the initial model.
    pub epoch: usize,
    pub train_mse: f64,
    pub validation_mse: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Snapshot with the lowest validation MSE.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn best_validation_mse(&self) -> f64 {
        self.history[self.best_epoch].validation_mse
    }
}

pub fn predict_all(model: &Model, samples: &[Sample]) -> Result<Vec<f64>> {
    samples.iter().map(|s| model.predict(&s.context)).collect()
}

pub fn mse(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut sse = 0.0;
    for s in samples {
        let r = model.predict(&s.context)? - s.actual;
        sse += r * r;
    }
    Ok(sse / samples.len() as f64)
}

/// `(1 / 2N) * sum (g - g_hat)^2 + lambda * ||theta||^2`.
pub fn objective(model: &Model, samples: &[Sample], cfg: &TrainConfig) -> Result<f64> {
    Ok(0.5 * mse(model, samples)? + model.penalty(cfg.l2, cfg.regularize_biases))
}

/// One mini-batch update. The data term is averaged over the batch; the L2
/// term is applied to the parameters the batch touched.
pub fn train_batch(
    model: &mut Model,
    batch: &[&Sample],
    cfg: &TrainConfig,
    optimizer: &mut AdaGrad,
    grad: &mut Gradient,
    penalty_mask: &[bool],
) -> Result<()> {
    grad.clear();
    let scale = 1.0 / batch.len() as f64;
    for sample in batch {
        let trace = model.forward(&sample.context)?;
        let residual = trace.prediction - sample.actual;
        model.backward(&sample.context, &trace, residual * scale, grad);
    }
    if cfg.l2 > 0.0 {
        let touched = grad.touched().to_vec();
        for i in touched {
            if penalty_mask[i] {
                grad.add(i, 2.0 * cfg.l2 * model.params[i]);
            }
        }
    }
    optimizer.step(&mut model.params, grad);
    Ok(())
}

/// Trains `model` in place from its current parameters and returns the best
/// snapshot by validation MSE (training MSE when there is no validation set).
pub fn train(
    mut model: Model,
    train_set: &[Sample],
    validation: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if validation.is_empty() {
        log::warn!("no validation targets; selecting the snapshot by training MSE");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = AdaGrad::new(model.params.len(), cfg.lr, cfg.epsilon);
    let mut grad = Gradient::new(model.params.len());
    let mask = model.layout.penalty_mask(cfg.regularize_biases);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let evaluate = |model: &Model, epoch: usize| -> Result<EpochRecord> {
        let train_mse = mse(model, train_set)?;
        if !train_mse.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: train_mse,
            });
        }
        let validation_mse = if validation.is_empty() {
            train_mse
        } else {
            mse(model, validation)?
        };
        Ok(EpochRecord {
            epoch,
            train_mse,
            validation_mse,
        })
    };

    let mut history = vec![evaluate(&model, 0)?];
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            train_batch(&mut model, &batch, cfg, &mut optimizer, &mut grad, &mask)?;
        }
        let record = evaluate(&model, epoch)?;
        log::debug!(
            "epoch {epoch}: train {:.6} validation {:.6}",
            record.train_mse,
            record.validation_mse
        );
        history.push(record);
        if record.validation_mse < history[best_epoch].validation_mse {
            best = model.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch,
    })
}

/// Loss history as a tab-separated table.
pub fn history_tsv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch\ttrain_mse\tvalidation_mse\n");
    for r in history {
        let _ = writeln!(out, "{}\t{}\t{}", r.epoch, r.train_mse, r.validation_mse);
    }
    out
}

pub fn parse_history_tsv(text: &str) -> Result<Vec<EpochRecord>> {
    let bad = |line: usize, msg: String| Error::Parse {
        line: line as u64,
        message: msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "epoch\ttrain_mse\tvalidation_mse")) => {}
        _ => return Err(bad(1, "missing history header".into())),
    }
    lines
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(bad(i + 1, format!("expected 3 columns: {line}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(i + 1, e.to_string()));
            Ok(EpochRecord {
                epoch: cols[0].parse().map_err(|e| bad(i + 1, format!("{e}")))?,
                train_mse: num(cols[1])?,
                validation_mse: num(cols[2])?,
            })
        })
        .collect()
}

/// Candidate values per hyperparameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: Vec<usize>,
    pub l2s: Vec<f64>,
    pub lrs: Vec<f64>,
    pub attn_dims: Vec<usize>,
    pub gammas: Vec<f64>,
    pub decays: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            dims: vec![8, 16, 32],
            l2s: vec![1e-5, 1e-7, 1e-3],
            lrs: vec![0.0007, 0.001, 0.003, 0.005, 0.007],
            attn_dims: vec![1, 2, 3, 4],
            gammas: vec![0.5, 0.9],
            decays: vec![0.0, 0.3, 0.5, 0.7, 1.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub dim: usize,
    pub l2: f64,
    pub lr: f64,
    pub attn_dim: usize,
    pub gamma: f64,
    pub decay: f64,
}

impl GridPoint {
    pub fn apply(&self, model: &mut ModelConfig, train: &mut TrainConfig) {
        model.dim = self.dim;
        model.attn_dim = self.attn_dim;
        model.gamma = self.gamma;
        model.decay = self.decay;
        train.l2 = self.l2;
        train.lr = self.lr;
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let empty = [
            ("dims", self.dims.is_empty()),
            ("l2s", self.l2s.is_empty()),
            ("lrs", self.lrs.is_empty()),
            ("attn_dims", self.attn_dims.is_empty()),
            ("gammas", self.gammas.is_empty()),
            ("decays", self.decays.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::Config(format!("grid list '{name}' is empty")));
        }
        Ok(())
    }

    /// Cartesian product over the axes `kind` uses. Axes it ignores are
    /// pinned to their first value.
    pub fn points(&self, kind: ModelKind) -> Vec<GridPoint> {
        let pick = |used: bool, n: usize| if used { n } else { 1 };
        let n_attn = pick(kind.is_attentive(), self.attn_dims.len());
        let n_gamma = pick(kind.uses_gamma(), self.gammas.len());
        let n_decay = pick(kind.uses_decay(), self.decays.len());
        let mut out = Vec::new();
        for &dim in &self.dims {
            for &l2 in &self.l2s {
                for &lr in &self.lrs {
                    for &attn_dim in &self.attn_dims[..n_attn] {
                        for &gamma in &self.gammas[..n_gamma] {
                            for &decay in &self.decays[..n_decay] {
                                out.push(GridPoint {
                                    dim,
                                    l2,
                                    lr,
                                    attn_dim,
                                    gamma,
                                    decay,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct GridRow {
    pub point: GridPoint,
    /// Best validation MSE, or the training error message.
    pub result: std::result::Result<f64, String>,
    pub best_epoch: usize,
}

#[derive(Clone, Debug)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
    /// Index of the winning row.
    pub best: usize,
}

impl GridReport {
    pub fn best_point(&self) -> GridPoint {
        self.rows[self.best].point
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "dim\tl2\tlr\tattn_dim\tgamma\tdecay\tvalidation_mse\tbest_epoch\tstatus\n",
        );
        for row in &self.rows {
            let p = row.point;
            let (mse, status) = match &row.result {
                Ok(m) => (format!("{m}"), "ok".to_string()),
                Err(e) => ("NaN".to_string(), e.replace(['\t', '\n'], " ")),
            };
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                p.dim, p.l2, p.lr, p.attn_dim, p.gamma, p.decay, mse, row.best_epoch, status
            );
        }
        out
    }
}

/// Trains one model per grid point (in parallel) and picks the lowest
/// validation MSE; ties go to the smaller dimension, then the smaller L2.
/// Failing points are recorded and skipped.
pub fn grid_search(
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    grid: &GridSpec,
    n_courses: usize,
    n_students: usize,
    train_set: &[Sample],
    validation: &[Sample],
) -> Result<GridReport> {
    grid.validate()?;
    let points = grid.points(base_model.kind);
    let rows: Vec<GridRow> = points
        .par_iter()
        .map(|point| {
            let mut mcfg = base_model.clone();
            let mut tcfg = base_train.clone();
            point.apply(&mut mcfg, &mut tcfg);
            let run = Model::init(mcfg, n_courses, n_students)
                .and_then(|m| train(m, train_set, validation, &tcfg));
            match run {
                Ok(outcome) => GridRow {
                    point: *point,
                    result: Ok(outcome.best_validation_mse()),
                    best_epoch: outcome.best_epoch,
                },
                Err(e) => {
                    log::warn!("grid point {point:?} failed: {e}");
                    GridRow {
                        point: *point,
                        result: Err(e.to_string()),
                        best_epoch: 0,
                    }
                }
            }
        })
        .collect();
    let best = select_best(&rows).ok_or_else(|| Error::Config("every grid point failed".into()))?;
    Ok(GridReport { rows, best })
}

/// Lowest finite validation MSE; ties go to the smaller dimension, then the
/// smaller L2, then grid order.
pub fn select_best(rows: &[GridRow]) -> Option<usize> {
    rows.iter()
        .enumerate()
        .filter_map(|(i, r)| {
            r.result
                .as_ref()
                .ok()
                .filter(|m| m.is_finite())
                .map(|&m| (i, m))
        })
        .min_by(|(i, a), (j, b)| {
            a.total_cmp(b)
                .then(rows[*i].point.dim.cmp(&rows[*j].point.dim))
                .then(rows[*i].point.l2.total_cmp(&rows[*j].point.l2))
                .then(i.cmp(j))
        })
        .map(|(i, _)| i)
}
