//! Minibatch Q-error training shared by the graph model and the flat
//! baseline.

use std::collections::BTreeMap;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{median, qerror};
use crate::neural::{AdamConfig, AdamState, ParamStore, Tape, Var};

/// Raw log-runtime outputs are clamped to this magnitude before `exp`.
pub const LOG_OUTPUT_CLAMP: f64 = 60.0;
/// Per-sample Q-error cap in the training loss.
pub const QERROR_CLAMP: f64 = 1e8;

/// Per-sample training objective. Both are functions of the Q-error `q`
/// (capped at [`QERROR_CLAMP`]); batches average them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `q` itself. Gradients grow with `q`, so a few bad samples dominate.
    QError,
    /// `ln q`, the absolute error of the log-runtime.
    #[default]
    LogQError,
}

impl std::str::FromStr for Loss {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "qerror" | "q_error" => Ok(Loss::QError),
            "log_qerror" => Ok(Loss::LogQError),
            _ => Err(format!("unknown loss `{s}` (expected q_error|log_qerror)")),
        }
    }
}

/// A differentiable model whose scalar output is a log-runtime.
pub trait Regressor: Sync {
    type Input: Sync;

    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    /// Records the raw (pre-`exp`) output for `x` on the tape.
    fn record(&self, tape: &mut Tape<'_>, x: &Self::Input) -> Result<Var>;
}

/// Stable 64-bit seed derivation (SplitMix64 over the seed and a tag).
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut z = seed;
    for b in tag.bytes() {
        z = z.rotate_left(5) ^ u64::from(b);
        z = z.wrapping_mul(0x100_0000_01b3);
    }
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn rng(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

fn record_runtime(tape: &mut Tape<'_>, raw: Var) -> Result<Var> {
    let r = tape.clamp(raw, -LOG_OUTPUT_CLAMP, LOG_OUTPUT_CLAMP)?;
    tape.exp(r)
}

fn record_loss(tape: &mut Tape<'_>, raw: Var, runtime: f64, loss: Loss) -> Result<Var> {
    match loss {
        Loss::QError => {
            let pred = record_runtime(tape, raw)?;
            let c = tape.input(&[runtime]);
            let under = tape.div(c, pred)?;
            let over = tape.div(pred, c)?;
            let q = tape.max(under, over)?;
            tape.clamp(q, 1.0, QERROR_CLAMP)
        }
        Loss::LogQError => {
            // ln q = |raw - ln c|, computed in log space to stay exact for large errors
            let r = tape.clamp(raw, -LOG_OUTPUT_CLAMP, LOG_OUTPUT_CLAMP)?;
            let neg_log_c = tape.input(&[-runtime.ln()]);
            let d = tape.add(r, neg_log_c)?;
            let neg_d = tape.scale(d, -1.0)?;
            let abs = tape.max(d, neg_d)?;
            tape.clamp(abs, 0.0, QERROR_CLAMP.ln())
        }
    }
}

/// Loss of one sample and its parameter gradient.
pub fn loss_and_gradient<R: Regressor>(
    model: &R,
    x: &R::Input,
    runtime: f64,
    kind: Loss,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new(model.params());
    let raw = model.record(&mut tape, x)?;
    let loss = record_loss(&mut tape, raw, runtime, kind)?;
    let value = tape.scalar(loss)?;
    let mut grad = vec![0.0; model.params().len()];
    tape.backward_into(loss, 1.0, &mut grad)?;
    Ok((value, grad))
}

/// Loss value only.
pub fn loss<R: Regressor>(model: &R, x: &R::Input, runtime: f64, kind: Loss) -> Result<f64> {
    let mut tape = Tape::new(model.params());
    let raw = model.record(&mut tape, x)?;
    let loss = record_loss(&mut tape, raw, runtime, kind)?;
    tape.scalar(loss)
}

pub fn predict<R: Regressor>(model: &R, x: &R::Input) -> Result<f64> {
    let mut tape = Tape::new(model.params());
    let raw = model.record(&mut tape, x)?;
    let c = record_runtime(&mut tape, raw)?;
    tape.scalar(c)
}

pub fn predict_many<R: Regressor>(model: &R, xs: &[&R::Input]) -> Result<Vec<f64>> {
    xs.par_iter()
        .map_init(
            || Tape::new(model.params()),
            |tape, x| {
                tape.reset();
                let raw = model.record(tape, x)?;
                let c = record_runtime(tape, raw)?;
                tape.scalar(c)
            },
        )
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Optimization {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// `None` trains for exactly `max_epochs` and keeps the final parameters.
    pub patience: Option<usize>,
    pub seed: u64,
    pub loss: Loss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Median Q-error on the selection set after this epoch.
    pub val_median_qerror: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based; 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_val_median_qerror: Option<f64>,
    pub num_train: usize,
    pub num_val: usize,
    /// True when the validation split was empty and model selection used
    /// the training samples.
    pub selected_on_training: bool,
    /// Not serialized so that reports of identical runs are identical.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

/// Equality ignores the wall-clock time.
impl PartialEq for TrainReport {
    fn eq(&self, other: &Self) -> bool {
        self.epochs == other.epochs
            && self.best_epoch == other.best_epoch
            && self.best_val_median_qerror == other.best_val_median_qerror
            && self.num_train == other.num_train
            && self.num_val == other.num_val
            && self.selected_on_training == other.selected_on_training
    }
}

impl TrainReport {
    pub fn final_val_median(&self) -> Option<f64> {
        self.best_val_median_qerror
    }
}

fn median_qerror<R: Regressor>(model: &R, data: &[(&R::Input, f64)]) -> Result<f64> {
    let xs: Vec<&R::Input> = data.iter().map(|(x, _)| *x).collect();
    let preds = predict_many(model, &xs)?;
    let q = data
        .iter()
        .zip(&preds)
        .map(|((_, c), p)| qerror(*c, *p))
        .collect::<Result<Vec<_>>>()?;
    median(&q).ok_or_else(|| Error::InsufficientData("empty selection set".into()))
}

/// Adam on the mean per-sample loss of each minibatch.
///
/// Gradients of the samples of a batch are computed independently (in
/// parallel) and summed in batch order, so results do not depend on the
/// thread count. With `patience` set, training stops once the selection
/// metric has not improved for that many epochs and the best parameters are
/// restored.
pub fn optimize<R: Regressor>(
    model: &mut R,
    train: &[(&R::Input, f64)],
    val: &[(&R::Input, f64)],
    opt: &Optimization,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::InsufficientData("no training samples".into()));
    }
    if opt.batch_size == 0 || !(opt.lr > 0.0) {
        return Err(Error::InvalidArgument(
            "batch size and learning rate must be positive".into(),
        ));
    }
    let start = Instant::now();
    let n_params = model.params().len();
    let mut adam = AdamState::new(n_params, AdamConfig::with_lr(opt.lr));
    let mut shuffle_rng = rng(opt.seed, "shuffle");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let bs = opt.batch_size.min(train.len());
    let mut buffers = vec![vec![0.0; n_params]; bs];
    let mut total = vec![0.0; n_params];

    let selection = if val.is_empty() { train } else { val };
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_median_qerror: None,
        num_train: train.len(),
        num_val: val.len(),
        selected_on_training: val.is_empty(),
        wall_clock_s: 0.0,
    };
    let mut best_params: Option<Vec<f64>> = None;
    let mut since_best = 0;

    for epoch in 1..=opt.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(bs).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            let model_ref: &R = model;
            let losses: Vec<Result<f64>> = batch
                .par_iter()
                .zip(buffers[..batch.len()].par_iter_mut())
                .map_init(
                    || Tape::new(model_ref.params()),
                    |tape, (&i, grad)| {
                        tape.reset();
                        grad.iter_mut().for_each(|g| *g = 0.0);
                        let (x, c) = train[i];
                        let raw = model_ref.record(tape, x)?;
                        let q = record_loss(tape, raw, c, opt.loss)?;
                        let value = tape.scalar(q)?;
                        if !value.is_finite() {
                            return Err(Error::NonFinite(format!(
                                "loss {value} for training sample {i} (runtime {c}) in epoch {epoch}, batch {b}"
                            )));
                        }
                        tape.backward_into(q, scale, grad)?;
                        Ok(value)
                    },
                )
                .collect();
            for l in losses {
                loss_sum += l?;
            }
            total.copy_from_slice(&buffers[0]);
            for g in &buffers[1..batch.len()] {
                for (t, v) in total.iter_mut().zip(g) {
                    *t += v;
                }
            }
            adam.step(model.params_mut().data_mut(), &total)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}, batch {b}: {e}")))?;
            if !model.params().all_finite() {
                return Err(Error::NonFinite(format!(
                    "parameters after epoch {epoch}, batch {b}"
                )));
            }
        }
        let train_loss = loss_sum / train.len() as f64;
        let metric = if opt.patience.is_some() {
            Some(median_qerror(model, selection)?)
        } else {
            None
        };
        debug!("epoch {epoch}: train loss {train_loss:.4}, selection median q-error {metric:?}");
        report.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_median_qerror: metric,
        });
        match (opt.patience, metric) {
            (Some(patience), Some(m)) => {
                if report.best_val_median_qerror.is_none_or(|best| m < best) {
                    report.best_val_median_qerror = Some(m);
                    report.best_epoch = epoch;
                    best_params = Some(model.params().data().to_vec());
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= patience {
                        info!(
                            "early stop after epoch {epoch}; best epoch {}",
                            report.best_epoch
                        );
                        break;
                    }
                }
            }
            _ => report.best_epoch = epoch,
        }
    }
    if let Some(best) = best_params {
        model.params_mut().data_mut().copy_from_slice(&best);
    }
    report.wall_clock_s = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Splits sample indices into (train, validation), stratified by database:
/// each database contributes `round(n * fraction)` validation samples, but
/// always keeps at least one training sample.
pub fn stratified_split(
    databases: &[&str],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction {fraction} not in [0, 1)"
        )));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, db) in databases.iter().enumerate() {
        groups.entry(db).or_default().push(i);
    }
    let mut rng = rng(seed, "validation-split");
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (_, mut idx) in groups {
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_val = ((n as f64 * fraction).round() as usize).min(n - 1);
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}
