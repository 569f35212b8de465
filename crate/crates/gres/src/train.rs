//! Deterministic mini-batch training.
//!
//! The sample order of epoch `e` is a shuffle seeded by `(seed, e)`, so any
//! step can be resumed from its index alone; together with the optimizer
//! moments stored in checkpoints this makes a resumed run reproduce an
//! uninterrupted one exactly.

use gres_core::loss::{LossReport, ScaleLoss};
use gres_core::metrics::MetricsReport;
use gres_core::model::Model;
use gres_core::optim::AdamW;
use gres_core::synth::SampleRecord;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, Predictor};

/// Model, optimizer and position in the schedule.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model<f32>,
    pub opt: AdamW<f32>,
    /// Completed optimizer steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let model = Model::new(cfg.model.clone())?;
        let opt = AdamW::new(cfg.train.optimizer, &model.store)?;
        Ok(Self { model, opt, step: 0 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Step {
        step: u64,
        epoch: u64,
        lr: f64,
        grad_norm: f64,
        /// Batch-mean loss report.
        loss: LossReport,
    },
    Eval {
        step: u64,
        epoch: u64,
        metrics: MetricsReport,
    },
}

pub fn steps_per_epoch(n: usize, batch: usize) -> u64 {
    n.div_ceil(batch) as u64
}

pub fn total_steps(cfg: &RunConfig, n: usize) -> u64 {
    cfg.train.epochs * steps_per_epoch(n, cfg.train.batch_size)
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sample order of `epoch`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(mix64(seed) ^ epoch));
    order.shuffle(&mut rng);
    order
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let scales = (0..reports[0].scales.len())
        .map(|i| ScaleLoss {
            ce: reports.iter().map(|r| r.scales[i].ce).sum::<f64>() / n,
            dice: reports.iter().map(|r| r.scales[i].dice).sum::<f64>() / n,
        })
        .collect();
    LossReport {
        scales,
        nt: reports.iter().map(|r| r.nt).sum::<f64>() / n,
        total: reports.iter().map(|r| r.total).sum::<f64>() / n,
    }
}

/// Runs optimizer steps until `state.step == until` (capped at the
/// configured schedule). Validation runs at the end of every
/// `eval_every`-th epoch when `val` is given.
pub fn train_until(
    state: &mut TrainState,
    cfg: &RunConfig,
    data: &[SampleRecord],
    val: Option<&[SampleRecord]>,
    until: u64,
    sink: &mut dyn FnMut(&LogEvent),
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let n = data.len();
    let batch = cfg.train.batch_size;
    let spe = steps_per_epoch(n, batch);
    let total = total_steps(cfg, n);
    let until = until.min(total);
    let seed = cfg.model.seed;
    let mut order: Option<(u64, Vec<usize>)> = None;
    while state.step < until {
        let step = state.step;
        let epoch = step / spe;
        if order.as_ref().map(|o| o.0) != Some(epoch) {
            order = Some((epoch, epoch_order(seed, epoch, n)));
        }
        let idx = &order.as_ref().expect("set above").1;
        let pos = (step % spe) as usize * batch;
        let members = &idx[pos..(pos + batch).min(n)];
        let mut grads = state.model.store.zeros_like();
        let scale = 1.0 / members.len() as f32;
        let mut reports = Vec::with_capacity(members.len());
        for &i in members {
            let r = &data[i];
            let report = state.model.accumulate_gradient(&r.image_floats(), &r.tokens, &r.gt_mask, r.nt_flag, &mut grads, scale)?;
            if !report.total.is_finite() {
                return Err(Error::NonFiniteLoss { step, epoch, sample_id: r.id });
            }
            reports.push(report);
        }
        let lr = cfg.train.optimizer.lr_at(step, total);
        let grad_norm = state.opt.update(&mut state.model.store, &grads, lr);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { step, epoch, sample_id: data[members[0]].id });
        }
        state.step += 1;
        if cfg.train.log_every > 0 && (step.is_multiple_of(cfg.train.log_every) || state.step == total) {
            sink(&LogEvent::Step { step, epoch, lr, grad_norm, loss: mean_report(&reports) });
        }
        let epoch_done = state.step.is_multiple_of(spe);
        let eval_due = cfg.train.eval_every > 0 && (epoch + 1).is_multiple_of(cfg.train.eval_every);
        if epoch_done && (eval_due || state.step == total) {
            if let Some(v) = val {
                let metrics = evaluate(Predictor::Model(&state.model), v)?;
                sink(&LogEvent::Eval { step: state.step, epoch, metrics });
            }
        }
    }
    Ok(())
}

/// Full schedule from a fresh initialization.
pub fn train(
    cfg: &RunConfig,
    train_set: &[SampleRecord],
    val: Option<&[SampleRecord]>,
    sink: &mut dyn FnMut(&LogEvent),
) -> Result<TrainState> {
    cfg.validate()?;
    let mut state = TrainState::new(cfg)?;
    train_until(&mut state, cfg, train_set, val, u64::MAX, sink)?;
    Ok(state)
}
