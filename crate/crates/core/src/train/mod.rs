//! Training, ranking and evaluation.

pub mod checkpoint;
pub mod metrics;
mod optim;

pub use checkpoint::Snapshot;
pub use metrics::{Metric, RankingInstance};
pub use optim::{AdamW, OptimConfig, Schedule};

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::dialogue::Dialogue;
use crate::error::{Error, Result};
use crate::model::{Mdfn, TaskMode};
use crate::nn::{Gradients, Graph};

pub const LOG_HEADER: &str = "step,epoch,loss,val_r_at_1,val_mrr";

/// One row of the training log, written at the end of every epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    pub val_r_at_1: Option<f64>,
    pub val_mrr: Option<f64>,
}

impl LogRow {
    fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.6},{},{}",
            self.step,
            self.epoch,
            self.loss,
            opt(self.val_r_at_1),
            opt(self.val_mrr)
        )
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv());
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model with the best validation `R@1` (the last one without a
    /// validation set).
    pub best: Mdfn<f32>,
    pub best_snapshot: Snapshot,
    pub last: Mdfn<f32>,
    pub last_snapshot: Snapshot,
    pub log: Vec<LogRow>,
}

/// Number of loss terms `dialogue` adds to a batch mean.
fn loss_terms(dialogue: &Dialogue, mode: TaskMode) -> usize {
    match mode {
        TaskMode::MultiChoice => 1,
        TaskMode::Binary => dialogue.candidates.len(),
    }
}

/// Mean-loss gradient of one batch accumulated into `grads`; returns the
/// summed loss.
pub fn batch_gradients(
    model: &Mdfn<f32>,
    batch: &[&Dialogue],
    grads: &mut Gradients<f32>,
) -> Result<f64> {
    let terms: usize = batch
        .iter()
        .map(|d| loss_terms(d, model.config().mode))
        .sum();
    let scale = 1.0 / terms.max(1) as f64;
    let mut total = 0.0;
    for d in batch {
        let mut g = Graph::with_params(model.params());
        let (loss, _) = model.loss(&mut g, d)?;
        total += f64::from(g.value(loss).item());
        let scaled = g.affine(loss, scale, 0.0);
        g.backward(scaled, grads)?;
    }
    Ok(total)
}

/// Trains `model` with AdamW, validating after every epoch and keeping the
/// parameters with the best validation `R@1` (earliest on ties). With
/// `out`, writes `best/`, `last/` and `train_log.csv` there.
pub fn train(
    model: Mdfn<f32>,
    train_set: &[Dialogue],
    valid_set: &[Dialogue],
    cfg: &OptimConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let mut model = model;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new();
    let mut grads = Gradients::zeros_like(model.params());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let total_steps = (train_set.len().div_ceil(cfg.batch_size) * cfg.epochs) as u64;
    let mut log = Vec::new();
    let mut best: Option<(f64, Mdfn<f32>, Snapshot)> = None;
    let mut snapshot = Snapshot {
        seed: cfg.seed,
        ..Snapshot::default()
    };
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut terms = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Dialogue> = chunk.iter().map(|&i| &train_set[i]).collect();
            grads.zero();
            loss_sum += batch_gradients(&model, &batch, &mut grads)?;
            terms += batch
                .iter()
                .map(|d| loss_terms(d, model.config().mode))
                .sum::<usize>();
            let lr = cfg.lr_at(opt.step + 1, total_steps);
            opt.step_with_lr(model.params_mut(), &grads, cfg, lr)?;
        }
        let (val_r_at_1, val_mrr) = if valid_set.is_empty() {
            (None, None)
        } else {
            let inst = rank_all(&model, valid_set, 1)?;
            let n = inst[0].scores.len();
            (
                Some(metrics::recall_at_k(&inst, n, 1)?),
                Some(metrics::mrr(&inst)?),
            )
        };
        let row = LogRow {
            step: opt.step,
            epoch,
            loss: loss_sum / terms.max(1) as f64,
            val_r_at_1,
            val_mrr,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} val R@1 {} ({:.1}s)",
            row.loss,
            val_r_at_1.map_or("-".into(), |v| format!("{v:.3}")),
            started.elapsed().as_secs_f64()
        );
        snapshot.step = opt.step;
        snapshot.epoch = epoch;
        snapshot.metrics.clear();
        if let Some(v) = val_r_at_1 {
            snapshot.metrics.insert("val_r_at_1".into(), v);
        }
        if let Some(v) = val_mrr {
            snapshot.metrics.insert("val_mrr".into(), v);
        }
        snapshot.metrics.insert("train_loss".into(), row.loss);
        log.push(row);
        let score = val_r_at_1.unwrap_or(f64::INFINITY);
        if best
            .as_ref()
            .map_or(true, |(b, _, _)| score > *b || valid_set.is_empty())
        {
            best = Some((score, model.clone(), snapshot.clone()));
        }
    }
    let (best, best_snapshot) = match best {
        Some((_, m, s)) => (m, s),
        None => (model.clone(), snapshot.clone()),
    };
    let outcome = TrainOutcome {
        best,
        best_snapshot,
        last: model,
        last_snapshot: snapshot,
        log,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        checkpoint::save(dir.join("best"), &outcome.best, &outcome.best_snapshot)?;
        checkpoint::save(dir.join("last"), &outcome.last, &outcome.last_snapshot)?;
        fs::write(dir.join("train_log.csv"), log_csv(&outcome.log))?;
    }
    Ok(outcome)
}

/// Scores every dialogue, splitting the work over `threads` workers.
/// The result does not depend on the thread count.
pub fn rank_all(
    model: &Mdfn<f32>,
    dialogues: &[Dialogue],
    threads: usize,
) -> Result<Vec<RankingInstance>> {
    let one = |(i, d): (usize, &Dialogue)| -> Result<RankingInstance> {
        Ok(RankingInstance {
            context_id: i,
            scores: model.scores(d)?,
            labels: d.labels.clone(),
        })
    };
    let threads = threads.max(1).min(dialogues.len().max(1));
    if threads == 1 {
        return dialogues.iter().enumerate().map(one).collect();
    }
    let per = dialogues.len().div_ceil(threads);
    let parts: Vec<Result<Vec<RankingInstance>>> = std::thread::scope(|s| {
        let handles: Vec<_> = dialogues
            .chunks(per)
            .enumerate()
            .map(|(c, chunk)| {
                s.spawn(move || {
                    chunk
                        .iter()
                        .enumerate()
                        .map(|(j, d)| one((c * per + j, d)))
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ranking worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(dialogues.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Values of `metrics` on `instances`, whose candidate count must be
/// uniform.
pub fn evaluate(instances: &[RankingInstance], metrics: &[Metric]) -> Result<Vec<(Metric, f64)>> {
    let n = instances
        .first()
        .map(|i| i.scores.len())
        .ok_or_else(|| Error::Metric("no instances".into()))?;
    metrics
        .iter()
        .map(|m| Ok((*m, m.compute(instances, n)?)))
        .collect()
}
