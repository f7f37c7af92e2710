//! Mini-batch multi-task training with per-epoch view resampling, Adam with
//! decoupled weight decay, step decay and validation early stopping.

mod adam;
mod config;

pub use adam::{adam_update, AdamConfig, TrainState};
pub use config::{apply_ablation, Ablation, EffectiveConfig, TrainConfig, ENV_PREFIX};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{expand_subsequences, SplitDataset};
use crate::encoders::{forward_row, item_scores, EncoderError, ModelConfig, ModelParams, RowInput};
use crate::evalkit::{evaluate, EvalError, EvalMode, MetricReport};
use crate::numerics::rng::{SeedStreams, DROPOUT, SHUFFLE};
use crate::numerics::{Checkpoint, NumericsError, Tape, Tensor, Var};
use crate::objectives::{loss_gcl, loss_main, loss_mmd, loss_total, BatchLossReport, LossTerms, ObjectiveError};
use crate::witg::{sample_view, SampledView, TransitionGraph};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("no training pairs: every training sequence has fewer than two items")]
    EmptyTrainingSet,
    #[error("epoch {epoch} step {step}: {source}")]
    Step { epoch: usize, step: u64, source: StepError },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Failure inside one optimization step.
#[derive(Debug, Error)]
pub enum StepError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// One training example with its stable identity for view sampling.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Row {
    id: u64,
    user: usize,
    prefix: Vec<usize>,
    target: usize,
}

fn training_rows(dataset: &SplitDataset, max_len: usize) -> Vec<Row> {
    let mut rows = Vec::new();
    for seq in dataset.train_sequences() {
        for pair in expand_subsequences(&seq, max_len) {
            rows.push(Row { id: rows.len() as u64, user: pair.user, prefix: pair.prefix().to_vec(), target: pair.target });
        }
    }
    rows
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: BatchLossReport,
    /// Rows excluded from the contrastive term for a zero pooled view.
    pub gcl_dropped: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelConfig,
    /// Parameters with the best validation HR@10 (ties: NDCG@10), including
    /// the untrained initialization as epoch 0.
    pub best: ModelParams,
    pub last: ModelParams,
    pub best_epoch: usize,
    pub best_valid: Option<MetricReport>,
    pub epochs_run: usize,
    pub steps: Vec<StepRecord>,
    /// Every metrics-log line in emission order.
    pub log: Vec<String>,
}

/// Checkpoint carrying the model config plus what evaluation needs to
/// reproduce training-time views.
pub fn checkpoint_for(params: &ModelParams, model: &ModelConfig, cfg: &TrainConfig, epoch: usize) -> Checkpoint {
    let mut ck = params.to_checkpoint(model);
    let eff = apply_ablation(cfg);
    ck.meta.extend([
        ("seed".to_string(), cfg.seed.to_string()),
        ("sample_depth".to_string(), cfg.sample_depth.to_string()),
        ("sample_size".to_string(), cfg.sample_size.to_string()),
        ("weighted_edges".to_string(), eff.weighted_edges.to_string()),
        ("ablation".to_string(), cfg.ablation.key().to_string()),
        ("epoch".to_string(), epoch.to_string()),
    ]);
    ck
}

fn selection_key(r: &MetricReport) -> (f64, f64) {
    let first = r.cutoffs.first().map_or(0.0, |c| c.1);
    (r.hr(10).unwrap_or(first), r.ndcg(10).unwrap_or(0.0))
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    model: ModelConfig,
    graph: &'a TransitionGraph,
    eff: EffectiveConfig,
    adam: AdamConfig,
    streams: SeedStreams,
}

impl Trainer<'_> {
    fn views(&self, row: &Row, epoch: usize) -> [SampledView; 2] {
        let base = if self.cfg.resample_per_epoch { 2 * epoch as u64 } else { 0 };
        let sampler = self.cfg.sampler();
        [0, 1].map(|k| sample_view(self.graph, &row.prefix, row.id, &sampler, base + k))
    }

    /// Returns the loss report and how many rows sat out the contrastive term.
    fn step(&self, state: &mut TrainState, batch: &[&Row], epoch: usize, lr: f64) -> Result<(BatchLossReport, usize), StepError> {
        let views: Vec<[SampledView; 2]> = batch.iter().map(|r| self.views(r, epoch)).collect();
        let mut dropout: ChaCha8Rng = self.streams.keyed(DROPOUT, &[state.step]);
        let mut tape = Tape::new();
        let pv = state.params.register(&mut tape)?;
        let w = &self.eff.weights;
        let mut ms = Vec::with_capacity(batch.len());
        let mut z = [Vec::with_capacity(batch.len()), Vec::with_capacity(batch.len())];
        let mut mmd_terms = Vec::new();
        for (row, vs) in batch.iter().zip(&views) {
            let input = RowInput { user: row.user, items: &row.prefix, views: [&vs[0], &vs[1]] };
            let f = forward_row(&mut tape, &pv, &self.model, &input, self.eff.weighted_edges, Some(&mut dropout))?;
            ms.push(f.m);
            z[0].push(f.z[0]);
            z[1].push(f.z[1]);
            if w.lambda2 > 0.0 {
                mmd_terms.push(loss_mmd(&mut tape, f.e0, f.q[0], f.q[1], w)?);
            }
        }
        let m = tape.concat_rows(&ms)?;
        let scores = item_scores(&mut tape, &pv, m)?;
        let targets: Vec<usize> = batch.iter().map(|r| r.target).collect();
        let main = loss_main(&mut tape, scores, &targets)?;
        let mut dropped = 0;
        let gcl = if w.lambda1 > 0.0 {
            // A view whose pooled encoding is all zero has no direction;
            // such rows sit out this step's contrastive term.
            let live: Vec<usize> = (0..batch.len())
                .filter(|&i| tape.value(z[0][i]).norm() > 0.0 && tape.value(z[1][i]).norm() > 0.0)
                .collect();
            dropped = batch.len() - live.len();
            if live.is_empty() {
                Some(tape.leaf(Tensor::scalar(0.0))?)
            } else {
                let z1: Vec<Var> = live.iter().map(|&i| z[0][i]).collect();
                let z2: Vec<Var> = live.iter().map(|&i| z[1][i]).collect();
                let z1 = tape.concat_rows(&z1)?;
                let z2 = tape.concat_rows(&z2)?;
                Some(loss_gcl(&mut tape, z1, z2, w.tau, w.symmetric)?)
            }
        } else {
            None
        };
        let mmd = if mmd_terms.is_empty() {
            None
        } else {
            let all = tape.concat_rows(&mmd_terms)?;
            Some(tape.mean_all(all)?)
        };
        let loss = loss_total(&mut tape, &LossTerms { main, gcl, mmd }, w)?;
        let mut grads = tape.backward(loss.total)?;
        let grads = pv.map(|_, v| grads.take(*v));
        state.adam_step(&grads, lr, &self.adam);
        Ok((loss.report, dropped))
    }
}

/// Trains on the training portion of `dataset` and returns the best
/// checkpoint by validation HR@10. `sink` receives every metrics-log line
/// as it is produced.
pub fn train_with(
    dataset: &SplitDataset,
    graph: &TransitionGraph,
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(&str),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let user_count = dataset.users.iter().map(|u| u.user() + 1).max().unwrap_or(0);
    let model = cfg.model_config(graph.node_count(), user_count);
    model.validate()?;
    let rows = training_rows(dataset, cfg.max_len);
    if rows.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let trainer = Trainer {
        cfg,
        model,
        graph,
        eff: apply_ablation(cfg),
        adam: AdamConfig { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, l2: cfg.l2 },
        streams: SeedStreams::new(cfg.seed),
    };
    let eval_cfg = cfg.eval_config();
    let can_validate = dataset.evaluable_count() > 0;

    let mut log = Vec::new();
    let mut emit = |line: String, log: &mut Vec<String>| {
        sink(&line);
        log.push(line);
    };
    let mut state = TrainState::new(ModelParams::init(&model, cfg.seed));
    let mut steps = Vec::new();
    let mut best = state.params.clone();
    let mut best_epoch = 0;
    let mut best_valid = None;
    if can_validate {
        let (rep, _) = evaluate(&state.params, &model, dataset, graph, EvalMode::Valid, &eval_cfg)?;
        emit(format!("epoch=0 valid {}", rep.to_fields()), &mut log);
        best_valid = Some(rep);
    }

    let mut stale = 0;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<&Row> = rows.iter().collect();
        order.shuffle(&mut trainer.streams.keyed(SHUFFLE, &[epoch as u64]));
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (report, gcl_dropped) = trainer
                .step(&mut state, batch, epoch, lr)
                .map_err(|source| TrainError::Step { epoch, step: state.step + 1, source })?;
            let note = if gcl_dropped > 0 { format!(" gcl_dropped={gcl_dropped}") } else { String::new() };
            emit(format!("step={} epoch={epoch} lr={lr:e} {}{note}", state.step, report.to_fields()), &mut log);
            steps.push(StepRecord { epoch, step: state.step, lr, loss: report, gcl_dropped });
            sum += report.total * batch.len() as f64;
        }
        epochs_run = epoch;
        let mean = sum / rows.len() as f64;
        if !can_validate {
            emit(format!("epoch={epoch} train_loss={mean:.6}"), &mut log);
            best = state.params.clone();
            best_epoch = epoch;
            continue;
        }
        let (rep, _) = evaluate(&state.params, &model, dataset, graph, EvalMode::Valid, &eval_cfg)?;
        let improved = best_valid.as_ref().is_none_or(|b| selection_key(&rep) > selection_key(b));
        emit(
            format!("epoch={epoch} train_loss={mean:.6} valid {}{}", rep.to_fields(), if improved { " best" } else { "" }),
            &mut log,
        );
        if improved {
            best = state.params.clone();
            best_epoch = epoch;
            best_valid = Some(rep);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                emit(format!("early_stop epoch={epoch} best_epoch={best_epoch}"), &mut log);
                break;
            }
        }
    }
    Ok(TrainOutcome { model, best, last: state.params, best_epoch, best_valid, epochs_run, steps, log })
}

pub fn train(dataset: &SplitDataset, graph: &TransitionGraph, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with(dataset, graph, cfg, &mut |_| {})
}
