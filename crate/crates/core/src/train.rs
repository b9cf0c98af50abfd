//! Training loop, masked loss, evaluation protocol, and multi-seed reporting.
//!
//! The loss is masked MAE on z-scored targets; reported metrics are masked
//! MAE in original units. One optimizer step consumes one effective batch of
//! anchors, assembled from micro-batches whose losses share the full batch's
//! mask denominator, so the gradient is independent of the accumulation
//! split. Everything downstream of the split boundary is invisible to
//! training: statistics, imputation means and parameters depend on the train
//! range only.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::featurize::{encode_static, FeatureLayout, InputChannels, NormStats};
use crate::graph::{RoadGraph, StaticFeatures};
use crate::models::{
    activation_footprint, build_inputs, naive_predict_batch, save_checkpoint, Aggregation,
    BatchSegments, GnnConfig, Model, ModelKind, NaiveKind, NaiveStats,
};
use crate::numerics::{AdamW, Tape, Tensor};
use crate::series::{
    admissible_anchors, anchor_batches, Channel, SeriesStore, Split, Splits, WindowBatch,
    WindowSpec,
};

/// A complete forecasting dataset: road graph, static attributes, the two
/// target series, and the chronological split.
pub struct Dataset {
    pub graph: RoadGraph,
    pub statics: StaticFeatures,
    pub store: SeriesStore,
    pub splits: Splits,
}

// ===== Configuration =====

/// Optimization protocol. Defaults: lr 3e-4, 5 epochs, effective batch of 30
/// anchors, single accumulation step, 3 seeds, no weight decay.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f32,
    pub epochs: usize,
    /// Anchors contributing to one optimizer step.
    pub effective_batch: usize,
    /// Micro-batches per step; must divide `effective_batch` exactly.
    pub grad_accum_steps: usize,
    pub seeds: Vec<u64>,
    pub target_channel: Channel,
    pub window: WindowSpec,
    pub weight_decay: f32,
    /// Keep the epoch with the best validation MAE instead of the last one.
    pub keep_best_val: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            epochs: 5,
            effective_batch: 30,
            grad_accum_steps: 1,
            seeds: vec![0, 1, 2],
            target_channel: Channel::Speed,
            window: WindowSpec { lookback: 12, horizon: 12 },
            weight_decay: 0.0,
            keep_best_val: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.effective_batch == 0 || self.grad_accum_steps == 0 {
            return Err(Error::config(
                "epochs, effective_batch and grad_accum_steps must all be at least 1",
            ));
        }
        if self.effective_batch % self.grad_accum_steps != 0 {
            return Err(Error::config(format!(
                "effective batch {} does not split into {} equal accumulation steps",
                self.effective_batch, self.grad_accum_steps
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("need at least one seed"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }

    pub fn micro_batch(&self) -> usize {
        self.effective_batch / self.grad_accum_steps
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW { lr: self.lr, weight_decay: self.weight_decay, ..AdamW::default() }
    }
}

/// Model family plus its input configuration; what one suite entry trains.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub channels: InputChannels,
    pub d_emb: usize,
}

impl ModelSpec {
    pub fn name(&self) -> String {
        match &self.kind {
            ModelKind::Linear => "linear".into(),
            ModelKind::Gnn(c) => match c.aggregation {
                Aggregation::Mean => "gnn-mean".into(),
                Aggregation::Attention => "gnn-attn".into(),
            },
        }
    }
}

// ===== Metric =====

/// Masked mean absolute error `sum(|pred - target| * mask) / sum(mask)`.
pub fn masked_mae(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<f32> {
    if pred.shape() != target.shape() || pred.shape() != mask.shape() {
        return Err(Error::config(format!(
            "masked_mae shape mismatch: pred {:?}, target {:?}, mask {:?}",
            pred.shape(),
            target.shape(),
            mask.shape()
        )));
    }
    let mut total = 0.0f64;
    let mut count = 0.0f64;
    for ((p, t), m) in pred.iter().zip(target.iter()).zip(mask.iter()) {
        total += ((p - t).abs() * m) as f64;
        count += *m as f64;
    }
    if count == 0.0 {
        return Err(Error::data("no valid targets"));
    }
    Ok((total / count) as f32)
}

/// Per-horizon-step masked MAE accumulator shared by the model and naive
/// evaluation paths.
struct MaeAccum {
    sums: Vec<f64>,
    counts: Vec<f64>,
}

impl MaeAccum {
    fn new(horizon: usize) -> Self {
        MaeAccum { sums: vec![0.0; horizon], counts: vec![0.0; horizon] }
    }

    fn add(&mut self, pred: f32, target: f32, step: usize) {
        self.sums[step] += (pred - target).abs() as f64;
        self.counts[step] += 1.0;
    }

    fn finish(self) -> Result<EvalReport> {
        let total: f64 = self.sums.iter().sum();
        let count: f64 = self.counts.iter().sum();
        if count == 0.0 {
            return Err(Error::data("no valid targets"));
        }
        let per_step = self
            .sums
            .iter()
            .zip(&self.counts)
            .map(|(s, c)| if *c > 0.0 { (s / c) as f32 } else { f32::NAN })
            .collect();
        Ok(EvalReport { mae: (total / count) as f32, per_step, targets: count as usize })
    }
}

/// De-normalized masked MAE over one split: overall, per horizon step, and
/// the number of observed targets it averaged.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub mae: f32,
    pub per_step: Vec<f32>,
    pub targets: usize,
}

// ===== Segment reuse =====

/// Batched segment structures per distinct micro-batch size (the tail batch
/// is usually shorter), built lazily and reused across epochs.
struct SegmentCache<'a> {
    graph: &'a RoadGraph,
    config: Option<GnnConfig>,
    cache: HashMap<usize, BatchSegments>,
}

impl<'a> SegmentCache<'a> {
    fn new(graph: &'a RoadGraph, kind: &ModelKind) -> Self {
        let config = match kind {
            ModelKind::Gnn(c) => Some(*c),
            ModelKind::Linear => None,
        };
        SegmentCache { graph, config, cache: HashMap::new() }
    }

    fn get(&mut self, batch_size: usize) -> Option<&BatchSegments> {
        let config = self.config?;
        Some(
            self.cache
                .entry(batch_size)
                .or_insert_with(|| BatchSegments::build(self.graph, batch_size, &config)),
        )
    }
}

// ===== Training =====

/// One training-log line: end-of-epoch train loss (normalized units),
/// validation MAE (original units), elapsed wall-clock seconds.
#[derive(Clone, Debug)]
pub struct TrainRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f32,
    pub val_mae: f32,
    pub elapsed_s: f64,
}

impl TrainRecord {
    pub fn line(&self) -> String {
        format!(
            "epoch={} step={} loss={:.6} val_mae={:.6} elapsed_s={:.3}",
            self.epoch, self.step, self.loss, self.val_mae, self.elapsed_s
        )
    }
}

/// A finished training run: the model, its normalization statistics, the
/// per-epoch log, and bookkeeping for reports.
pub struct TrainRun {
    pub model: Model,
    pub stats: NormStats,
    pub records: Vec<TrainRecord>,
    pub best_epoch: usize,
    pub best_val_mae: f32,
    pub wall_clock_s: f64,
    /// Graph-block activation scalars per optimizer step at the training
    /// micro-batch size; 0 for models without graph blocks.
    pub activation_scalars: usize,
}

impl TrainRun {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.model, &self.stats)
    }
}

fn slice_rows(t: &Tensor, start: usize, end: usize) -> Tensor {
    let cols = t.cols();
    Tensor::from_vec(end - start, cols, t.as_slice()[start * cols..end * cols].to_vec())
}

/// Trains one model on the dataset's train split, validating after each
/// epoch. Shuffling is per-epoch from (seed, epoch); the returned model holds
/// the last epoch's parameters unless `keep_best_val` is set. Errors on
/// non-finite loss or parameters.
pub fn train_model(
    data: &Dataset,
    spec: &ModelSpec,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainRun> {
    config.validate()?;
    let start = Instant::now();
    let stats = NormStats::compute(&data.store, data.splits.train_end, &data.statics)?;
    let static_enc = encode_static(&data.statics, &stats);
    let layout =
        FeatureLayout::build(config.window.lookback, spec.channels, static_enc.cols(), spec.d_emb);
    let mut model = Model::init(
        spec.kind,
        layout,
        spec.channels,
        config.window.horizon,
        data.store.num_nodes(),
        seed,
    )?;
    let train_anchors = admissible_anchors(config.window, data.splits.range(Split::Train));
    if train_anchors.is_empty() {
        return Err(Error::config("train split admits no anchor windows"));
    }
    let have_val = !admissible_anchors(config.window, data.splits.range(Split::Val)).is_empty();
    let optimizer = config.optimizer();
    let micro = config.micro_batch();
    let mut segments = SegmentCache::new(&data.graph, &spec.kind);
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f32, Vec<Tensor>)> = None;
    let mut steps = 0usize;

    for epoch in 1..=config.epochs {
        let batches =
            anchor_batches(&train_anchors, config.effective_batch, Some((seed, epoch as u64)));
        let mut loss_sum = 0.0f64;
        let mut mask_sum = 0.0f64;
        for batch in &batches {
            let window = WindowBatch::build(&data.store, batch, config.window, config.target_channel);
            let denom = window.mask_total();
            if denom == 0.0 {
                continue;
            }
            let mut norm_targets = (*window.targets).clone();
            for x in norm_targets.as_mut_slice() {
                *x = stats.normalize(config.target_channel, *x);
            }
            let n = data.store.num_nodes();
            let mut batch_loss = 0.0f64;
            let mut at = 0;
            while at < batch.len() {
                let hi = (at + micro).min(batch.len());
                let chunk = &batch[at..hi];
                let inputs = build_inputs(
                    &data.store,
                    chunk,
                    config.window,
                    spec.channels,
                    &stats,
                    &static_enc,
                );
                let mut tape = Tape::new();
                let pred = model.forward(&mut tape, &inputs, segments.get(chunk.len()))?;
                let t_chunk = Rc::new(slice_rows(&norm_targets, at * n, hi * n));
                let m_chunk = Rc::new(slice_rows(&window.target_mask, at * n, hi * n));
                let loss = tape.masked_l1(pred, t_chunk, m_chunk, Some(denom));
                let loss_val = tape.value(loss).get(0, 0);
                if !loss_val.is_finite() {
                    return Err(Error::numeric(format!(
                        "training loss became non-finite at epoch {epoch} step {steps}"
                    )));
                }
                batch_loss += loss_val as f64;
                tape.backward(loss, &mut model.store);
                at = hi;
            }
            model.store.adamw_step(&optimizer)?;
            steps += 1;
            loss_sum += batch_loss * denom;
            mask_sum += denom;
        }
        let epoch_loss = if mask_sum > 0.0 { (loss_sum / mask_sum) as f32 } else { f32::NAN };

        let val_mae = if have_val {
            let report = evaluate(&model, &stats, data, config, Split::Val)?;
            report.mae
        } else {
            f32::NAN
        };
        if have_val && best.as_ref().map_or(true, |(_, b, _)| val_mae < *b) {
            let snapshot =
                model.store.ids().map(|id| model.store.value(id).clone()).collect::<Vec<_>>();
            best = Some((epoch, val_mae, snapshot));
        }
        records.push(TrainRecord {
            epoch,
            step: steps,
            loss: epoch_loss,
            val_mae,
            elapsed_s: start.elapsed().as_secs_f64(),
        });
    }

    let (best_epoch, best_val_mae) = match &best {
        Some((e, m, _)) => (*e, *m),
        None => (config.epochs, f32::NAN),
    };
    if config.keep_best_val {
        if let Some((_, _, snapshot)) = best {
            for (id, value) in model.store.ids().collect::<Vec<_>>().into_iter().zip(snapshot) {
                *model.store.value_mut(id) = value;
            }
        }
    }
    let activation_scalars = match &spec.kind {
        ModelKind::Gnn(c) => {
            micro * c.layers * activation_footprint(c, data.store.num_nodes(), data.graph.num_edges(), config.window.lookback)
        }
        ModelKind::Linear => 0,
    };
    Ok(TrainRun {
        model,
        stats,
        records,
        best_epoch,
        best_val_mae,
        wall_clock_s: start.elapsed().as_secs_f64(),
        activation_scalars,
    })
}

// ===== Evaluation =====

/// Chronological de-normalized masked MAE of a trained model over one split.
pub fn evaluate(
    model: &Model,
    stats: &NormStats,
    data: &Dataset,
    config: &TrainConfig,
    split: Split,
) -> Result<EvalReport> {
    if model.num_nodes != data.store.num_nodes() {
        return Err(Error::config(format!(
            "checkpoint covers {} nodes but the dataset has {}",
            model.num_nodes,
            data.store.num_nodes()
        )));
    }
    if model.horizon != config.window.horizon {
        return Err(Error::config(format!(
            "checkpoint horizon {} does not match requested horizon {}",
            model.horizon, config.window.horizon
        )));
    }
    let anchors = admissible_anchors(config.window, data.splits.range(split));
    if anchors.is_empty() {
        return Err(Error::data(format!("{} split admits no anchor windows", split.name())));
    }
    let static_enc = encode_static(&data.statics, stats);
    let mut segments = SegmentCache::new(&data.graph, &model.kind);
    let mut acc = MaeAccum::new(config.window.horizon);
    for chunk in anchors.chunks(config.micro_batch()) {
        let inputs =
            build_inputs(&data.store, chunk, config.window, model.channels, stats, &static_enc);
        let window = WindowBatch::build(&data.store, chunk, config.window, config.target_channel);
        let mut tape = Tape::new();
        let pred = model.forward(&mut tape, &inputs, segments.get(chunk.len()))?;
        let p = tape.value(pred);
        for r in 0..p.rows() {
            for c in 0..p.cols() {
                if window.target_mask.get(r, c) > 0.0 {
                    let denorm = stats.denormalize(config.target_channel, p.get(r, c));
                    acc.add(denorm, window.targets.get(r, c), c);
                }
            }
        }
    }
    acc.finish()
}

/// Same protocol for a naive baseline: entries count when the target is
/// observed and the baseline's lag or statistic is defined.
pub fn evaluate_naive(
    kind: NaiveKind,
    data: &Dataset,
    config: &TrainConfig,
    split: Split,
) -> Result<EvalReport> {
    let stats = NaiveStats::compute(&data.store, config.target_channel, data.splits.train_end)?;
    let anchors = admissible_anchors(config.window, data.splits.range(split));
    if anchors.is_empty() {
        return Err(Error::data(format!("{} split admits no anchor windows", split.name())));
    }
    let mut acc = MaeAccum::new(config.window.horizon);
    for chunk in anchors.chunks(config.micro_batch()) {
        let (pred, valid) = naive_predict_batch(
            kind,
            &data.store,
            config.target_channel,
            Some(&stats),
            chunk,
            config.window,
        )?;
        let window = WindowBatch::build(&data.store, chunk, config.window, config.target_channel);
        for r in 0..pred.rows() {
            for c in 0..pred.cols() {
                if window.target_mask.get(r, c) > 0.0 && valid.get(r, c) > 0.0 {
                    acc.add(pred.get(r, c), window.targets.get(r, c), c);
                }
            }
        }
    }
    acc.finish()
}

// ===== Suite =====

/// One suite entry: a trainable model or a naive baseline.
#[derive(Clone, Debug)]
pub enum SuiteEntry {
    Naive(NaiveKind),
    Trained(ModelSpec),
}

impl SuiteEntry {
    pub fn name(&self) -> String {
        match self {
            SuiteEntry::Naive(kind) => kind.name().into(),
            SuiteEntry::Trained(spec) => spec.name(),
        }
    }
}

/// One (model, seed) execution: per-split reports, timing, or the error that
/// stopped it.
pub struct SuiteRun {
    pub model: String,
    pub seed: u64,
    pub split_reports: Vec<(Split, EvalReport)>,
    pub train_s: f64,
    pub activation_scalars: usize,
    pub error: Option<String>,
}

/// Cross-seed aggregate of one model on one split. `std_mae` is the
/// population standard deviation, reported only with at least two seeds.
pub struct SuiteSummary {
    pub model: String,
    pub split: Split,
    pub mean_mae: f32,
    pub std_mae: Option<f32>,
    pub seeds: usize,
}

pub struct ForecastReport {
    pub runs: Vec<SuiteRun>,
    pub summaries: Vec<SuiteSummary>,
    pub horizon: usize,
}

/// Mean and population standard deviation (sqrt of the mean squared
/// deviation, not the sample estimator).
pub fn population_mean_std(xs: &[f32]) -> (f32, f32) {
    let n = xs.len() as f64;
    let mean = xs.iter().map(|x| *x as f64).sum::<f64>() / n;
    let var = xs.iter().map(|x| (*x as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean as f32, var.sqrt() as f32)
}

/// Runs every entry with every configured seed, evaluating on validation and
/// test. Individual failures are recorded on their row and the suite
/// continues.
pub fn run_suite(data: &Dataset, entries: &[SuiteEntry], config: &TrainConfig) -> Result<ForecastReport> {
    config.validate()?;
    let mut runs = Vec::new();
    for entry in entries {
        for &seed in &config.seeds {
            let name = entry.name();
            let outcome = run_entry(data, entry, config, seed);
            runs.push(match outcome {
                Ok(run) => run,
                Err(e) => SuiteRun {
                    model: name,
                    seed,
                    split_reports: Vec::new(),
                    train_s: 0.0,
                    activation_scalars: 0,
                    error: Some(e.to_string()),
                },
            });
        }
    }
    let mut summaries = Vec::new();
    for entry in entries {
        let name = entry.name();
        for split in [Split::Val, Split::Test] {
            let maes: Vec<f32> = runs
                .iter()
                .filter(|r| r.model == name && r.error.is_none())
                .filter_map(|r| {
                    r.split_reports.iter().find(|(s, _)| *s == split).map(|(_, rep)| rep.mae)
                })
                .collect();
            if maes.is_empty() {
                continue;
            }
            let (mean, std) = population_mean_std(&maes);
            summaries.push(SuiteSummary {
                model: name.clone(),
                split,
                mean_mae: mean,
                std_mae: if maes.len() >= 2 { Some(std) } else { None },
                seeds: maes.len(),
            });
        }
    }
    Ok(ForecastReport { runs, summaries, horizon: config.window.horizon })
}

fn run_entry(
    data: &Dataset,
    entry: &SuiteEntry,
    config: &TrainConfig,
    seed: u64,
) -> Result<SuiteRun> {
    match entry {
        SuiteEntry::Naive(kind) => {
            let mut split_reports = Vec::new();
            for split in [Split::Val, Split::Test] {
                split_reports.push((split, evaluate_naive(*kind, data, config, split)?));
            }
            Ok(SuiteRun {
                model: kind.name().into(),
                seed,
                split_reports,
                train_s: 0.0,
                activation_scalars: 0,
                error: None,
            })
        }
        SuiteEntry::Trained(spec) => {
            let run = train_model(data, spec, config, seed)?;
            let mut split_reports = Vec::new();
            for split in [Split::Val, Split::Test] {
                split_reports.push((split, evaluate(&run.model, &run.stats, data, config, split)?));
            }
            Ok(SuiteRun {
                model: spec.name(),
                seed,
                split_reports,
                train_s: run.wall_clock_s,
                activation_scalars: run.activation_scalars,
                error: None,
            })
        }
    }
}

impl ForecastReport {
    /// One row per (model, seed, split) with overall and per-step MAE.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,seed,split,mae,targets,train_s,activation_scalars");
        for k in 1..=self.horizon {
            let _ = write!(out, ",step_{k}");
        }
        out.push('\n');
        for run in &self.runs {
            if run.error.is_some() {
                continue;
            }
            for (split, report) in &run.split_reports {
                let _ = write!(
                    out,
                    "{},{},{},{},{},{:.3},{}",
                    run.model,
                    run.seed,
                    split.name(),
                    report.mae,
                    report.targets,
                    run.train_s,
                    run.activation_scalars
                );
                for v in &report.per_step {
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
            }
        }
        out
    }

    /// Human-readable summary: mean +/- std per model and split, then any
    /// per-run failures.
    pub fn to_text(&self) -> String {
        let mut out = String::from("model            split  mae\n");
        for s in &self.summaries {
            let spread = match s.std_mae {
                Some(std) => format!("{:.4} +/- {:.4} ({} seeds)", s.mean_mae, std, s.seeds),
                None => format!("{:.4}", s.mean_mae),
            };
            let _ = writeln!(out, "{:<16} {:<6} {spread}", s.model, s.split.name());
        }
        let failures: Vec<&SuiteRun> = self.runs.iter().filter(|r| r.error.is_some()).collect();
        if !failures.is_empty() {
            out.push_str("failures:\n");
            for run in failures {
                let _ = writeln!(out, "  {} seed {}: {}", run.model, run.seed, run.error.as_deref().unwrap_or(""));
            }
        }
        out
    }
}
