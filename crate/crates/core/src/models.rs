//! Predictors: naive baselines, the linear per-node model, and the
//! time-then-graph GNN with mean or multi-head attention aggregation.
//!
//! The GNN keeps one d-vector per node: the lookback window is collapsed by
//! a single linear encoder before any message passing, so per-layer
//! activation memory is O(n d) and never scales with the window length.
//! Each of the L blocks is pre-norm residual: aggregation over in-neighbors
//! first, then a two-layer MLP, each applied to a layer-normalized input
//! and added back. A final linear layer decodes all horizon steps jointly.
//!
//! The linear baseline is the same encoder with the horizon as its output
//! width and no graph blocks at all, which makes the two models share one
//! input path and one set of correctness tests for it.

use std::io::Read;
use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::featurize::{FeatureLayout, InputChannels, NormStats};
use crate::graph::RoadGraph;
use crate::numerics::{NodeId, ParamId, ParamStore, Segments, Tape, Tensor};
use crate::series::{lag_lookup, Channel, SeriesStore, WindowSpec, STEPS_PER_DAY, STEPS_PER_WEEK};
use crate::{Error, Result};

// ===== Naive baselines =====

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NaiveKind {
    Previous,
    PreviousDay,
    PreviousWeek,
    GlobalMean,
    GlobalMedian,
    NodeMean,
    NodeMedian,
}

pub const NAIVE_KINDS: [NaiveKind; 7] = [
    NaiveKind::Previous,
    NaiveKind::PreviousDay,
    NaiveKind::PreviousWeek,
    NaiveKind::GlobalMean,
    NaiveKind::GlobalMedian,
    NaiveKind::NodeMean,
    NaiveKind::NodeMedian,
];

impl NaiveKind {
    pub fn name(self) -> &'static str {
        match self {
            NaiveKind::Previous => "previous",
            NaiveKind::PreviousDay => "previous_day",
            NaiveKind::PreviousWeek => "previous_week",
            NaiveKind::GlobalMean => "global_mean",
            NaiveKind::GlobalMedian => "global_median",
            NaiveKind::NodeMean => "node_mean",
            NaiveKind::NodeMedian => "node_median",
        }
    }

    /// Steps back from the anchor for the lag family; None for statistics.
    pub fn lag_offset(self) -> Option<usize> {
        match self {
            NaiveKind::Previous => Some(1),
            NaiveKind::PreviousDay => Some(STEPS_PER_DAY),
            NaiveKind::PreviousWeek => Some(STEPS_PER_WEEK),
            _ => None,
        }
    }
}

impl std::str::FromStr for NaiveKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        NAIVE_KINDS
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown naive baseline {s:?}")))
    }
}

/// Even-length medians average the two middle values.
fn median_of_sorted(values: &[f32]) -> f32 {
    let n = values.len();
    debug_assert!(n > 0);
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Train-split statistics for the statistic-family baselines. Nodes with no
/// observed train value carry None and are masked out of metrics.
#[derive(Clone, Debug)]
pub struct NaiveStats {
    pub global_mean: f32,
    pub global_median: f32,
    pub node_means: Vec<Option<f32>>,
    pub node_medians: Vec<Option<f32>>,
}

impl NaiveStats {
    pub fn compute(store: &SeriesStore, channel: Channel, train_end: usize) -> Result<Self> {
        let n = store.num_nodes();
        let mut per_node: Vec<Vec<f32>> = vec![Vec::new(); n];
        for t in 0..train_end {
            let row = store.row(channel, t);
            for v in 0..n {
                if !row[v].is_nan() {
                    per_node[v].push(row[v]);
                }
            }
        }
        let mut all: Vec<f32> = per_node.iter().flatten().copied().collect();
        if all.is_empty() {
            return Err(Error::data(format!(
                "no observed {} values in the train split",
                channel.name()
            )));
        }
        all.sort_unstable_by(f32::total_cmp);
        let global_mean = (all.iter().map(|x| *x as f64).sum::<f64>() / all.len() as f64) as f32;
        let global_median = median_of_sorted(&all);
        let mut node_means = Vec::with_capacity(n);
        let mut node_medians = Vec::with_capacity(n);
        for values in per_node.iter_mut() {
            if values.is_empty() {
                node_means.push(None);
                node_medians.push(None);
            } else {
                values.sort_unstable_by(f32::total_cmp);
                let mean = (values.iter().map(|x| *x as f64).sum::<f64>() / values.len() as f64) as f32;
                node_means.push(Some(mean));
                node_medians.push(Some(median_of_sorted(values)));
            }
        }
        Ok(NaiveStats { global_mean, global_median, node_means, node_medians })
    }
}

/// Predictions and validity mask for one anchor, both `[n, horizon]`.
/// Lag-family rows broadcast the looked-up value across the horizon and are
/// invalid where that value is itself missing; statistic-family rows are
/// constant across anchors.
pub fn naive_predict(
    kind: NaiveKind,
    store: &SeriesStore,
    channel: Channel,
    stats: Option<&NaiveStats>,
    anchor: usize,
    spec: WindowSpec,
) -> Result<(Tensor, Tensor)> {
    let n = store.num_nodes();
    let h = spec.horizon;
    let mut pred = Tensor::zeros(n, h);
    let mut valid = Tensor::zeros(n, h);
    match kind.lag_offset() {
        Some(offset) => {
            let (row, mask) = lag_lookup(store, channel, anchor, offset).map_err(|_| {
                Error::data(format!(
                    "{} needs {offset} steps of history before anchor {anchor}",
                    kind.name()
                ))
            })?;
            for v in 0..n {
                if mask[v] {
                    for k in 0..h {
                        pred.set(v, k, row[v]);
                        valid.set(v, k, 1.0);
                    }
                }
            }
        }
        None => {
            let stats = stats.ok_or_else(|| {
                Error::config(format!("{} needs precomputed train statistics", kind.name()))
            })?;
            for v in 0..n {
                let value = match kind {
                    NaiveKind::GlobalMean => Some(stats.global_mean),
                    NaiveKind::GlobalMedian => Some(stats.global_median),
                    NaiveKind::NodeMean => stats.node_means[v],
                    NaiveKind::NodeMedian => stats.node_medians[v],
                    _ => unreachable!(),
                };
                if let Some(x) = value {
                    for k in 0..h {
                        pred.set(v, k, x);
                        valid.set(v, k, 1.0);
                    }
                }
            }
        }
    }
    Ok((pred, valid))
}

/// Stacked naive predictions for a batch of anchors, rows `b * n + v`.
pub fn naive_predict_batch(
    kind: NaiveKind,
    store: &SeriesStore,
    channel: Channel,
    stats: Option<&NaiveStats>,
    anchors: &[usize],
    spec: WindowSpec,
) -> Result<(Tensor, Tensor)> {
    let n = store.num_nodes();
    let mut pred = Tensor::zeros(anchors.len() * n, spec.horizon);
    let mut valid = Tensor::zeros(anchors.len() * n, spec.horizon);
    for (b, &a) in anchors.iter().enumerate() {
        let (p, m) = naive_predict(kind, store, channel, stats, a, spec)?;
        for v in 0..n {
            pred.row_mut(b * n + v).copy_from_slice(p.row(v));
            valid.row_mut(b * n + v).copy_from_slice(m.row(v));
        }
    }
    Ok((pred, valid))
}

// ===== GNN configuration =====

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    Mean,
    Attention,
}

impl Aggregation {
    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Mean => "mean",
            Aggregation::Attention => "attention",
        }
    }
}

impl std::str::FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "attention" => Ok(Aggregation::Attention),
            other => Err(Error::config(format!("unknown aggregation {other:?}, expected mean|attention"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    In,
    InOut,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::In => "in",
            Direction::InOut => "in_out",
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in" => Ok(Direction::In),
            "in_out" => Ok(Direction::InOut),
            other => Err(Error::config(format!("unknown direction {other:?}, expected in|in_out"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GnnConfig {
    pub hidden: usize,
    pub layers: usize,
    pub aggregation: Aggregation,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub horizon: usize,
    pub include_self: bool,
    pub direction: Direction,
}

impl Default for GnnConfig {
    fn default() -> Self {
        GnnConfig {
            hidden: 64,
            layers: 2,
            aggregation: Aggregation::Mean,
            heads: 4,
            mlp_ratio: 4,
            horizon: 12,
            include_self: true,
            direction: Direction::In,
        }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.mlp_ratio == 0 || self.horizon == 0 {
            return Err(Error::config("hidden, layers, mlp_ratio and horizon must all be at least 1"));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::config(format!(
                "hidden {} must be divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

// ===== Batched aggregation segments =====

/// Neighborhood segments for B disjoint copies of the graph: segment
/// `b * n + v` lists `v` itself (when include_self) followed by the
/// in-neighbors of `v`, all offset into copy b. `reverse` swaps edge
/// direction to aggregate from out-neighbors instead.
pub fn batched_segments(
    graph: &RoadGraph,
    batch_size: usize,
    include_self: bool,
    reverse: bool,
) -> Rc<Segments> {
    let n = graph.num_nodes();
    let per_copy = graph.num_edges() + if include_self { n } else { 0 };
    let mut offsets = Vec::with_capacity(batch_size * n + 1);
    let mut sources = Vec::with_capacity(batch_size * per_copy);
    offsets.push(0);
    for b in 0..batch_size {
        let base = b * n;
        for v in 0..n {
            if include_self {
                sources.push(base + v);
            }
            let neigh = if reverse { graph.out_neighbors(v) } else { graph.in_neighbors(v) };
            sources.extend(neigh.iter().map(|&u| base + u));
            offsets.push(sources.len());
        }
    }
    Rc::new(Segments::new(offsets, sources))
}

/// Segments a model forward needs for one batch size, built once per epoch
/// loop and shared across batches of that size.
pub struct BatchSegments {
    pub fwd: Rc<Segments>,
    pub rev: Option<Rc<Segments>>,
    pub batch_size: usize,
}

impl BatchSegments {
    pub fn build(graph: &RoadGraph, batch_size: usize, config: &GnnConfig) -> Self {
        let fwd = batched_segments(graph, batch_size, config.include_self, false);
        let rev = match config.direction {
            Direction::In => None,
            Direction::InOut => Some(batched_segments(graph, batch_size, config.include_self, true)),
        };
        BatchSegments { fwd, rev, batch_size }
    }
}

// ===== Inputs =====

/// Everything a forward pass reads for one batch of anchors. The dynamic
/// block is `[B * n, t * C_dyn]`, static `[n, K_static]`, calendar
/// `[B, K_cal]`; the encoder multiplies each against its own weight block
/// and broadcasts, which is the same affine map as one dense D_in matmul
/// without ever materializing the concatenated matrix.
pub struct BatchInputs {
    pub dyn_block: Tensor,
    pub static_enc: Tensor,
    pub calendar: Tensor,
    pub batch_size: usize,
    pub num_nodes: usize,
}

pub fn build_inputs(
    store: &SeriesStore,
    anchors: &[usize],
    spec: WindowSpec,
    channels: InputChannels,
    stats: &NormStats,
    static_enc: &Tensor,
) -> BatchInputs {
    BatchInputs {
        dyn_block: crate::featurize::dyn_history_matrix(store, anchors, spec, channels, stats),
        static_enc: static_enc.clone(),
        calendar: crate::featurize::calendar_matrix(store.start(), anchors),
        batch_size: anchors.len(),
        num_nodes: store.num_nodes(),
    }
}

// ===== Model =====

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Linear,
    Gnn(GnnConfig),
}

impl ModelKind {
    pub fn tag(&self) -> &'static str {
        match self {
            ModelKind::Linear => "linear",
            ModelKind::Gnn(_) => "gnn",
        }
    }
}

/// A parameterized predictor: layout-driven encoder, optional GNN blocks,
/// decoder. Parameters live in the store under stable names; creation order
/// is fixed so seeded initialization and checkpoints are deterministic.
pub struct Model {
    pub kind: ModelKind,
    pub layout: FeatureLayout,
    pub channels: InputChannels,
    pub horizon: usize,
    pub num_nodes: usize,
    pub store: ParamStore,
}

/// Extra observability from one forward pass: attention weight nodes (one
/// per aggregation) and the activation scalars the graph blocks allocated.
#[derive(Default)]
pub struct ForwardTrace {
    pub attention_weights: Vec<NodeId>,
    pub block_activation_scalars: usize,
}

impl Model {
    pub fn init(
        kind: ModelKind,
        layout: FeatureLayout,
        channels: InputChannels,
        horizon: usize,
        num_nodes: usize,
        seed: u64,
    ) -> Result<Model> {
        let d_in = layout.width();
        if d_in == 0 || horizon == 0 || num_nodes == 0 {
            return Err(Error::config("model needs a non-empty layout, horizon and node set"));
        }
        let expected_dyn: Vec<&str> = channels.dyn_channels().iter().map(|c| c.block_name()).collect();
        let leading: Vec<&str> = layout
            .blocks()
            .iter()
            .filter(|(b, _)| b.starts_with("dyn_") || b == "obs_indicator")
            .map(|(b, _)| b.as_str())
            .collect();
        if leading != expected_dyn {
            return Err(Error::config(format!(
                "layout dynamic blocks {leading:?} do not match input channels {expected_dyn:?}"
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc_out = match &kind {
            ModelKind::Linear => horizon,
            ModelKind::Gnn(config) => {
                config.validate()?;
                if config.horizon != horizon {
                    return Err(Error::config(format!(
                        "config horizon {} disagrees with model horizon {horizon}",
                        config.horizon
                    )));
                }
                config.hidden
            }
        };
        let enc_bound = 1.0 / (d_in as f32).sqrt();
        for (name, width) in layout.blocks() {
            if *width == 0 {
                continue;
            }
            store.add(format!("enc.{name}.w"), Tensor::uniform(*width, enc_out, enc_bound, &mut rng));
        }
        store.add("enc.bias", Tensor::uniform(1, enc_out, enc_bound, &mut rng));

        if let ModelKind::Gnn(config) = &kind {
            let d = config.hidden;
            let bound = 1.0 / (d as f32).sqrt();
            for l in 0..config.layers {
                store.add(format!("blk{l}.ln1.scale"), Tensor::from_vec(1, d, vec![1.0; d]));
                store.add(format!("blk{l}.ln1.shift"), Tensor::zeros(1, d));
                let add_agg = |store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str| {
                    match config.aggregation {
                        Aggregation::Mean => {
                            store.add(format!("{prefix}.w"), Tensor::uniform(d, d, bound, rng));
                            store.add(format!("{prefix}.b"), Tensor::uniform(1, d, bound, rng));
                        }
                        Aggregation::Attention => {
                            for p in ["wq", "wk", "wv", "wo"] {
                                store.add(format!("{prefix}.{p}"), Tensor::uniform(d, d, bound, rng));
                            }
                            for p in ["bq", "bk", "bv", "bo"] {
                                store.add(format!("{prefix}.{p}"), Tensor::uniform(1, d, bound, rng));
                            }
                        }
                    }
                };
                add_agg(&mut store, &mut rng, &format!("blk{l}.agg"));
                if config.direction == Direction::InOut {
                    add_agg(&mut store, &mut rng, &format!("blk{l}.agg_rev"));
                }
                store.add(format!("blk{l}.ln2.scale"), Tensor::from_vec(1, d, vec![1.0; d]));
                store.add(format!("blk{l}.ln2.shift"), Tensor::zeros(1, d));
                let wide = config.mlp_ratio * d;
                store.add(format!("blk{l}.mlp.w1"), Tensor::uniform(d, wide, bound, &mut rng));
                store.add(format!("blk{l}.mlp.b1"), Tensor::uniform(1, wide, bound, &mut rng));
                let bound2 = 1.0 / (wide as f32).sqrt();
                store.add(format!("blk{l}.mlp.w2"), Tensor::uniform(wide, d, bound2, &mut rng));
                store.add(format!("blk{l}.mlp.b2"), Tensor::uniform(1, d, bound2, &mut rng));
            }
            store.add("dec.w", Tensor::uniform(d, horizon, bound, &mut rng));
            store.add("dec.b", Tensor::uniform(1, horizon, bound, &mut rng));
        }

        if let Some((_, d_emb)) = layout.span("embedding") {
            if d_emb > 0 {
                let emb = crate::featurize::EmbeddingTable::init(num_nodes, d_emb, &mut rng);
                store.add("embedding", emb.values);
            }
        }

        Ok(Model { kind, layout, channels, horizon, num_nodes, store })
    }

    fn pid(&self, name: &str) -> ParamId {
        self.store
            .lookup(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from store"))
    }

    fn linear(&self, tape: &mut Tape, x: NodeId, w: &str, b: &str) -> NodeId {
        let w = tape.param(&self.store, self.pid(w));
        let b = tape.param(&self.store, self.pid(b));
        let y = tape.matmul(x, w);
        tape.add_row_broadcast(y, b)
    }

    /// Encoder: per-block matmuls summed, then bias. Static and embedding
    /// pieces are computed once per node set and tiled across the batch;
    /// the calendar piece is computed per anchor and repeated per node.
    fn encode(&self, tape: &mut Tape, inputs: &BatchInputs) -> Result<NodeId> {
        let n = inputs.num_nodes;
        let b = inputs.batch_size;
        if inputs.dyn_block.rows() != b * n
            || inputs.dyn_block.cols() != self.layout.dyn_width()
            || inputs.static_enc.rows() != n
            || inputs.calendar.rows() != b
        {
            return Err(Error::config(format!(
                "batch inputs have shapes dyn {:?}, static {:?}, calendar {:?}, want rows {}/{}/{}",
                inputs.dyn_block.shape(),
                inputs.static_enc.shape(),
                inputs.calendar.shape(),
                b * n,
                n,
                b
            )));
        }
        let dyn_id = tape.constant(inputs.dyn_block.clone());
        let mut dyn_at = 0;
        let mut acc: Option<NodeId> = None;
        for (name, width) in self.layout.blocks() {
            if *width == 0 {
                continue;
            }
            let w = tape.param(&self.store, self.pid(&format!("enc.{name}.w")));
            let piece = if name.starts_with("dyn_") || name == "obs_indicator" {
                let x = tape.slice_cols(dyn_id, dyn_at, *width);
                dyn_at += width;
                tape.matmul(x, w)
            } else if name == "static" {
                if inputs.static_enc.cols() != *width {
                    return Err(Error::config(format!(
                        "static encoding width {} does not match layout {}",
                        inputs.static_enc.cols(),
                        width
                    )));
                }
                let s = tape.constant(inputs.static_enc.clone());
                let m = tape.matmul(s, w);
                tape.tile_rows(m, b)
            } else if name == "calendar" {
                if inputs.calendar.cols() != *width {
                    return Err(Error::config(format!(
                        "calendar width {} does not match layout {}",
                        inputs.calendar.cols(),
                        width
                    )));
                }
                let c = tape.constant(inputs.calendar.clone());
                let m = tape.matmul(c, w);
                tape.repeat_row_each(m, n)
            } else if name == "embedding" {
                let e = tape.param(&self.store, self.pid("embedding"));
                let m = tape.matmul(e, w);
                tape.tile_rows(m, b)
            } else {
                return Err(Error::config(format!("unknown layout block {name}")));
            };
            acc = Some(match acc {
                None => piece,
                Some(prev) => tape.add(prev, piece),
            });
        }
        let acc = acc.ok_or_else(|| Error::config("layout has no non-empty blocks"))?;
        let bias = tape.param(&self.store, self.pid("enc.bias"));
        Ok(tape.add_row_broadcast(acc, bias))
    }

    /// One neighborhood aggregation; `prefix` selects the parameter set.
    pub(crate) fn aggregate(
        &self,
        tape: &mut Tape,
        config: &GnnConfig,
        x: NodeId,
        seg: &Rc<Segments>,
        prefix: &str,
        trace: Option<&mut ForwardTrace>,
    ) -> NodeId {
        match config.aggregation {
            Aggregation::Mean => {
                let m = tape.segment_mean(x, Rc::clone(seg));
                self.linear(tape, m, &format!("{prefix}.w"), &format!("{prefix}.b"))
            }
            Aggregation::Attention => {
                let q = self.linear(tape, x, &format!("{prefix}.wq"), &format!("{prefix}.bq"));
                let k = self.linear(tape, x, &format!("{prefix}.wk"), &format!("{prefix}.bk"));
                let v = self.linear(tape, x, &format!("{prefix}.wv"), &format!("{prefix}.bv"));
                let logits = tape.edge_dot(q, k, Rc::clone(seg), config.heads);
                let weights = tape.segment_softmax(logits, Rc::clone(seg));
                if let Some(t) = trace {
                    t.attention_weights.push(weights);
                }
                let ctx = tape.segment_weighted_sum(weights, v, Rc::clone(seg), config.heads);
                self.linear(tape, ctx, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape, inputs: &BatchInputs, segs: Option<&BatchSegments>) -> Result<NodeId> {
        self.forward_traced(tape, inputs, segs).map(|(id, _)| id)
    }

    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        inputs: &BatchInputs,
        segs: Option<&BatchSegments>,
    ) -> Result<(NodeId, ForwardTrace)> {
        let mut trace = ForwardTrace::default();
        let h = self.encode(tape, inputs)?;
        let config = match &self.kind {
            ModelKind::Linear => return Ok((h, trace)),
            ModelKind::Gnn(c) => c,
        };
        let segs = segs.ok_or_else(|| Error::config("GNN forward needs aggregation segments"))?;
        if segs.batch_size != inputs.batch_size
            || segs.fwd.num_segments() != inputs.batch_size * inputs.num_nodes
        {
            return Err(Error::config(format!(
                "segments built for batch {} over {} nodes, inputs have batch {} over {}",
                segs.batch_size,
                segs.fwd.num_segments() / segs.batch_size.max(1),
                inputs.batch_size,
                inputs.num_nodes
            )));
        }
        if config.direction == Direction::InOut && segs.rev.is_none() {
            return Err(Error::config("in_out direction needs reverse segments"));
        }
        let mark = tape.mark();
        let mut h = h;
        for l in 0..config.layers {
            let x = {
                let scale = tape.param(&self.store, self.pid(&format!("blk{l}.ln1.scale")));
                let shift = tape.param(&self.store, self.pid(&format!("blk{l}.ln1.shift")));
                tape.layer_norm(h, scale, shift)
            };
            let agg = self.aggregate(tape, config, x, &segs.fwd, &format!("blk{l}.agg"), Some(&mut trace));
            h = tape.add(h, agg);
            if let Some(rev) = &segs.rev {
                let agg_rev =
                    self.aggregate(tape, config, x, rev, &format!("blk{l}.agg_rev"), Some(&mut trace));
                h = tape.add(h, agg_rev);
            }
            let y = {
                let scale = tape.param(&self.store, self.pid(&format!("blk{l}.ln2.scale")));
                let shift = tape.param(&self.store, self.pid(&format!("blk{l}.ln2.shift")));
                tape.layer_norm(h, scale, shift)
            };
            let m1 = self.linear(tape, y, &format!("blk{l}.mlp.w1"), &format!("blk{l}.mlp.b1"));
            let m1 = tape.relu(m1);
            let m2 = self.linear(tape, m1, &format!("blk{l}.mlp.w2"), &format!("blk{l}.mlp.b2"));
            h = tape.add(h, m2);
        }
        trace.block_activation_scalars = tape.activation_scalars_since(mark);
        let out = self.linear(tape, h, "dec.w", "dec.b");
        Ok((out, trace))
    }
}

// ===== Activation footprint =====

/// Exact count of activation scalars one GNN block allocates for a single
/// graph copy, mirroring the forward op sequence term by term. The window
/// length is accepted only to document independence: the count never uses
/// it, because the encoder collapses the window before any block runs.
pub fn activation_footprint(config: &GnnConfig, n: usize, num_edges: usize, _lookback: usize) -> usize {
    let d = config.hidden;
    let e_aug = num_edges + if config.include_self { n } else { 0 };
    let agg = match config.aggregation {
        // segment_mean + linear (matmul, bias).
        Aggregation::Mean => 3 * n * d,
        // q/k/v linears, edge logits, softmax, weighted sum, output linear.
        Aggregation::Attention => 6 * n * d + 2 * e_aug * config.heads + n * d + 2 * n * d,
    };
    let dirs = match config.direction {
        Direction::In => 1,
        Direction::InOut => 2,
    };
    let wide = config.mlp_ratio * d;
    // ln1 + per-direction aggregate and residual add + ln2 + MLP + residual.
    n * d + dirs * (agg + n * d) + n * d + (3 * n * wide + n * d + n * d) + n * d
}

// ===== Checkpoints =====

const CHECKPOINT_MAGIC: &[u8; 4] = b"TTGC";
const CHECKPOINT_VERSION: u32 = 1;

fn push_section(buf: &mut Vec<u8>, text: &str) {
    buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
}

fn fmt_f32_list(values: &[f32]) -> String {
    values.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_f32_list(text: &str) -> Result<Vec<f32>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|x| x.parse::<f32>().map_err(|_| Error::data(format!("bad float {x:?} in checkpoint"))))
        .collect()
}

/// Serializes the model and its normalization statistics into one file:
/// magic + version, three text sections (config, layout, statistics), then
/// the parameters in creation order as raw little-endian f32 payloads.
/// Byte-stable: the same model state always produces identical bytes.
pub fn save_checkpoint(path: &Path, model: &Model, stats: &NormStats) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());

    let mut config = String::new();
    config.push_str(&format!("kind={}\n", model.kind.tag()));
    config.push_str(&format!("channels={}\n", model.channels.name()));
    config.push_str(&format!("horizon={}\n", model.horizon));
    config.push_str(&format!("num_nodes={}\n", model.num_nodes));
    if let ModelKind::Gnn(c) = &model.kind {
        config.push_str(&format!("hidden={}\n", c.hidden));
        config.push_str(&format!("layers={}\n", c.layers));
        config.push_str(&format!("aggregation={}\n", c.aggregation.name()));
        config.push_str(&format!("heads={}\n", c.heads));
        config.push_str(&format!("mlp_ratio={}\n", c.mlp_ratio));
        config.push_str(&format!("include_self={}\n", c.include_self as u8));
        config.push_str(&format!("direction={}\n", c.direction.name()));
    }
    push_section(&mut buf, &config);
    push_section(&mut buf, &model.layout.to_lines());

    let mut st = String::new();
    st.push_str(&format!("speed_mean={}\n", stats.speed_mean));
    st.push_str(&format!("speed_std={}\n", stats.speed_std));
    st.push_str(&format!("volume_mean={}\n", stats.volume_mean));
    st.push_str(&format!("volume_std={}\n", stats.volume_std));
    st.push_str(&format!("global_speed_mean={}\n", stats.global_speed_mean));
    st.push_str(&format!("node_speed_means={}\n", fmt_f32_list(&stats.node_speed_means)));
    st.push_str(&format!("static_means={}\n", fmt_f32_list(&stats.static_means)));
    st.push_str(&format!("static_stds={}\n", fmt_f32_list(&stats.static_stds)));
    let cards: Vec<String> = stats.cat_cardinalities.iter().map(|c| c.to_string()).collect();
    st.push_str(&format!("cat_cardinalities={}\n", cards.join(",")));
    push_section(&mut buf, &st);

    buf.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for id in model.store.ids() {
        let name = model.store.name(id);
        let value = model.store.value(id);
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(value.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(value.cols() as u32).to_le_bytes());
        for x in value.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

struct SectionReader<'a> {
    file: &'a mut std::fs::File,
    path: String,
}

impl SectionReader<'_> {
    fn bytes(&mut self, len: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; len];
        self.file
            .read_exact(&mut buf)
            .map_err(|_| Error::data(format!("{}: truncated {what}", self.path)))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn text(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let b = self.bytes(len, what)?;
        String::from_utf8(b).map_err(|_| Error::data(format!("{}: {what} is not UTF-8", self.path)))
    }
}

fn parse_kv(text: &str) -> std::collections::BTreeMap<String, String> {
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    map
}

fn kv_req<'m>(map: &'m std::collections::BTreeMap<String, String>, key: &str) -> Result<&'m str> {
    map.get(key).map(|s| s.as_str()).ok_or_else(|| Error::data(format!("checkpoint lacks field {key}")))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, NormStats)> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = SectionReader { file: &mut file, path: path.display().to_string() };
    let magic = r.bytes(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::data(format!("{}: bad magic, not a checkpoint", path.display())));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::data(format!("{}: unsupported checkpoint version {version}", path.display())));
    }
    let config = parse_kv(&r.text("config section")?);
    let layout = FeatureLayout::from_lines(&r.text("layout section")?)?;
    let stats_kv = parse_kv(&r.text("statistics section")?);

    let parse_usize = |s: &str, what: &str| {
        s.parse::<usize>().map_err(|_| Error::data(format!("bad {what} {s:?} in checkpoint")))
    };
    let parse_f32 = |s: &str, what: &str| {
        s.parse::<f32>().map_err(|_| Error::data(format!("bad {what} {s:?} in checkpoint")))
    };

    let horizon = parse_usize(kv_req(&config, "horizon")?, "horizon")?;
    let num_nodes = parse_usize(kv_req(&config, "num_nodes")?, "num_nodes")?;
    let channels: InputChannels = kv_req(&config, "channels")?.parse()?;
    let kind = match kv_req(&config, "kind")? {
        "linear" => ModelKind::Linear,
        "gnn" => ModelKind::Gnn(GnnConfig {
            hidden: parse_usize(kv_req(&config, "hidden")?, "hidden")?,
            layers: parse_usize(kv_req(&config, "layers")?, "layers")?,
            aggregation: kv_req(&config, "aggregation")?.parse()?,
            heads: parse_usize(kv_req(&config, "heads")?, "heads")?,
            mlp_ratio: parse_usize(kv_req(&config, "mlp_ratio")?, "mlp_ratio")?,
            horizon,
            include_self: kv_req(&config, "include_self")? == "1",
            direction: kv_req(&config, "direction")?.parse()?,
        }),
        other => return Err(Error::data(format!("unknown model kind {other:?} in checkpoint"))),
    };

    let cards = kv_req(&stats_kv, "cat_cardinalities")?
        .split(',')
        .map(|c| parse_usize(c, "cardinality"))
        .collect::<Result<Vec<usize>>>()?;
    if cards.len() != 4 {
        return Err(Error::data(format!("expected 4 cardinalities, found {}", cards.len())));
    }
    let stats = NormStats {
        speed_mean: parse_f32(kv_req(&stats_kv, "speed_mean")?, "speed_mean")?,
        speed_std: parse_f32(kv_req(&stats_kv, "speed_std")?, "speed_std")?,
        volume_mean: parse_f32(kv_req(&stats_kv, "volume_mean")?, "volume_mean")?,
        volume_std: parse_f32(kv_req(&stats_kv, "volume_std")?, "volume_std")?,
        global_speed_mean: parse_f32(kv_req(&stats_kv, "global_speed_mean")?, "global_speed_mean")?,
        node_speed_means: parse_f32_list(kv_req(&stats_kv, "node_speed_means")?)?,
        static_means: parse_f32_list(kv_req(&stats_kv, "static_means")?)?,
        static_stds: parse_f32_list(kv_req(&stats_kv, "static_stds")?)?,
        cat_cardinalities: [cards[0], cards[1], cards[2], cards[3]],
    };

    let mut store = ParamStore::new();
    let count = r.u32("parameter count")? as usize;
    for _ in 0..count {
        let name_len = r.u32("parameter name length")? as usize;
        let name = String::from_utf8(r.bytes(name_len, "parameter name")?)
            .map_err(|_| Error::data("parameter name is not UTF-8"))?;
        let rows = r.u32("parameter rows")? as usize;
        let cols = r.u32("parameter cols")? as usize;
        let payload = r.bytes(rows * cols * 4, "parameter payload")?;
        let data: Vec<f32> =
            payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        store.add(name, Tensor::from_vec(rows, cols, data));
    }

    let model = Model { kind, layout, channels, horizon, num_nodes, store };
    Ok((model, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use rand::Rng;

    fn t0() -> chrono::NaiveDateTime {
        NaiveDate::from_ymd_opt(2024, 7, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
    }

    fn graph_from(n: usize, edges: &[(usize, usize)]) -> RoadGraph {
        let ids = (0..n).map(|v| format!("n{v}")).collect();
        RoadGraph::from_edges(ids, edges)
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_store(num_steps: usize, n: usize, missing: f64, seed: u64) -> SeriesStore {
        let mut r = rng(seed);
        let mut speed = Vec::new();
        let mut volume = Vec::new();
        for _ in 0..num_steps {
            for _ in 0..n {
                if r.gen_bool(missing) {
                    speed.push(f32::NAN);
                } else {
                    speed.push(r.gen_range(10.0..90.0));
                }
                volume.push(r.gen_range(0.0..40.0f32).floor());
            }
        }
        SeriesStore::new(t0(), n, speed, volume).unwrap()
    }

    // ===== Naive baselines =====

    #[test]
    fn median_tie_break_examples() {
        assert_eq!(median_of_sorted(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(median_of_sorted(&[1.0, 3.0]), 2.0);
        assert_eq!(median_of_sorted(&[5.0]), 5.0);
    }

    #[test]
    fn previous_broadcasts_last_row() {
        let store = SeriesStore::new(
            t0(),
            3,
            vec![1.0; 9],
            vec![9.0, 9.0, 9.0, 3.0, 0.0, 7.0, 5.0, 5.0, 5.0],
        )
        .unwrap();
        let spec = WindowSpec::new(2, 4).unwrap();
        let (pred, valid) = naive_predict(NaiveKind::Previous, &store, Channel::Volume, None, 2, spec).unwrap();
        for k in 0..4 {
            assert_eq!(pred.get(0, k), 3.0);
            assert_eq!(pred.get(1, k), 0.0);
            assert_eq!(pred.get(2, k), 7.0);
            assert_eq!(valid.get(1, k), 1.0);
        }
    }

    #[test]
    fn lag_family_matches_lag_lookup_oracle() {
        let store = random_store(STEPS_PER_WEEK + 30, 4, 0.2, 3);
        let spec = WindowSpec::new(12, 6).unwrap();
        for (kind, offset) in [
            (NaiveKind::Previous, 1usize),
            (NaiveKind::PreviousDay, STEPS_PER_DAY),
            (NaiveKind::PreviousWeek, STEPS_PER_WEEK),
        ] {
            let anchor = STEPS_PER_WEEK + 10;
            let (pred, valid) = naive_predict(kind, &store, Channel::Speed, None, anchor, spec).unwrap();
            let (row, mask) = lag_lookup(&store, Channel::Speed, anchor, offset).unwrap();
            for v in 0..4 {
                for k in 0..6 {
                    if mask[v] {
                        assert_eq!(pred.get(v, k), row[v]);
                        assert_eq!(valid.get(v, k), 1.0);
                    } else {
                        assert_eq!(valid.get(v, k), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn lag_family_requires_history() {
        let store = random_store(400, 2, 0.0, 4);
        let spec = WindowSpec::new(4, 2).unwrap();
        let err = naive_predict(NaiveKind::PreviousDay, &store, Channel::Speed, None, 100, spec)
            .unwrap_err()
            .to_string();
        assert!(err.contains("288"), "{err}");
        assert!(naive_predict(NaiveKind::PreviousDay, &store, Channel::Speed, None, 288, spec).is_ok());
    }

    #[test]
    fn statistic_family_matches_brute_force() {
        let store = random_store(60, 5, 0.3, 5);
        let train_end = 40;
        let stats = NaiveStats::compute(&store, Channel::Speed, train_end).unwrap();

        // Brute-force oracles straight from the definitions.
        let mut all = Vec::new();
        for t in 0..train_end {
            for v in 0..5 {
                let x = store.value(Channel::Speed, t, v);
                if !x.is_nan() {
                    all.push(x);
                }
            }
        }
        let mean = all.iter().map(|x| *x as f64).sum::<f64>() / all.len() as f64;
        assert!((stats.global_mean as f64 - mean).abs() < 1e-4);
        all.sort_by(f32::total_cmp);
        assert_eq!(stats.global_median, median_of_sorted(&all));
        for v in 0..5 {
            let mut vals: Vec<f32> = (0..train_end)
                .map(|t| store.value(Channel::Speed, t, v))
                .filter(|x| !x.is_nan())
                .collect();
            vals.sort_by(f32::total_cmp);
            let want = (vals.iter().map(|x| *x as f64).sum::<f64>() / vals.len() as f64) as f32;
            assert!((stats.node_means[v].unwrap() - want).abs() < 1e-3);
            assert_eq!(stats.node_medians[v].unwrap(), median_of_sorted(&vals));
        }

        // Predictions are constant across anchors and carry full validity.
        let spec = WindowSpec::new(4, 3).unwrap();
        let (p1, m1) =
            naive_predict(NaiveKind::NodeMedian, &store, Channel::Speed, Some(&stats), 44, spec).unwrap();
        let (p2, _) =
            naive_predict(NaiveKind::NodeMedian, &store, Channel::Speed, Some(&stats), 50, spec).unwrap();
        assert_eq!(p1.as_slice(), p2.as_slice());
        assert!(m1.iter().all(|x| *x == 1.0));
        assert_eq!(p1.get(2, 0), stats.node_medians[2].unwrap());
    }

    #[test]
    fn statistic_family_masks_never_observed_nodes() {
        let mut speed = vec![f32::NAN; 12];
        for t in 0..6 {
            speed[t * 2] = 20.0 + t as f32;
        }
        let store = SeriesStore::new(t0(), 2, speed, vec![1.0; 12]).unwrap();
        let stats = NaiveStats::compute(&store, Channel::Speed, 6).unwrap();
        assert!(stats.node_means[1].is_none());
        let spec = WindowSpec::new(2, 2).unwrap();
        let (_, valid) =
            naive_predict(NaiveKind::NodeMean, &store, Channel::Speed, Some(&stats), 4, spec).unwrap();
        assert_eq!(valid.get(0, 0), 1.0);
        assert_eq!(valid.get(1, 0), 0.0);

        let err = naive_predict(NaiveKind::GlobalMean, &store, Channel::Speed, None, 4, spec)
            .unwrap_err()
            .to_string();
        assert!(err.contains("statistics"), "{err}");
    }

    #[test]
    fn batch_prediction_stacks_rows() {
        let store = random_store(40, 3, 0.0, 6);
        let spec = WindowSpec::new(4, 2).unwrap();
        let (pred, _) =
            naive_predict_batch(NaiveKind::Previous, &store, Channel::Volume, None, &[10, 20], spec).unwrap();
        assert_eq!(pred.shape(), (6, 2));
        let (single, _) = naive_predict(NaiveKind::Previous, &store, Channel::Volume, None, 20, spec).unwrap();
        assert_eq!(pred.row(3 + 1), single.row(1));
    }

    // ===== Config and segments =====

    #[test]
    fn config_validation() {
        let mut c = GnnConfig::default();
        assert!(c.validate().is_ok());
        c.heads = 5;
        assert!(c.validate().is_err());
        c = GnnConfig { layers: 0, ..GnnConfig::default() };
        assert!(c.validate().is_err());
        c = GnnConfig { hidden: 0, ..GnnConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn batched_segments_layout() {
        // Edges: 0 -> 1, 2 -> 1, 1 -> 2.
        let g = graph_from(3, &[(0, 1), (2, 1), (1, 2)]);
        let seg = batched_segments(&g, 2, true, false);
        assert_eq!(seg.num_segments(), 6);
        assert_eq!(seg.num_elements(), 2 * (3 + 3));
        // Copy 0: node 0 gets only itself, node 1 gets self + {0, 2}.
        assert_eq!(&seg.sources()[seg.range(0)], &[0]);
        assert_eq!(&seg.sources()[seg.range(1)], &[1, 0, 2]);
        assert_eq!(&seg.sources()[seg.range(2)], &[2, 1]);
        // Copy 1 is offset by n.
        assert_eq!(&seg.sources()[seg.range(4)], &[4, 3, 5]);

        let no_self = batched_segments(&g, 1, false, false);
        assert_eq!(&no_self.sources()[no_self.range(0)], &[] as &[usize]);
        assert_eq!(&no_self.sources()[no_self.range(1)], &[0, 2]);

        // Reverse aggregation reads out-neighbors.
        let rev = batched_segments(&g, 1, true, true);
        assert_eq!(&rev.sources()[rev.range(0)], &[0, 1]);
        assert_eq!(&rev.sources()[rev.range(1)], &[1, 2]);
    }

    // ===== Linear model =====

    fn tiny_layout(t: usize, k_static: usize, d_emb: usize) -> FeatureLayout {
        FeatureLayout::from_blocks(vec![
            ("dyn_volume".into(), t),
            ("static".into(), k_static),
            ("calendar".into(), 0),
            ("embedding".into(), d_emb),
        ])
    }

    fn tiny_inputs(dyn_block: Tensor, static_enc: Tensor, batch: usize, n: usize) -> BatchInputs {
        BatchInputs {
            dyn_block,
            static_enc,
            calendar: Tensor::zeros(batch, 0),
            batch_size: batch,
            num_nodes: n,
        }
    }

    #[test]
    fn linear_zero_weights_give_bias() {
        let layout = tiny_layout(2, 1, 0);
        let mut m =
            Model::init(ModelKind::Linear, layout, InputChannels::VolumeOnly, 3, 2, 11).unwrap();
        for name in ["enc.dyn_volume.w", "enc.static.w"] {
            let id = m.store.lookup(name).unwrap();
            let v = m.store.value_mut(id);
            for x in v.as_mut_slice() {
                *x = 0.0;
            }
        }
        let bias_id = m.store.lookup("enc.bias").unwrap();
        m.store.value_mut(bias_id).as_mut_slice().copy_from_slice(&[0.5, -1.0, 2.0]);

        let inputs = tiny_inputs(
            Tensor::from_vec(2, 2, vec![3.0, 4.0, 5.0, 6.0]),
            Tensor::from_vec(2, 1, vec![7.0, 8.0]),
            1,
            2,
        );
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &inputs, None).unwrap();
        for v in 0..2 {
            assert_eq!(tape.value(out).row(v), &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn linear_one_hot_selects_weight_row() {
        let layout = tiny_layout(3, 0, 0);
        let m = Model::init(ModelKind::Linear, layout, InputChannels::VolumeOnly, 2, 1, 12).unwrap();
        let w_id = m.store.lookup("enc.dyn_volume.w").unwrap();
        let w = m.store.value(w_id).clone();
        let b = m.store.value(m.store.lookup("enc.bias").unwrap()).clone();

        for j in 0..3 {
            let mut x = Tensor::zeros(1, 3);
            x.set(0, j, 1.0);
            let inputs = tiny_inputs(x, Tensor::zeros(1, 0), 1, 1);
            let mut tape = Tape::new();
            let out = m.forward(&mut tape, &inputs, None).unwrap();
            for c in 0..2 {
                let want = w.get(j, c) + b.get(0, c);
                assert!((tape.value(out).get(0, c) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn linear_ignores_graph_wiring() {
        let layout = tiny_layout(2, 0, 0);
        let m = Model::init(ModelKind::Linear, layout, InputChannels::VolumeOnly, 2, 3, 13).unwrap();
        let mut r = rng(14);
        let dyn_block = Tensor::uniform(6, 2, 1.0, &mut r);
        let inputs = tiny_inputs(dyn_block, Tensor::zeros(3, 0), 2, 3);
        let config = GnnConfig::default();
        let ring = BatchSegments::build(&graph_from(3, &[(0, 1), (1, 2), (2, 0)]), 2, &config);
        let dense = BatchSegments::build(
            &graph_from(3, &[(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]),
            2,
            &config,
        );
        let mut t1 = Tape::new();
        let a = m.forward(&mut t1, &inputs, Some(&ring)).unwrap();
        let mut t2 = Tape::new();
        let b = m.forward(&mut t2, &inputs, Some(&dense)).unwrap();
        let mut t3 = Tape::new();
        let c = m.forward(&mut t3, &inputs, None).unwrap();
        assert_eq!(t1.value(a).as_slice(), t2.value(b).as_slice());
        assert_eq!(t1.value(a).as_slice(), t3.value(c).as_slice());
    }

    /// f64 oracle for the encoder: per-row dense dot products over every
    /// layout block, with static/calendar/embedding broadcast by index.
    fn encoder_oracle(m: &Model, inputs: &BatchInputs, out_width: usize) -> Vec<Vec<f64>> {
        let n = inputs.num_nodes;
        let emb = m.store.lookup("embedding").map(|id| m.store.value(id).clone());
        let bias = m.store.value(m.store.lookup("enc.bias").unwrap());
        let mut out = vec![vec![0.0f64; out_width]; inputs.batch_size * n];
        for (r, row) in out.iter_mut().enumerate() {
            let (b, v) = (r / n, r % n);
            for c in 0..out_width {
                let mut acc = bias.get(0, c) as f64;
                let mut dyn_at = 0;
                for (name, width) in m.layout.blocks() {
                    if *width == 0 {
                        continue;
                    }
                    let w = m.store.value(m.store.lookup(&format!("enc.{name}.w")).unwrap());
                    for j in 0..*width {
                        let x = if name.starts_with("dyn_") || name == "obs_indicator" {
                            inputs.dyn_block.get(r, dyn_at + j)
                        } else if name == "static" {
                            inputs.static_enc.get(v, j)
                        } else if name == "calendar" {
                            inputs.calendar.get(b, j)
                        } else {
                            emb.as_ref().unwrap().get(v, j)
                        };
                        acc += x as f64 * w.get(j, c) as f64;
                    }
                    if name.starts_with("dyn_") || name == "obs_indicator" {
                        dyn_at += width;
                    }
                }
                *row.get_mut(c).unwrap() = acc;
            }
        }
        out
    }

    #[test]
    fn linear_matches_dense_oracle() {
        let layout = tiny_layout(4, 3, 2);
        let m = Model::init(ModelKind::Linear, layout, InputChannels::VolumeOnly, 5, 3, 15).unwrap();
        let mut r = rng(16);
        let inputs = tiny_inputs(Tensor::uniform(6, 4, 1.0, &mut r), Tensor::uniform(3, 3, 1.0, &mut r), 2, 3);
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &inputs, None).unwrap();
        let oracle = encoder_oracle(&m, &inputs, 5);
        for row in 0..6 {
            for c in 0..5 {
                let got = tape.value(out).get(row, c) as f64;
                assert!((got - oracle[row][c]).abs() < 1e-4, "row {row} col {c}");
            }
        }
    }

    #[test]
    fn encoder_equals_materialized_assembly() {
        // Full-pipeline check: the piece-wise encoder equals multiplying the
        // materialized [B*n, D_in] matrix by the stacked weight blocks.
        let store = random_store(60, 3, 0.2, 17);
        let statics = crate::graph::StaticFeatures::from_columns(
            3,
            (0..21).map(|i| i as f32).collect(),
            vec![0, 0, 0, 0, 1, 0, 2, 0, 1, 1, 0, 0],
            vec![0; 45],
        );
        let stats = crate::featurize::NormStats::compute(&store, 40, &statics).unwrap();
        let static_enc = crate::featurize::encode_static(&statics, &stats);
        let layout =
            crate::featurize::FeatureLayout::build(6, InputChannels::All, static_enc.cols(), 4);
        let m = Model::init(ModelKind::Linear, layout.clone(), InputChannels::All, 3, 3, 18).unwrap();
        let spec = WindowSpec::new(6, 3).unwrap();
        let anchors = [10, 25, 41];
        let inputs = build_inputs(&store, &anchors, spec, InputChannels::All, &stats, &static_enc);
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &inputs, None).unwrap();

        let emb_id = m.store.lookup("embedding").unwrap();
        let assembled = crate::featurize::assemble_input(
            &store,
            &anchors,
            spec,
            InputChannels::All,
            &stats,
            &static_enc,
            m.store.value(emb_id),
            &layout,
        )
        .unwrap();
        // Stack the block weights into one D_in x H matrix, f64 product.
        let d_in = layout.width();
        let bias = m.store.value(m.store.lookup("enc.bias").unwrap()).clone();
        let mut w_full = vec![vec![0.0f64; 3]; d_in];
        let mut at = 0;
        for (name, width) in layout.blocks() {
            if *width == 0 {
                continue;
            }
            let w = m.store.value(m.store.lookup(&format!("enc.{name}.w")).unwrap());
            for j in 0..*width {
                for c in 0..3 {
                    w_full[at + j][c] = w.get(j, c) as f64;
                }
            }
            at += width;
        }
        for r in 0..assembled.rows() {
            for c in 0..3 {
                let mut acc = bias.get(0, c) as f64;
                for j in 0..d_in {
                    acc += assembled.get(r, j) as f64 * w_full[j][c];
                }
                let got = tape.value(out).get(r, c) as f64;
                assert!((got - acc).abs() < 1e-4, "row {r} col {c}: {got} vs {acc}");
            }
        }
    }

    // ===== GNN forward =====

    fn gnn_model(config: GnnConfig, t: usize, n: usize, seed: u64) -> Model {
        let layout = tiny_layout(t, 2, 2);
        Model::init(ModelKind::Gnn(config), layout, InputChannels::VolumeOnly, config.horizon, n, seed)
            .unwrap()
    }

    fn random_inputs(t: usize, n: usize, batch: usize, seed: u64) -> BatchInputs {
        let mut r = rng(seed);
        tiny_inputs(
            Tensor::uniform(batch * n, t, 1.0, &mut r),
            Tensor::uniform(n, 2, 1.0, &mut r),
            batch,
            n,
        )
    }

    #[test]
    fn gnn_forward_shapes_and_determinism() {
        for aggregation in [Aggregation::Mean, Aggregation::Attention] {
            let config = GnnConfig { hidden: 8, heads: 2, horizon: 5, aggregation, ..GnnConfig::default() };
            let m = gnn_model(config, 3, 4, 21);
            let g = graph_from(4, &[(0, 1), (1, 2), (2, 3), (3, 0), (1, 3)]);
            let segs = BatchSegments::build(&g, 2, &config);
            let inputs = random_inputs(3, 4, 2, 22);
            let mut t1 = Tape::new();
            let o1 = m.forward(&mut t1, &inputs, Some(&segs)).unwrap();
            assert_eq!(t1.value(o1).shape(), (8, 5));
            assert!(t1.value(o1).all_finite());
            let mut t2 = Tape::new();
            let o2 = m.forward(&mut t2, &inputs, Some(&segs)).unwrap();
            assert_eq!(t1.value(o1).as_slice(), t2.value(o2).as_slice());
        }
    }

    #[test]
    fn gnn_rejects_missing_or_mismatched_segments() {
        let config = GnnConfig { hidden: 8, heads: 2, horizon: 2, ..GnnConfig::default() };
        let m = gnn_model(config, 2, 3, 23);
        let inputs = random_inputs(2, 3, 1, 24);
        let mut tape = Tape::new();
        assert!(m.forward(&mut tape, &inputs, None).is_err());
        let g = graph_from(3, &[(0, 1)]);
        let wrong_batch = BatchSegments::build(&g, 4, &config);
        assert!(m.forward(&mut tape, &inputs, Some(&wrong_batch)).is_err());
    }

    #[test]
    fn edgeless_attention_weights_are_exactly_one() {
        let config = GnnConfig {
            hidden: 8,
            heads: 2,
            horizon: 3,
            aggregation: Aggregation::Attention,
            ..GnnConfig::default()
        };
        let m = gnn_model(config, 2, 5, 25);
        let g = graph_from(5, &[]);
        let segs = BatchSegments::build(&g, 1, &config);
        let inputs = random_inputs(2, 5, 1, 26);
        let mut tape = Tape::new();
        let (_, trace) = m.forward_traced(&mut tape, &inputs, Some(&segs)).unwrap();
        assert_eq!(trace.attention_weights.len(), config.layers);
        for w in trace.attention_weights {
            assert!(tape.value(w).iter().all(|x| *x == 1.0));
        }
    }

    #[test]
    fn edgeless_predictions_are_per_node() {
        // With no edges every node's prediction depends only on its own
        // inputs: perturbing one node leaves the others bit-identical.
        for aggregation in [Aggregation::Mean, Aggregation::Attention] {
            let config = GnnConfig { hidden: 8, heads: 2, horizon: 3, aggregation, ..GnnConfig::default() };
            let m = gnn_model(config, 2, 4, 27);
            let g = graph_from(4, &[]);
            let segs = BatchSegments::build(&g, 1, &config);
            let base = random_inputs(2, 4, 1, 28);
            let mut bumped = random_inputs(2, 4, 1, 28);
            bumped.dyn_block.set(1, 0, 9.0);
            let mut t1 = Tape::new();
            let o1 = m.forward(&mut t1, &base, Some(&segs)).unwrap();
            let mut t2 = Tape::new();
            let o2 = m.forward(&mut t2, &bumped, Some(&segs)).unwrap();
            for v in [0usize, 2, 3] {
                assert_eq!(t1.value(o1).row(v), t2.value(o2).row(v));
            }
            assert_ne!(t1.value(o1).row(1), t2.value(o2).row(1));
        }
    }

    #[test]
    fn attention_weights_sum_to_one_per_segment() {
        let config = GnnConfig {
            hidden: 8,
            heads: 2,
            horizon: 2,
            aggregation: Aggregation::Attention,
            ..GnnConfig::default()
        };
        let m = gnn_model(config, 3, 6, 29);
        let g = graph_from(6, &[(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3), (0, 3), (2, 5)]);
        let segs = BatchSegments::build(&g, 2, &config);
        let inputs = random_inputs(3, 6, 2, 30);
        let mut tape = Tape::new();
        let (_, trace) = m.forward_traced(&mut tape, &inputs, Some(&segs)).unwrap();
        for w in trace.attention_weights {
            let weights = tape.value(w);
            for s in 0..segs.fwd.num_segments() {
                let range = segs.fwd.range(s);
                if range.is_empty() {
                    continue;
                }
                for h in 0..config.heads {
                    let sum: f64 = range.clone().map(|e| weights.get(e, h) as f64).sum();
                    assert!((sum - 1.0).abs() < 1e-5, "segment {s} head {h} sums to {sum}");
                }
            }
        }
    }

    #[test]
    fn attention_equals_mean_on_identical_representations() {
        // When every member of a neighborhood shares one representation the
        // softmax weights are irrelevant, so attention with value = identity
        // and output = the mean path's linear reproduces mean aggregation.
        let d = 6;
        let mean_cfg = GnnConfig { hidden: d, heads: 2, horizon: 2, ..GnnConfig::default() };
        let att_cfg = GnnConfig { aggregation: Aggregation::Attention, ..mean_cfg };
        let m_mean = gnn_model(mean_cfg, 2, 4, 31);
        let mut m_att = gnn_model(att_cfg, 2, 4, 32);
        let w = m_mean.store.value(m_mean.store.lookup("blk0.agg.w").unwrap()).clone();
        let b = m_mean.store.value(m_mean.store.lookup("blk0.agg.b").unwrap()).clone();
        let set = |m: &mut Model, name: &str, t: Tensor| {
            let id = m.store.lookup(name).unwrap();
            *m.store.value_mut(id) = t;
        };
        set(&mut m_att, "blk0.agg.wo", w);
        set(&mut m_att, "blk0.agg.bo", b);
        set(&mut m_att, "blk0.agg.wv", Tensor::from_fn(d, d, |r, c| if r == c { 1.0 } else { 0.0 }));
        set(&mut m_att, "blk0.agg.bv", Tensor::zeros(1, d));

        let g = graph_from(4, &[(0, 1), (2, 1), (3, 1), (1, 0), (2, 3)]);
        let seg = batched_segments(&g, 1, true, false);
        // One shared representation for every node.
        let mut row = vec![0.0f32; d];
        let mut r = rng(33);
        for x in row.iter_mut() {
            *x = r.gen_range(-1.0..1.0);
        }
        let mut shared = Tensor::zeros(4, d);
        for v in 0..4 {
            shared.row_mut(v).copy_from_slice(&row);
        }
        let mut t1 = Tape::new();
        let x1 = t1.constant(shared.clone());
        let a_mean = m_mean.aggregate(&mut t1, &mean_cfg, x1, &seg, "blk0.agg", None);
        let mut t2 = Tape::new();
        let x2 = t2.constant(shared);
        let a_att = m_att.aggregate(&mut t2, &att_cfg, x2, &seg, "blk0.agg", None);
        for v in 0..4 {
            for c in 0..d {
                let diff = (t1.value(a_mean).get(v, c) - t2.value(a_att).get(v, c)).abs();
                assert!(diff < 1e-5, "node {v} col {c} differs by {diff}");
            }
        }
    }

    #[test]
    fn mean_aggregate_matches_dense_oracle() {
        // Random graphs up to n = 32: segment mean + linear must equal the
        // row-normalized dense adjacency product computed in f64.
        let d = 8;
        let config = GnnConfig { hidden: d, heads: 2, horizon: 2, ..GnnConfig::default() };
        let mut r = rng(34);
        for trial in 0..10 {
            let n = r.gen_range(2..=32);
            let mut edges = Vec::new();
            for u in 0..n {
                for v in 0..n {
                    if u != v && r.gen_bool(0.15) {
                        edges.push((u, v));
                    }
                }
            }
            let g = graph_from(n, &edges);
            let m = gnn_model(config, 2, n, 35 + trial);
            let seg = batched_segments(&g, 1, true, false);
            let x = Tensor::uniform(n, d, 1.0, &mut r);
            let mut tape = Tape::new();
            let xid = tape.constant(x.clone());
            let agg = m.aggregate(&mut tape, &config, xid, &seg, "blk0.agg", None);

            let w = m.store.value(m.store.lookup("blk0.agg.w").unwrap());
            let b = m.store.value(m.store.lookup("blk0.agg.b").unwrap());
            for v in 0..n {
                // Dense row: self plus in-neighbors, normalized by count.
                let mut members = vec![v];
                members.extend_from_slice(g.in_neighbors(v));
                let mut mean = vec![0.0f64; d];
                for &u in &members {
                    for j in 0..d {
                        mean[j] += x.get(u, j) as f64;
                    }
                }
                for j in mean.iter_mut() {
                    *j /= members.len() as f64;
                }
                for c in 0..d {
                    let mut want = b.get(0, c) as f64;
                    for j in 0..d {
                        want += mean[j] * w.get(j, c) as f64;
                    }
                    let got = tape.value(agg).get(v, c) as f64;
                    assert!((got - want).abs() < 1e-5, "n {n} node {v} col {c}: {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn locality_is_exact_for_l_hops() {
        // Path 0 -> 1 -> 2 -> 3 -> 4 with L = 2: a perturbation at node 0
        // may reach nodes 0..2 and must leave 3 and 4 bit-identical.
        let config = GnnConfig { hidden: 8, heads: 2, horizon: 3, layers: 2, ..GnnConfig::default() };
        let m = gnn_model(config, 2, 5, 40);
        let g = graph_from(5, &[(0, 1), (1, 2), (2, 3), (3, 4)]);
        let segs = BatchSegments::build(&g, 1, &config);
        let base = random_inputs(2, 5, 1, 41);
        let mut bumped = random_inputs(2, 5, 1, 41);
        bumped.dyn_block.set(0, 0, bumped.dyn_block.get(0, 0) + 1.5);
        bumped.dyn_block.set(0, 1, -2.0);
        let mut t1 = Tape::new();
        let o1 = m.forward(&mut t1, &base, Some(&segs)).unwrap();
        let mut t2 = Tape::new();
        let o2 = m.forward(&mut t2, &bumped, Some(&segs)).unwrap();
        assert_ne!(t1.value(o1).row(0), t2.value(o2).row(0));
        assert_ne!(t1.value(o1).row(1), t2.value(o2).row(1));
        assert_ne!(t1.value(o1).row(2), t2.value(o2).row(2));
        assert_eq!(t1.value(o1).row(3), t2.value(o2).row(3));
        assert_eq!(t1.value(o1).row(4), t2.value(o2).row(4));
    }

    #[test]
    fn node_permutation_equivariance_is_bit_exact() {
        for aggregation in [Aggregation::Mean, Aggregation::Attention] {
            let config = GnnConfig {
                hidden: 8,
                heads: 2,
                horizon: 3,
                layers: 2,
                aggregation,
                ..GnnConfig::default()
            };
            let n = 7;
            let batch = 2;
            let edges = [(0usize, 1usize), (1, 2), (2, 0), (3, 4), (4, 5), (5, 6), (6, 3), (0, 4), (2, 6), (5, 1)];
            let perm: [usize; 7] = [3, 0, 6, 2, 5, 1, 4];

            let m = gnn_model(config, 3, n, 50);
            let inputs = random_inputs(3, n, batch, 51);
            let g = graph_from(n, &edges);
            let segs = BatchSegments::build(&g, batch, &config);
            let mut t1 = Tape::new();
            let out = m.forward(&mut t1, &inputs, Some(&segs)).unwrap();

            // Permuted world: relabel edges, scatter input rows, permute the
            // embedding parameter rows; weights stay shared.
            let mut m2 = gnn_model(config, 3, n, 50);
            let emb = m.store.value(m.store.lookup("embedding").unwrap()).clone();
            let mut emb2 = emb.clone();
            for v in 0..n {
                emb2.row_mut(perm[v]).copy_from_slice(emb.row(v));
            }
            let id2 = m2.store.lookup("embedding").unwrap();
            *m2.store.value_mut(id2) = emb2;

            let mut dyn2 = Tensor::zeros(batch * n, 3);
            let mut static2 = Tensor::zeros(n, 2);
            for v in 0..n {
                static2.row_mut(perm[v]).copy_from_slice(inputs.static_enc.row(v));
                for b in 0..batch {
                    dyn2.row_mut(b * n + perm[v]).copy_from_slice(inputs.dyn_block.row(b * n + v));
                }
            }
            let inputs2 = tiny_inputs(dyn2, static2, batch, n);
            let edges2: Vec<(usize, usize)> = edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
            let g2 = graph_from(n, &edges2);
            let segs2 = BatchSegments::build(&g2, batch, &config);
            let mut t2 = Tape::new();
            let out2 = m2.forward(&mut t2, &inputs2, Some(&segs2)).unwrap();

            for b in 0..batch {
                for v in 0..n {
                    assert_eq!(
                        t1.value(out).row(b * n + v),
                        t2.value(out2).row(b * n + perm[v]),
                        "aggregation {aggregation:?} node {v} copy {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn footprint_matches_traced_allocation_tally() {
        let g = graph_from(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (1, 4)]);
        for aggregation in [Aggregation::Mean, Aggregation::Attention] {
            for direction in [Direction::In, Direction::InOut] {
                let config = GnnConfig {
                    hidden: 8,
                    heads: 2,
                    horizon: 3,
                    layers: 2,
                    aggregation,
                    direction,
                    ..GnnConfig::default()
                };
                let m = gnn_model(config, 4, 5, 60);
                let batch = 3;
                let segs = BatchSegments::build(&g, batch, &config);
                let inputs = random_inputs(4, 5, batch, 61);
                let mut tape = Tape::new();
                let (_, trace) = m.forward_traced(&mut tape, &inputs, Some(&segs)).unwrap();
                let per_block = activation_footprint(&config, 5, g.num_edges(), 4);
                assert_eq!(
                    trace.block_activation_scalars,
                    batch * config.layers * per_block,
                    "{aggregation:?} {direction:?}"
                );
            }
        }
    }

    #[test]
    fn footprint_ignores_lookback_and_scales_with_nodes() {
        let config = GnnConfig {
            hidden: 16,
            heads: 4,
            horizon: 12,
            aggregation: Aggregation::Attention,
            ..GnnConfig::default()
        };
        let base = activation_footprint(&config, 100, 300, 12);
        assert_eq!(base, activation_footprint(&config, 100, 300, 72));
        assert_eq!(base, activation_footprint(&config, 100, 300, 1));
        assert_eq!(2 * base, activation_footprint(&config, 200, 600, 12));
    }

    // ===== Checkpoints =====

    fn small_stats(n: usize) -> NormStats {
        NormStats {
            speed_mean: 42.5,
            speed_std: 7.25,
            volume_mean: 11.0,
            volume_std: 3.5,
            node_speed_means: (0..n).map(|v| 30.0 + v as f32 * 0.125).collect(),
            global_speed_mean: 41.0,
            static_means: vec![1.0, -2.5, 0.0, 3.25, 0.5, 0.75, -0.125],
            static_stds: vec![1.0, 2.0, 1.5, 0.25, 1.0, 1.0, 2.0],
            cat_cardinalities: [3, 2, 4, 1],
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let config = GnnConfig {
            hidden: 8,
            heads: 2,
            horizon: 4,
            aggregation: Aggregation::Attention,
            direction: Direction::InOut,
            ..GnnConfig::default()
        };
        let m = gnn_model(config, 3, 4, 70);
        let stats = small_stats(4);
        save_checkpoint(&path, &m, &stats).unwrap();
        let (m2, stats2) = load_checkpoint(&path).unwrap();
        assert_eq!(stats, stats2);
        assert_eq!(m.layout, m2.layout);
        assert_eq!(m.kind, m2.kind);
        assert_eq!(m.channels, m2.channels);
        assert_eq!(m.num_nodes, m2.num_nodes);
        assert_eq!(m.store.len(), m2.store.len());
        for id in m.store.ids() {
            let name = m.store.name(id);
            let other = m2.store.lookup(name).unwrap();
            let (a, b) = (m.store.value(id), m2.store.value(other));
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "param {name}");
            }
        }
        // Serialization is byte-stable.
        let path2 = dir.path().join("again.ckpt");
        save_checkpoint(&path2, &m2, &stats2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

        // The loaded model forwards identically.
        let g = graph_from(4, &[(0, 1), (1, 2), (2, 3)]);
        let segs = BatchSegments::build(&g, 1, &config);
        let inputs = random_inputs(3, 4, 1, 71);
        let mut t1 = Tape::new();
        let o1 = m.forward(&mut t1, &inputs, Some(&segs)).unwrap();
        let mut t2 = Tape::new();
        let o2 = m2.forward(&mut t2, &inputs, Some(&segs)).unwrap();
        assert_eq!(t1.value(o1).as_slice(), t2.value(o2).as_slice());
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = Model::init(
            ModelKind::Linear,
            tiny_layout(2, 1, 0),
            InputChannels::VolumeOnly,
            2,
            2,
            72,
        )
        .unwrap();
        save_checkpoint(&path, &m, &small_stats(2)).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(load_checkpoint(&path).err().unwrap().to_string().contains("bad magic"));

        let mut bad = good.clone();
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(load_checkpoint(&path).err().unwrap().to_string().contains("version"));

        std::fs::write(&path, &good[..good.len() - 5]).unwrap();
        assert!(load_checkpoint(&path).err().unwrap().to_string().contains("truncated"));
    }
}
