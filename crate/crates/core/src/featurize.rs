//! Model input construction: imputed dynamic history, static encodings,
//! calendar features and learnable node embeddings.
//!
//! Every per-node input vector is a concatenation of named blocks described
//! by a [`FeatureLayout`]. Normalization statistics come from the train
//! split only and travel with the checkpoint, so evaluation reproduces the
//! training-time encoding exactly.

use chrono::{Datelike, NaiveDateTime};
use rand::Rng;

use crate::graph::{StaticFeatures, NUM_NUMERIC};
use crate::numerics::Tensor;
use crate::series::{Channel, SeriesStore, WindowSpec};
use crate::{Error, Result};

// ===== Calendar =====

/// Widths of the calendar block: one-hots (7 + 53 + 12) plus a (sin, cos)
/// pair for each of the three fields.
pub const K_CAL: usize = 7 + 53 + 12 + 6;

/// Civil-calendar context of one anchor timestamp.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CalendarRecord {
    /// Monday is 0.
    pub day_of_week: usize,
    /// ISO week number minus one, clamped to 52.
    pub week_of_year: usize,
    /// January is 0.
    pub month: usize,
}

impl CalendarRecord {
    pub fn from_time(ts: NaiveDateTime) -> Self {
        CalendarRecord {
            day_of_week: ts.weekday().num_days_from_monday() as usize,
            week_of_year: (ts.iso_week().week() as usize - 1).min(52),
            month: ts.month() as usize - 1,
        }
    }

    /// Writes the encoded block: [dow 7][week 53][month 12][3 x (sin, cos)].
    pub fn write_features(&self, out: &mut [f32]) {
        assert_eq!(out.len(), K_CAL);
        out.fill(0.0);
        out[self.day_of_week] = 1.0;
        out[7 + self.week_of_year] = 1.0;
        out[7 + 53 + self.month] = 1.0;
        let trig = 7 + 53 + 12;
        for (i, (value, period)) in [
            (self.day_of_week, 7.0f64),
            (self.week_of_year, 53.0),
            (self.month, 12.0),
        ]
        .into_iter()
        .enumerate()
        {
            let angle = std::f64::consts::TAU * value as f64 / period;
            out[trig + 2 * i] = angle.sin() as f32;
            out[trig + 2 * i + 1] = angle.cos() as f32;
        }
    }

    pub fn features(&self) -> Vec<f32> {
        let mut out = vec![0.0; K_CAL];
        self.write_features(&mut out);
        out
    }
}

/// Calendar context of `anchor` steps past the series start.
pub fn calendar_features(start: NaiveDateTime, anchor: usize) -> CalendarRecord {
    CalendarRecord::from_time(start + chrono::Duration::minutes(crate::series::STEP_MINUTES * anchor as i64))
}

/// Stacked calendar blocks for a batch of anchors, one row per anchor.
pub fn calendar_matrix(start: NaiveDateTime, anchors: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(anchors.len(), K_CAL);
    for (b, &a) in anchors.iter().enumerate() {
        calendar_features(start, a).write_features(out.row_mut(b));
    }
    out
}

// ===== Input channel selection =====

/// Which dynamic history channels are fed to the model. The observation
/// indicator accompanies speed because only speed has gaps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputChannels {
    All,
    SpeedOnly,
    VolumeOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DynChannel {
    Speed,
    Volume,
    Indicator,
}

impl DynChannel {
    pub fn block_name(self) -> &'static str {
        match self {
            DynChannel::Speed => "dyn_speed",
            DynChannel::Volume => "dyn_volume",
            DynChannel::Indicator => "obs_indicator",
        }
    }
}

impl InputChannels {
    pub fn dyn_channels(self) -> &'static [DynChannel] {
        match self {
            InputChannels::All => &[DynChannel::Speed, DynChannel::Volume, DynChannel::Indicator],
            InputChannels::SpeedOnly => &[DynChannel::Speed, DynChannel::Indicator],
            InputChannels::VolumeOnly => &[DynChannel::Volume],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InputChannels::All => "all",
            InputChannels::SpeedOnly => "speed_only",
            InputChannels::VolumeOnly => "volume_only",
        }
    }
}

impl std::str::FromStr for InputChannels {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(InputChannels::All),
            "speed_only" => Ok(InputChannels::SpeedOnly),
            "volume_only" => Ok(InputChannels::VolumeOnly),
            other => Err(Error::config(format!(
                "unknown input_channels {other:?}, expected all|speed_only|volume_only"
            ))),
        }
    }
}

// ===== Train-split statistics =====

/// Everything needed to reproduce the training-time encoding: per-channel
/// z-score statistics, per-node speed means for imputation, and the static
/// table statistics. Computed strictly from timesteps before `train_end`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub speed_mean: f32,
    pub speed_std: f32,
    pub volume_mean: f32,
    pub volume_std: f32,
    /// Raw km/h per node; nodes never observed in train carry the global mean.
    pub node_speed_means: Vec<f32>,
    pub global_speed_mean: f32,
    pub static_means: Vec<f32>,
    pub static_stds: Vec<f32>,
    pub cat_cardinalities: [usize; 4],
}

fn population_stats(values: impl Iterator<Item = f64>) -> (f64, f64, usize) {
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for x in values {
        sum += x;
        sum_sq += x * x;
        count += 1;
    }
    if count == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = sum / count as f64;
    let var = (sum_sq / count as f64 - mean * mean).max(0.0);
    (mean, var.sqrt(), count)
}

impl NormStats {
    pub fn compute(store: &SeriesStore, train_end: usize, statics: &StaticFeatures) -> Result<Self> {
        assert!(train_end <= store.num_steps());
        let n = store.num_nodes();

        let mut node_sum = vec![0.0f64; n];
        let mut node_count = vec![0usize; n];
        for t in 0..train_end {
            let row = store.speed_row(t);
            for v in 0..n {
                if !row[v].is_nan() {
                    node_sum[v] += row[v] as f64;
                    node_count[v] += 1;
                }
            }
        }
        let total: usize = node_count.iter().sum();
        if total == 0 {
            return Err(Error::data("no observed speed values in the train split"));
        }
        let global_speed_mean = (node_sum.iter().sum::<f64>() / total as f64) as f32;
        let node_speed_means: Vec<f32> = (0..n)
            .map(|v| {
                if node_count[v] == 0 {
                    global_speed_mean
                } else {
                    (node_sum[v] / node_count[v] as f64) as f32
                }
            })
            .collect();

        let speed_values = (0..train_end)
            .flat_map(|t| store.speed_row(t).iter())
            .filter(|x| !x.is_nan())
            .map(|x| *x as f64);
        let (speed_mean, speed_std, _) = population_stats(speed_values);
        let volume_values = (0..train_end).flat_map(|t| store.volume_row(t).iter()).map(|x| *x as f64);
        let (volume_mean, volume_std, _) = population_stats(volume_values);

        let mut static_means = Vec::with_capacity(NUM_NUMERIC);
        let mut static_stds = Vec::with_capacity(NUM_NUMERIC);
        for c in 0..NUM_NUMERIC {
            let col = (0..statics.num_nodes()).map(|v| statics.numeric(v, c)).filter(|x| !x.is_nan());
            let (mean, std, _) = population_stats(col.map(|x| x as f64));
            static_means.push(mean as f32);
            static_stds.push(std as f32);
        }

        Ok(NormStats {
            speed_mean: speed_mean as f32,
            speed_std: guard_std(speed_std as f32),
            volume_mean: volume_mean as f32,
            volume_std: guard_std(volume_std as f32),
            node_speed_means,
            global_speed_mean,
            static_means,
            static_stds,
            cat_cardinalities: statics.cat_cardinalities(),
        })
    }

    pub fn normalize(&self, channel: Channel, x: f32) -> f32 {
        match channel {
            Channel::Speed => (x - self.speed_mean) / self.speed_std,
            Channel::Volume => (x - self.volume_mean) / self.volume_std,
        }
    }

    pub fn denormalize(&self, channel: Channel, z: f32) -> f32 {
        match channel {
            Channel::Speed => z * self.speed_std + self.speed_mean,
            Channel::Volume => z * self.volume_std + self.volume_mean,
        }
    }
}

fn guard_std(std: f32) -> f32 {
    if std > 0.0 {
        std
    } else {
        1.0
    }
}

// ===== Imputation =====

/// Fills speed gaps in one node's history with its train-mean speed and
/// reports the original observation pattern as a {0, 1} indicator.
pub fn impute_history(history: &[f32], node_mean: f32) -> (Vec<f32>, Vec<f32>) {
    let mut dense = Vec::with_capacity(history.len());
    let mut indicator = Vec::with_capacity(history.len());
    for &x in history {
        if x.is_nan() {
            dense.push(node_mean);
            indicator.push(0.0);
        } else {
            dense.push(x);
            indicator.push(1.0);
        }
    }
    (dense, indicator)
}

// ===== Static encoding =====

/// Encoded static width for the given statistics: z-scored numerics, one-hot
/// categoricals, pass-through booleans.
pub fn static_width(stats: &NormStats) -> usize {
    NUM_NUMERIC + stats.cat_cardinalities.iter().sum::<usize>() + crate::graph::NUM_BOOLEAN
}

/// Encodes the static table into an `n x K_static` matrix. Missing numerics
/// map to the column mean (z-score 0); category codes outside the train-time
/// cardinality map to the reserved "unknown" code 0.
pub fn encode_static(statics: &StaticFeatures, stats: &NormStats) -> Tensor {
    let n = statics.num_nodes();
    let k = static_width(stats);
    let mut out = Tensor::zeros(n, k);
    for v in 0..n {
        let row = out.row_mut(v);
        let mut at = 0;
        for c in 0..NUM_NUMERIC {
            let x = statics.numeric(v, c);
            let std = guard_std(stats.static_stds[c]);
            row[at] = if x.is_nan() { 0.0 } else { (x - stats.static_means[c]) / std };
            at += 1;
        }
        for (c, &card) in stats.cat_cardinalities.iter().enumerate() {
            let code = statics.categorical(v, c) as usize;
            let code = if code < card { code } else { 0 };
            row[at + code] = 1.0;
            at += card;
        }
        for c in 0..crate::graph::NUM_BOOLEAN {
            row[at] = if statics.boolean(v, c) { 1.0 } else { 0.0 };
            at += 1;
        }
        debug_assert_eq!(at, k);
    }
    out
}

// ===== Layout =====

/// Ordered partition of the per-node input vector into named contiguous
/// blocks. Serialized into checkpoints so evaluation rebuilds inputs with
/// the training layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureLayout {
    blocks: Vec<(String, usize)>,
}

impl FeatureLayout {
    pub fn from_blocks(blocks: Vec<(String, usize)>) -> Self {
        FeatureLayout { blocks }
    }

    /// Standard layout: dynamic history blocks in channel order, then
    /// static, calendar, embedding.
    pub fn build(lookback: usize, channels: InputChannels, k_static: usize, d_emb: usize) -> Self {
        let mut blocks = Vec::new();
        for ch in channels.dyn_channels() {
            blocks.push((ch.block_name().to_string(), lookback));
        }
        blocks.push(("static".to_string(), k_static));
        blocks.push(("calendar".to_string(), K_CAL));
        blocks.push(("embedding".to_string(), d_emb));
        FeatureLayout { blocks }
    }

    pub fn width(&self) -> usize {
        self.blocks.iter().map(|(_, w)| w).sum()
    }

    pub fn blocks(&self) -> &[(String, usize)] {
        &self.blocks
    }

    /// (offset, width) of a named block; zero-width blocks are reported too.
    pub fn span(&self, name: &str) -> Option<(usize, usize)> {
        let mut at = 0;
        for (b, w) in &self.blocks {
            if b == name {
                return Some((at, *w));
            }
            at += w;
        }
        None
    }

    /// Combined width of the dynamic history blocks, which always lead.
    pub fn dyn_width(&self) -> usize {
        self.blocks
            .iter()
            .filter(|(b, _)| b.starts_with("dyn_") || b == "obs_indicator")
            .map(|(_, w)| w)
            .sum()
    }

    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for (b, w) in &self.blocks {
            s.push_str(&format!("{b} {w}\n"));
        }
        s
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        let mut blocks = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (name, width) = line
                .rsplit_once(' ')
                .ok_or_else(|| Error::data(format!("bad layout line {line:?}")))?;
            let width: usize = width
                .parse()
                .map_err(|_| Error::data(format!("bad layout width in {line:?}")))?;
            blocks.push((name.to_string(), width));
        }
        if blocks.is_empty() {
            return Err(Error::data("empty feature layout"));
        }
        Ok(FeatureLayout { blocks })
    }
}

// ===== Embeddings =====

/// Learnable per-node rows, initialized uniform in [-1/sqrt(d), 1/sqrt(d)].
/// The table becomes an optimizer parameter; this type only fixes the init.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub values: Tensor,
}

impl EmbeddingTable {
    pub fn init(num_nodes: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let bound = if dim == 0 { 0.0 } else { 1.0 / (dim as f32).sqrt() };
        EmbeddingTable { values: Tensor::uniform(num_nodes, dim, bound, rng) }
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

// ===== Assembly =====

/// Normalized dynamic history for a batch of anchors: `[B * n, t * C_dyn]`
/// with row `b * n + v` and the per-channel blocks in layout order, each
/// column running oldest to newest. Speed gaps are imputed with the node's
/// train mean before z-scoring; the indicator block carries the raw pattern.
pub fn dyn_history_matrix(
    store: &SeriesStore,
    anchors: &[usize],
    spec: WindowSpec,
    channels: InputChannels,
    stats: &NormStats,
) -> Tensor {
    let n = store.num_nodes();
    let t = spec.lookback;
    let chans = channels.dyn_channels();
    let mut out = Tensor::zeros(anchors.len() * n, t * chans.len());
    for (b, &a) in anchors.iter().enumerate() {
        debug_assert!(a >= t);
        for (s, step) in (a - t..a).enumerate() {
            let speed = store.speed_row(step);
            let volume = store.volume_row(step);
            for v in 0..n {
                let row = out.row_mut(b * n + v);
                for (c, ch) in chans.iter().enumerate() {
                    row[c * t + s] = match ch {
                        DynChannel::Speed => {
                            let x = if speed[v].is_nan() { stats.node_speed_means[v] } else { speed[v] };
                            stats.normalize(Channel::Speed, x)
                        }
                        DynChannel::Volume => stats.normalize(Channel::Volume, volume[v]),
                        DynChannel::Indicator => {
                            if speed[v].is_nan() {
                                0.0
                            } else {
                                1.0
                            }
                        }
                    };
                }
            }
        }
    }
    out
}

/// Materializes the full `[B * n, D_in]` input matrix in layout order. The
/// model's fast path multiplies the blocks separately; this dense form is
/// the reference the fast path is tested against.
pub fn assemble_input(
    store: &SeriesStore,
    anchors: &[usize],
    spec: WindowSpec,
    channels: InputChannels,
    stats: &NormStats,
    static_enc: &Tensor,
    embedding: &Tensor,
    layout: &FeatureLayout,
) -> Result<Tensor> {
    let n = store.num_nodes();
    let d_in = layout.width();
    let dyn_block = dyn_history_matrix(store, anchors, spec, channels, stats);
    if layout.dyn_width() != dyn_block.cols() {
        return Err(Error::config(format!(
            "layout dynamic width {} does not match t * C_dyn = {}",
            layout.dyn_width(),
            dyn_block.cols()
        )));
    }
    for (name, have, want_rows) in [
        ("static", static_enc, n),
        ("embedding", embedding, n),
    ] {
        let span = layout.span(name).ok_or_else(|| Error::config(format!("layout lacks block {name}")))?;
        if have.cols() != span.1 || have.rows() != want_rows {
            return Err(Error::config(format!(
                "{name} block is {}x{}, layout wants {}x{}",
                have.rows(),
                have.cols(),
                want_rows,
                span.1
            )));
        }
    }
    let cal_span = layout
        .span("calendar")
        .ok_or_else(|| Error::config("layout lacks block calendar"))?;
    if cal_span.1 != 0 && cal_span.1 != K_CAL {
        return Err(Error::config(format!("calendar block width {} must be 0 or {K_CAL}", cal_span.1)));
    }
    let calendar = if cal_span.1 == 0 { None } else { Some(calendar_matrix(store.start(), anchors)) };

    let mut out = Tensor::zeros(anchors.len() * n, d_in);
    let chans = channels.dyn_channels();
    let t = spec.lookback;
    for b in 0..anchors.len() {
        for v in 0..n {
            let src = dyn_block.row(b * n + v);
            let dst = out.row_mut(b * n + v);
            let mut at = 0;
            for (name, width) in layout.blocks() {
                let span = &mut dst[at..at + width];
                if let Some(c) = chans.iter().position(|ch| ch.block_name() == name) {
                    debug_assert_eq!(*width, t);
                    span.copy_from_slice(&src[c * t..(c + 1) * t]);
                } else if name == "static" {
                    span.copy_from_slice(static_enc.row(v));
                } else if name == "calendar" {
                    if let Some(cal) = &calendar {
                        span.copy_from_slice(cal.row(b));
                    }
                } else if name == "embedding" {
                    span.copy_from_slice(embedding.row(v));
                } else {
                    return Err(Error::config(format!("unknown layout block {name}")));
                }
                at += width;
            }
        }
    }
    debug_assert!(out.all_finite());
    Ok(out)
}
