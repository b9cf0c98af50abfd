//! Aligned per-node time series, chronological splits and window batching.
//!
//! One store holds both dynamic channels on a shared five-minute grid:
//! `speed` (km/h, NaN where a segment had too few probe vehicles) and
//! `volume` (vehicles per interval, never missing; zero is a real count).
//! Rows are timestamps, so `speed_row(t)` is a contiguous per-node slice.
//!
//! Forecasting windows are described by an anchor `a`, the first predicted
//! timestamp: inputs cover `[a - lookback, a)`, targets `[a, a + horizon)`.
//! An anchor is admissible for a split when its whole target range lies
//! inside the split and enough history exists before it; inputs may reach
//! back across the split boundary, which leaks nothing because earlier
//! splits are strictly in the past.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use chrono::{Duration, NaiveDateTime};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::Tensor;
use crate::{Error, Result};

pub const STEP_MINUTES: i64 = 5;
pub const STEPS_PER_DAY: usize = 288;
pub const STEPS_PER_WEEK: usize = 7 * STEPS_PER_DAY;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Channel {
    Speed,
    Volume,
}

impl Channel {
    pub fn name(self) -> &'static str {
        match self {
            Channel::Speed => "speed",
            Channel::Volume => "volume",
        }
    }
}

impl std::str::FromStr for Channel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "speed" => Ok(Channel::Speed),
            "volume" => Ok(Channel::Volume),
            other => Err(Error::config(format!("unknown channel {other:?}, expected speed|volume"))),
        }
    }
}

// ===== Store =====

#[derive(Clone, Debug, PartialEq)]
pub struct SeriesStore {
    start: NaiveDateTime,
    num_steps: usize,
    num_nodes: usize,
    speed: Vec<f32>,
    volume: Vec<f32>,
}

impl SeriesStore {
    pub fn new(
        start: NaiveDateTime,
        num_nodes: usize,
        speed: Vec<f32>,
        volume: Vec<f32>,
    ) -> Result<Self> {
        if num_nodes == 0 || speed.is_empty() {
            return Err(Error::data("series store needs at least one node and one step"));
        }
        if speed.len() % num_nodes != 0 || speed.len() != volume.len() {
            return Err(Error::data(format!(
                "series length mismatch: speed {}, volume {}, nodes {num_nodes}",
                speed.len(),
                volume.len()
            )));
        }
        if let Some(i) = volume.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::data(format!(
                "volume must be finite and non-negative, offending flat index {i}"
            )));
        }
        Ok(SeriesStore { start, num_steps: speed.len() / num_nodes, num_nodes, speed, volume })
    }

    pub fn start(&self) -> NaiveDateTime {
        self.start
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn time_at(&self, step: usize) -> NaiveDateTime {
        self.start + Duration::minutes(STEP_MINUTES * step as i64)
    }

    pub fn speed_row(&self, t: usize) -> &[f32] {
        &self.speed[t * self.num_nodes..(t + 1) * self.num_nodes]
    }

    pub fn volume_row(&self, t: usize) -> &[f32] {
        &self.volume[t * self.num_nodes..(t + 1) * self.num_nodes]
    }

    pub fn row(&self, channel: Channel, t: usize) -> &[f32] {
        match channel {
            Channel::Speed => self.speed_row(t),
            Channel::Volume => self.volume_row(t),
        }
    }

    pub fn value(&self, channel: Channel, t: usize, v: usize) -> f32 {
        self.row(channel, t)[v]
    }

    /// Whether the value is present; volume is always observed.
    pub fn observed(&self, channel: Channel, t: usize, v: usize) -> bool {
        match channel {
            Channel::Speed => !self.speed_row(t)[v].is_nan(),
            Channel::Volume => true,
        }
    }

    pub fn speed_raw(&self) -> &[f32] {
        &self.speed
    }

    pub fn volume_raw(&self) -> &[f32] {
        &self.volume
    }

    /// Overwrites one channel row; used by tests that corrupt data on purpose.
    pub fn set_value(&mut self, channel: Channel, t: usize, v: usize, x: f32) {
        let n = self.num_nodes;
        match channel {
            Channel::Speed => self.speed[t * n + v] = x,
            Channel::Volume => self.volume[t * n + v] = x,
        }
    }

    pub fn speed_missing_fraction(&self) -> f64 {
        let missing = self.speed.iter().filter(|x| x.is_nan()).count();
        missing as f64 / self.speed.len() as f64
    }
}

// ===== Splits =====

/// Chronological three-way split: train `[0, train_end)`, validation
/// `[train_end, val_end)`, test `[val_end, num_steps)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train_end: usize,
    pub val_end: usize,
    pub num_steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl Splits {
    pub fn from_fractions(num_steps: usize, train_frac: f64, val_frac: f64) -> Result<Self> {
        if !(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac < 1.0) {
            return Err(Error::config(format!(
                "split fractions train {train_frac} / val {val_frac} must be positive and leave room for test"
            )));
        }
        let train_end = (num_steps as f64 * train_frac).floor() as usize;
        let val_end = (num_steps as f64 * (train_frac + val_frac)).floor() as usize;
        Splits::explicit(num_steps, train_end, val_end)
    }

    pub fn explicit(num_steps: usize, train_end: usize, val_end: usize) -> Result<Self> {
        if !(0 < train_end && train_end <= val_end && val_end < num_steps) {
            return Err(Error::config(format!(
                "split boundaries 0 < {train_end} <= {val_end} < {num_steps} violated"
            )));
        }
        Ok(Splits { train_end, val_end, num_steps })
    }

    pub fn range(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.train_end,
            Split::Val => self.train_end..self.val_end,
            Split::Test => self.val_end..self.num_steps,
        }
    }

    pub fn len(&self, split: Split) -> usize {
        self.range(split).len()
    }
}

// ===== Windows =====

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub lookback: usize,
    pub horizon: usize,
}

impl WindowSpec {
    pub fn new(lookback: usize, horizon: usize) -> Result<Self> {
        if lookback == 0 || horizon == 0 {
            return Err(Error::config("lookback and horizon must both be at least 1"));
        }
        Ok(WindowSpec { lookback, horizon })
    }
}

/// Anchors whose targets fit inside `range` and whose lookback history
/// exists. Ascending order.
pub fn admissible_anchors(spec: WindowSpec, range: std::ops::Range<usize>) -> Vec<usize> {
    let lo = range.start.max(spec.lookback);
    (lo..range.end.saturating_sub(spec.horizon - 1)).collect()
}

/// Groups anchors into batches of `batch_size` (last one may be short).
/// `shuffle` permutes the anchors first with a ChaCha stream derived from
/// (seed, epoch), so every epoch sees a different but reproducible order.
pub fn anchor_batches(
    anchors: &[usize],
    batch_size: usize,
    shuffle: Option<(u64, u64)>,
) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch_size must be positive");
    let mut order: Vec<usize> = anchors.to_vec();
    if let Some((seed, epoch)) = shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
    }
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// One batch of forecasting windows over the full node set.
///
/// Targets are stored as `[B * n, horizon]` with row `b * n + v`; entries
/// whose target value is missing carry 0.0 with a 0 mask so downstream math
/// never touches a sentinel.
#[derive(Clone, Debug)]
pub struct WindowBatch {
    pub anchors: Vec<usize>,
    pub targets: Rc<Tensor>,
    pub target_mask: Rc<Tensor>,
    pub channel: Channel,
    pub num_nodes: usize,
}

impl WindowBatch {
    pub fn build(store: &SeriesStore, anchors: &[usize], spec: WindowSpec, channel: Channel) -> Self {
        let n = store.num_nodes();
        let h = spec.horizon;
        let mut targets = Tensor::zeros(anchors.len() * n, h);
        let mut mask = Tensor::zeros(anchors.len() * n, h);
        for (b, &a) in anchors.iter().enumerate() {
            debug_assert!(a >= spec.lookback && a + h <= store.num_steps());
            for k in 0..h {
                let row = store.row(channel, a + k);
                for v in 0..n {
                    let x = row[v];
                    if x.is_nan() {
                        continue;
                    }
                    targets.set(b * n + v, k, x);
                    mask.set(b * n + v, k, 1.0);
                }
            }
        }
        WindowBatch {
            anchors: anchors.to_vec(),
            targets: Rc::new(targets),
            target_mask: Rc::new(mask),
            channel,
            num_nodes: n,
        }
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn mask_total(&self) -> f64 {
        self.target_mask.iter().map(|m| *m as f64).sum()
    }
}

/// Value row and observation mask at `anchor - offset`; offset 0 is the anchor
/// row itself. One day is 288 steps, one week 2016.
pub fn lag_lookup(
    store: &SeriesStore,
    channel: Channel,
    anchor: usize,
    offset: usize,
) -> Result<(Vec<f32>, Vec<bool>)> {
    if offset > anchor {
        return Err(Error::data(format!(
            "lag {offset} reaches before the series start from anchor {anchor}"
        )));
    }
    let t = anchor - offset;
    let row = store.row(channel, t).to_vec();
    let mask = (0..store.num_nodes()).map(|v| store.observed(channel, t, v)).collect();
    Ok((row, mask))
}

// ===== On-disk formats =====

const MATRIX_MAGIC: &[u8; 4] = b"TTG1";
const DTYPE_F32: u32 = 1;
const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Writes a row-major `[num_steps, num_nodes]` f32 matrix with a little-endian
/// header: magic "TTG1", u32 step count, u32 node count, u32 dtype code (1 = f32).
pub fn write_matrix(path: &Path, num_steps: usize, num_nodes: usize, data: &[f32]) -> Result<()> {
    assert_eq!(data.len(), num_steps * num_nodes);
    let mut buf = Vec::with_capacity(16 + data.len() * 4);
    buf.extend_from_slice(MATRIX_MAGIC);
    buf.extend_from_slice(&(num_steps as u32).to_le_bytes());
    buf.extend_from_slice(&(num_nodes as u32).to_le_bytes());
    buf.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_matrix(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut header = [0u8; 16];
    file.read_exact(&mut header)
        .map_err(|_| Error::data(format!("{}: truncated header", path.display())))?;
    if &header[0..4] != MATRIX_MAGIC {
        return Err(Error::data(format!("{}: bad magic, not a matrix file", path.display())));
    }
    let num_steps = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let num_nodes = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let dtype = u32::from_le_bytes(header[12..16].try_into().unwrap());
    if dtype != DTYPE_F32 {
        return Err(Error::data(format!("{}: unsupported dtype code {dtype}", path.display())));
    }
    let mut payload = Vec::new();
    file.read_to_end(&mut payload).map_err(|e| Error::io(path.display().to_string(), e))?;
    let want = num_steps * num_nodes * 4;
    if payload.len() != want {
        return Err(Error::data(format!(
            "{}: payload is {} bytes, header promises {want}",
            path.display(),
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((num_steps, num_nodes, data))
}

/// One ISO-8601 timestamp per line, one line per step.
pub fn write_timestamps(path: &Path, start: NaiveDateTime, num_steps: usize) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    for t in 0..num_steps {
        let ts = start + Duration::minutes(STEP_MINUTES * t as i64);
        writeln!(w, "{}", ts.format(TIMESTAMP_FORMAT))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parses the timestamp index, enforcing the uniform five-minute grid.
pub fn read_timestamps(path: &Path) -> Result<(NaiveDateTime, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut start = None;
    let mut count = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let ts = NaiveDateTime::parse_from_str(line, TIMESTAMP_FORMAT).map_err(|e| {
            Error::data(format!("{}:{}: bad timestamp {line:?}: {e}", path.display(), lineno + 1))
        })?;
        match start {
            None => start = Some(ts),
            Some(s) => {
                let expect = s + Duration::minutes(STEP_MINUTES * count as i64);
                if ts != expect {
                    return Err(Error::data(format!(
                        "{}:{}: timestamp {ts} breaks the 5-minute grid, expected {expect}",
                        path.display(),
                        lineno + 1
                    )));
                }
            }
        }
        count += 1;
    }
    let start = start.ok_or_else(|| Error::data(format!("{}: no timestamps", path.display())))?;
    Ok((start, count))
}

pub const SPEED_FILE: &str = "speed.bin";
pub const VOLUME_FILE: &str = "volume.bin";
pub const TIMESTAMPS_FILE: &str = "timestamps.txt";

/// Loads the three series files from a dataset directory and cross-checks
/// their shapes.
pub fn load_series(dir: &Path) -> Result<SeriesStore> {
    let (start, num_steps) = read_timestamps(&dir.join(TIMESTAMPS_FILE))?;
    let (ts, ns, speed) = read_matrix(&dir.join(SPEED_FILE))?;
    let (tv, nv, volume) = read_matrix(&dir.join(VOLUME_FILE))?;
    if ts != num_steps || tv != num_steps {
        return Err(Error::data(format!(
            "step count mismatch: timestamps {num_steps}, speed {ts}, volume {tv}"
        )));
    }
    if ns != nv {
        return Err(Error::data(format!("node count mismatch: speed {ns}, volume {nv}")));
    }
    SeriesStore::new(start, ns, speed, volume)
}

pub fn save_series(dir: &Path, store: &SeriesStore) -> Result<()> {
    write_timestamps(&dir.join(TIMESTAMPS_FILE), store.start(), store.num_steps())?;
    write_matrix(&dir.join(SPEED_FILE), store.num_steps(), store.num_nodes(), store.speed_raw())?;
    write_matrix(&dir.join(VOLUME_FILE), store.num_steps(), store.num_nodes(), store.volume_raw())
}
