//! Synthetic city generator: a near-planar street network turned into a
//! directed segment graph, plus speed/volume series with daily and weekly
//! structure, feature-conditioned levels, missing observations, and a
//! genuine one-hop spatial signal.
//!
//! The segment graph is the line graph of a jittered street lattice: every
//! directed street side becomes a node, and an edge connects consecutive
//! segments through an intersection (U-turns excluded). Turn density is
//! auto-calibrated so the average undirected degree lands in the 2.5..4.0
//! band of real city road graphs.
//!
//! Speed decomposes as free speed (a function of the static attributes)
//! minus a rush-hour dip, plus slow AR(1) latents with a 3-hour time
//! constant: each node carries its own latent and receives its in-neighbors'
//! latents after a configurable delay, which is what makes neighborhood
//! history genuinely predictive. Volume is a per-node load times a daily
//! profile, damped on weekends, clamped at zero, and never missing. All
//! randomness flows from per-purpose ChaCha streams of one seed, so a
//! configuration generates bit-identical data forever.

use chrono::{NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{
    boolean_col, numeric_col, RoadGraph, StaticFeatures, NUM_BOOLEAN, NUM_CATEGORICAL, NUM_NUMERIC,
    SPEED_LIMIT_LEVELS,
};
use crate::series::{SeriesStore, Splits, STEPS_PER_DAY};
use crate::train::Dataset;

/// Every dataset starts on this Monday midnight so week offsets are exact
/// multiples of 2016 steps.
pub fn synth_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2024, 7, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
}

// ===== Configuration =====

/// Generator knobs. Rates are fractions in [0, 1]; speeds are km/h.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub n_nodes: usize,
    pub days: usize,
    /// 0 = pure grid geometry, 1 = strongly ring-shaped, with diagonal
    /// avenues appearing as the mix grows.
    pub radial_mix: f64,
    pub missing_rate_day: f64,
    pub missing_rate_night: f64,
    /// White measurement noise on speed, km/h.
    pub noise_std: f64,
    /// Scales how deep the rush-hour dip cuts into free speed.
    pub rush_amplitude: f64,
    /// Fraction of the rush dip and of volume removed on weekends.
    pub weekend_damping: f64,
    /// Free-speed slope per km/h of posted limit.
    pub limit_speed_gain: f64,
    /// Free-speed penalty for segments ending with a crosswalk, km/h.
    pub crosswalk_penalty: f64,
    /// Free-speed bonus per log-length unit above the network mean, km/h.
    pub length_bonus: f64,
    /// Amplitude of each AR(1) latent, km/h.
    pub latent_amplitude: f64,
    /// Weight of the delayed in-neighbor latent mean relative to the node's
    /// own latent; 0 removes the spatial signal entirely.
    pub spatial_strength: f64,
    /// Steps an upstream latent needs to reach its downstream neighbors.
    pub latent_lag: usize,
    pub volume_noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_nodes: 100,
            days: 14,
            radial_mix: 0.3,
            missing_rate_day: 0.05,
            missing_rate_night: 0.25,
            noise_std: 2.0,
            rush_amplitude: 1.0,
            weekend_damping: 0.35,
            limit_speed_gain: 0.55,
            crosswalk_penalty: 4.0,
            length_bonus: 1.5,
            latent_amplitude: 4.0,
            spatial_strength: 0.9,
            latent_lag: 12,
            volume_noise_std: 4.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes < 4 {
            return Err(Error::config("need at least 4 nodes"));
        }
        if self.days < 14 {
            return Err(Error::config(format!(
                "need at least 14 days (two weekly cycles), got {}",
                self.days
            )));
        }
        for (name, rate) in [
            ("missing_rate_day", self.missing_rate_day),
            ("missing_rate_night", self.missing_rate_night),
            ("weekend_damping", self.weekend_damping),
            ("radial_mix", self.radial_mix),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::config(format!("{name} {rate} must be within [0, 1]")));
            }
        }
        for (name, x) in [
            ("noise_std", self.noise_std),
            ("volume_noise_std", self.volume_noise_std),
            ("rush_amplitude", self.rush_amplitude),
            ("latent_amplitude", self.latent_amplitude),
            ("spatial_strength", self.spatial_strength),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(Error::config(format!("{name} {x} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    fn stream(&self, purpose: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(purpose);
        rng
    }
}

// Stream ids, one per independent randomness purpose.
const STREAM_TOPOLOGY: u64 = 0;
const STREAM_ATTRIBUTES: u64 = 1;
const STREAM_LATENTS: u64 = 2;
const STREAM_SPEED_NOISE: u64 = 3;
const STREAM_MISSING: u64 = 4;
const STREAM_VOLUME_NOISE: u64 = 5;
const STREAM_DYNAMICS: u64 = 6;

// ===== Street lattice =====

struct Street {
    a: usize,
    b: usize,
    avenue: bool,
    two_way: bool,
}

struct Lattice {
    positions: Vec<(f64, f64)>,
    streets: Vec<Street>,
}

/// Jittered grid of intersections, warped toward polar rings by
/// `radial_mix`, with 4-neighbor streets plus diagonal avenues.
fn build_lattice(side: usize, config: &SynthConfig, rng: &mut ChaCha8Rng) -> Lattice {
    let center = (side as f64 - 1.0) / 2.0;
    let mut positions = Vec::with_capacity(side * side);
    for j in 0..side {
        for i in 0..side {
            let x = i as f64 + 0.35 * (rng.gen::<f64>() - 0.5);
            let y = j as f64 + 0.35 * (rng.gen::<f64>() - 0.5);
            let (dx, dy) = (x - center, y - center);
            let r = (dx * dx + dy * dy).sqrt();
            let snapped = r.round().max(0.5);
            let scale = if r > 1e-9 { snapped / r } else { 1.0 };
            let mix = config.radial_mix;
            positions.push((
                center + dx * (1.0 - mix + mix * scale),
                center + dy * (1.0 - mix + mix * scale),
            ));
        }
    }
    let at = |i: usize, j: usize| j * side + i;
    let mut streets = Vec::new();
    for j in 0..side {
        for i in 0..side {
            if i + 1 < side {
                let avenue = rng.gen_bool(0.08);
                streets.push(Street {
                    a: at(i, j),
                    b: at(i + 1, j),
                    avenue,
                    two_way: rng.gen_bool(0.65),
                });
            }
            if j + 1 < side {
                let avenue = rng.gen_bool(0.08);
                streets.push(Street {
                    a: at(i, j),
                    b: at(i, j + 1),
                    avenue,
                    two_way: rng.gen_bool(0.65),
                });
            }
            if i + 1 < side && j + 1 < side && rng.gen_bool(0.25 * config.radial_mix) {
                streets.push(Street {
                    a: at(i, j),
                    b: at(i + 1, j + 1),
                    avenue: true,
                    two_way: rng.gen_bool(0.65),
                });
            }
        }
    }
    Lattice { positions, streets }
}

#[derive(Clone, Copy)]
struct Segment {
    tail: usize,
    head: usize,
    street: usize,
    reverse: Option<usize>,
}

/// All directed segments of the lattice; two-way streets contribute both
/// directions, one-way streets a random one.
fn build_segments(lattice: &Lattice, rng: &mut ChaCha8Rng) -> Vec<Segment> {
    let mut segments = Vec::new();
    for (s, street) in lattice.streets.iter().enumerate() {
        let (a, b) = if street.two_way || rng.gen_bool(0.5) {
            (street.a, street.b)
        } else {
            (street.b, street.a)
        };
        let fwd = segments.len();
        segments.push(Segment { tail: a, head: b, street: s, reverse: None });
        if street.two_way {
            let rev = segments.len();
            segments.push(Segment { tail: b, head: a, street: s, reverse: Some(fwd) });
            segments[fwd].reverse = Some(rev);
        }
    }
    segments
}

struct Turn {
    from: usize,
    to: usize,
    primary: bool,
    roll: f64,
}

/// Every legal turn (same intersection, not a U-turn) with a pre-drawn
/// uniform roll so keeping a turn is monotone in the turn probability.
fn turn_candidates(segments: &[Segment], num_intersections: usize, rng: &mut ChaCha8Rng) -> Vec<Turn> {
    let mut by_tail = vec![Vec::new(); num_intersections];
    for (i, seg) in segments.iter().enumerate() {
        by_tail[seg.tail].push(i);
    }
    let mut turns = Vec::new();
    for (from, seg) in segments.iter().enumerate() {
        let mut first = true;
        for &to in &by_tail[seg.head] {
            if seg.reverse == Some(to) {
                continue;
            }
            turns.push(Turn { from, to, primary: first, roll: rng.gen::<f64>() });
            first = false;
        }
    }
    turns
}

/// Keeps primary turns plus rolls below `p`, takes a BFS-connected slice of
/// exactly `n` segments, and returns (selected old indices, kept edges in
/// new indices).
fn assemble(turns: &[Turn], num_segments: usize, n: usize, p: f64) -> (Vec<usize>, Vec<(usize, usize)>) {
    let kept: Vec<(usize, usize)> = turns
        .iter()
        .filter(|t| t.primary || t.roll < p)
        .map(|t| (t.from, t.to))
        .collect();
    let mut adj = vec![Vec::new(); num_segments];
    for &(u, v) in &kept {
        adj[u].push(v);
        adj[v].push(u);
    }
    let mut selected = Vec::with_capacity(n);
    let mut seen = vec![false; num_segments];
    let mut queue = std::collections::VecDeque::new();
    for root in 0..num_segments {
        if selected.len() >= n {
            break;
        }
        if seen[root] {
            continue;
        }
        seen[root] = true;
        queue.push_back(root);
        while let Some(u) = queue.pop_front() {
            selected.push(u);
            if selected.len() >= n {
                break;
            }
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        queue.clear();
    }
    selected.sort_unstable();
    let mut index = vec![usize::MAX; num_segments];
    for (new, &old) in selected.iter().enumerate() {
        index[old] = new;
    }
    let edges = kept
        .iter()
        .filter(|(u, v)| index[*u] != usize::MAX && index[*v] != usize::MAX)
        .map(|(u, v)| (index[*u], index[*v]))
        .collect();
    (selected, edges)
}

const DEGREE_TARGET: f64 = 3.2;

/// Generates the road graph and its 26-attribute table. The turn probability
/// is bisected until the trimmed graph's average undirected degree is as
/// close to 3.2 as the lattice allows.
pub fn generate_graph(config: &SynthConfig) -> Result<(RoadGraph, StaticFeatures)> {
    config.validate()?;
    let rng = config.stream(STREAM_TOPOLOGY);

    // Grow the lattice until it yields enough segments to slice from.
    let mut side = (((config.n_nodes as f64) * 0.38).sqrt().ceil() as usize + 1).max(2);
    let (lattice, segments, turns) = loop {
        let mut attempt = rng.clone();
        let lattice = build_lattice(side, config, &mut attempt);
        let segments = build_segments(&lattice, &mut attempt);
        if segments.len() >= config.n_nodes {
            let turns = turn_candidates(&segments, lattice.positions.len(), &mut attempt);
            break (lattice, segments, turns);
        }
        side += 1;
    };

    let degree_of = |p: f64| {
        let (selected, edges) = assemble(&turns, segments.len(), config.n_nodes, p);
        let ids = (0..selected.len()).map(|i| format!("r{i:05}")).collect();
        let graph = RoadGraph::from_edges(ids, &edges);
        let avg = crate::graph::degree_stats(&graph).avg_undirected_degree;
        (avg, selected, graph)
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let (mut best, mut best_selected, mut best_graph) = degree_of(1.0);
    for _ in 0..14 {
        let mid = 0.5 * (lo + hi);
        let (avg, selected, graph) = degree_of(mid);
        if (avg - DEGREE_TARGET).abs() < (best - DEGREE_TARGET).abs() {
            best = avg;
            best_selected = selected;
            best_graph = graph;
        }
        if avg < DEGREE_TARGET {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let graph = best_graph;
    let selected = best_selected;

    let statics = synth_attributes(config, &lattice, &segments, &selected);
    Ok((graph, statics))
}

fn pick_weighted(rng: &mut ChaCha8Rng, table: &[(u32, f64)]) -> u32 {
    let total: f64 = table.iter().map(|(_, w)| w).sum();
    let mut roll = rng.gen::<f64>() * total;
    for &(code, w) in table {
        if roll < w {
            return code;
        }
        roll -= w;
    }
    table.last().unwrap().0
}

/// Populates the full attribute schema with plausible, mutually correlated
/// marginals; the coordinates are the (scaled) lattice endpoints, so
/// center/periphery splits are meaningful.
fn synth_attributes(
    config: &SynthConfig,
    lattice: &Lattice,
    segments: &[Segment],
    selected: &[usize],
) -> StaticFeatures {
    let mut rng = config.stream(STREAM_ATTRIBUTES);
    let n = selected.len();
    let mut numeric = vec![f32::NAN; n * NUM_NUMERIC];
    let mut categorical = vec![0u32; n * NUM_CATEGORICAL];
    let mut boolean = vec![0u8; n * NUM_BOOLEAN];

    let selected_set: std::collections::HashSet<usize> = selected.iter().copied().collect();
    let span = lattice.positions.iter().map(|p| p.0).fold(f64::MIN, f64::max).max(1.0);
    let center = span / 2.0;

    for (v, &old) in selected.iter().enumerate() {
        let seg = segments[old];
        let street = &lattice.streets[seg.street];
        let (x0, y0) = lattice.positions[seg.tail];
        let (x1, y1) = lattice.positions[seg.head];
        let scale = 120.0;
        let base_len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt() * scale;
        let wiggle: f64 = rng.sample::<f64, _>(StandardNormal) * 0.15;
        let length = (base_len * wiggle.exp()).max(15.0);

        // speed_limit as ordinal code: avenues run fast, the rest urban.
        let limit_code = if street.avenue {
            pick_weighted(&mut rng, &[(8, 0.25), (9, 0.3), (10, 0.25), (11, 0.2)])
        } else {
            pick_weighted(
                &mut rng,
                &[(2, 0.05), (3, 0.1), (4, 0.15), (5, 0.3), (6, 0.2), (7, 0.12), (8, 0.08)],
            )
        };
        let limit_code = if rng.gen_bool(0.06) { 0 } else { limit_code };

        numeric[v * NUM_NUMERIC + numeric_col::SPEED_LIMIT] = limit_code as f32;
        numeric[v * NUM_NUMERIC + numeric_col::LENGTH] = length as f32;
        numeric[v * NUM_NUMERIC + numeric_col::NUM_SEGMENTS] = (length / 45.0).round().max(1.0) as f32;
        numeric[v * NUM_NUMERIC + numeric_col::X_START] = (x0 * scale) as f32;
        numeric[v * NUM_NUMERIC + numeric_col::Y_START] = (y0 * scale) as f32;
        numeric[v * NUM_NUMERIC + numeric_col::X_END] = (x1 * scale) as f32;
        numeric[v * NUM_NUMERIC + numeric_col::Y_END] = (y1 * scale) as f32;

        let category = if rng.gen_bool(0.02) {
            0
        } else if street.avenue {
            4
        } else if limit_code >= 6 {
            3
        } else if limit_code >= 4 {
            2
        } else {
            1
        };
        let edge_type = if street.avenue {
            3
        } else if street.two_way {
            1
        } else {
            2
        };
        let speed_mode = pick_weighted(&mut rng, &[(1, 0.5), (2, 0.3), (3, 0.2)]);
        let (mx, my) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
        let region = match (mx < center, my < center) {
            (true, true) => 1,
            (false, true) => 2,
            (true, false) => 3,
            (false, false) => 4,
        };
        categorical[v * NUM_CATEGORICAL] = category;
        categorical[v * NUM_CATEGORICAL + 1] = edge_type;
        categorical[v * NUM_CATEGORICAL + 2] = speed_mode;
        categorical[v * NUM_CATEGORICAL + 3] = region;

        let crosswalk_p = match limit_code {
            0..=5 => 0.55,
            6..=8 => 0.25,
            _ => 0.05,
        };
        let slow = limit_code >= 1 && limit_code <= 4;
        let fast = limit_code >= 9;
        let flags = [
            (boolean_col::CAN_BIND_TO_REVERSE_EDGE, seg.reverse.is_some_and(|r| selected_set.contains(&r))),
            (boolean_col::DISMOUNT_BIKE, rng.gen_bool(0.08)),
            (boolean_col::HAS_MASSTRANSIT_LANE, rng.gen_bool(if limit_code >= 6 { 0.25 } else { 0.05 })),
            (boolean_col::ENDS_WITH_CROSSWALK, rng.gen_bool(crosswalk_p)),
            (boolean_col::ENDS_WITH_TOLL_POST, rng.gen_bool(0.02)),
            (boolean_col::IS_IN_POOR_CONDITION, rng.gen_bool(if slow { 0.15 } else { 0.08 })),
            (boolean_col::IS_PAVED, rng.gen_bool(0.93)),
            (boolean_col::IS_RESTRICTED_FOR_TRUCKS, rng.gen_bool(0.12)),
            (boolean_col::IS_TOLL, rng.gen_bool(if fast { 0.15 } else { 0.005 })),
        ];
        for (col, on) in flags {
            boolean[v * NUM_BOOLEAN + col] = on as u8;
        }
        for (k, p) in [0.97, 0.85, 0.6, 0.35, 0.15, 0.05].into_iter().enumerate() {
            boolean[v * NUM_BOOLEAN + boolean_col::IS_TOLL + 1 + k] = rng.gen_bool(p) as u8;
        }
    }
    StaticFeatures::from_columns(n, numeric, categorical, boolean)
}

// ===== Traffic process =====

/// Daily rush intensity in [0, 1]: Gaussian bumps at 08:30 and 17:30.
pub(crate) fn rush_profile(step_of_day: usize) -> f64 {
    let h = step_of_day as f64 * 5.0 / 60.0;
    let morning = (-((h - 8.5) / 1.3).powi(2) / 2.0).exp();
    let evening = (-((h - 17.5) / 1.6).powi(2) / 2.0).exp();
    (morning + evening).min(1.0)
}

/// Daily demand fraction: rush shoulders plus a midday plateau over a
/// night-time floor.
pub(crate) fn volume_profile(step_of_day: usize) -> f64 {
    let h = step_of_day as f64 * 5.0 / 60.0;
    0.15 + 0.45 * (-((h - 8.5) / 2.0).powi(2) / 2.0).exp()
        + 0.5 * (-((h - 17.5) / 2.3).powi(2) / 2.0).exp()
        + 0.25 * (-((h - 13.0) / 3.5).powi(2) / 2.0).exp()
}

pub(crate) fn is_weekend(day: usize) -> bool {
    day % 7 >= 5
}

/// Missing-observation probability for speed: flat night and day plateaus.
pub(crate) fn missing_rate(config: &SynthConfig, step_of_day: usize) -> f64 {
    let h = step_of_day * 5 / 60;
    if (6..22).contains(&h) {
        config.missing_rate_day
    } else {
        config.missing_rate_night
    }
}

/// AR(1) coefficient per 5-minute step for a 3-hour (36-step) time constant.
pub(crate) const LATENT_PHI: f64 = 0.972_604_468_220_491_5;

/// Weight of the node's own latent; neighbors enter via `spatial_strength`.
const OWN_LATENT_WEIGHT: f64 = 0.8;

/// Deterministic per-node levels of the traffic process.
pub(crate) struct TrafficModel {
    pub(crate) free_speed: Vec<f64>,
    pub(crate) congestion: Vec<f64>,
    pub(crate) load: Vec<f64>,
}

impl TrafficModel {
    /// Free speed from the attributes (limit, crosswalk, length, condition),
    /// congestion depth and volume load from seeded per-node draws.
    pub(crate) fn build(config: &SynthConfig, statics: &StaticFeatures) -> TrafficModel {
        let mut rng = config.stream(STREAM_DYNAMICS);
        let n = statics.num_nodes();
        let mean_log_len = (0..n)
            .map(|v| (statics.numeric(v, numeric_col::LENGTH) as f64).ln())
            .sum::<f64>()
            / n as f64;
        let mut free_speed = Vec::with_capacity(n);
        let mut congestion = Vec::with_capacity(n);
        let mut load = Vec::with_capacity(n);
        for v in 0..n {
            let code = statics.numeric(v, numeric_col::SPEED_LIMIT) as usize;
            let level = if code >= 1 { SPEED_LIMIT_LEVELS[code - 1] as f64 } else { 45.0 };
            let mut mu = 10.0 + config.limit_speed_gain * level;
            if statics.boolean(v, boolean_col::ENDS_WITH_CROSSWALK) {
                mu -= config.crosswalk_penalty;
            }
            mu += config.length_bonus
                * ((statics.numeric(v, numeric_col::LENGTH) as f64).ln() - mean_log_len);
            if statics.boolean(v, boolean_col::IS_IN_POOR_CONDITION) {
                mu -= 4.0;
            }
            if !statics.boolean(v, boolean_col::IS_PAVED) {
                mu -= 3.0;
            }
            let mu = mu.clamp(6.0, 120.0);
            free_speed.push(mu);
            congestion.push(config.rush_amplitude * mu * (0.15 + 0.25 * rng.gen::<f64>()));
            let busy = if code >= 6 { 1.5 } else { 1.0 };
            let jitter: f64 = rng.sample::<f64, _>(StandardNormal) * 0.4;
            load.push(80.0 * busy * jitter.exp());
        }
        TrafficModel { free_speed, congestion, load }
    }

    /// Mean speed at (node, step) with latents and noise at zero.
    pub(crate) fn deterministic_speed(&self, config: &SynthConfig, v: usize, step: usize) -> f64 {
        let day = step / STEPS_PER_DAY;
        let sod = step % STEPS_PER_DAY;
        let damp = if is_weekend(day) { 1.0 - config.weekend_damping } else { 1.0 };
        self.free_speed[v] - rush_profile(sod) * damp * self.congestion[v]
    }

    /// Mean volume at (node, step) with noise at zero.
    pub(crate) fn deterministic_volume(&self, config: &SynthConfig, v: usize, step: usize) -> f64 {
        let day = step / STEPS_PER_DAY;
        let sod = step % STEPS_PER_DAY;
        let damp = if is_weekend(day) { 1.0 - config.weekend_damping } else { 1.0 };
        self.load[v] * volume_profile(sod) * damp
    }
}

/// Simulates the speed/volume series on a generated graph. Speed mixes the
/// deterministic level with the node's own AR(1) latent, its in-neighbors'
/// latents delayed by `latent_lag` steps, and white noise; observations go
/// missing at the time-of-day rate. Volume is deterministic demand plus
/// noise, clamped at zero, fully observed.
pub fn generate_traffic(
    graph: &RoadGraph,
    statics: &StaticFeatures,
    config: &SynthConfig,
) -> Result<SeriesStore> {
    config.validate()?;
    let n = graph.num_nodes();
    if n != statics.num_nodes() {
        return Err(Error::config(format!(
            "graph has {n} nodes but the attribute table {}",
            statics.num_nodes()
        )));
    }
    let steps = config.days * STEPS_PER_DAY;
    let lag = config.latent_lag;
    let model = TrafficModel::build(config, statics);

    // Stationary AR(1) latents with `lag` extra steps of history so delayed
    // neighbor reads never run off the front.
    let mut latents = vec![0.0f32; n * (steps + lag)];
    {
        let mut rng = config.stream(STREAM_LATENTS);
        let innovation = (1.0 - LATENT_PHI * LATENT_PHI).sqrt();
        for v in 0..n {
            let row = &mut latents[v * (steps + lag)..(v + 1) * (steps + lag)];
            let mut g: f64 = rng.sample(StandardNormal);
            row[0] = g as f32;
            for x in row.iter_mut().skip(1) {
                g = LATENT_PHI * g + innovation * rng.sample::<f64, _>(StandardNormal);
                *x = g as f32;
            }
        }
    }
    let latent = |v: usize, j: usize| latents[v * (steps + lag) + j] as f64;

    let mut speed_rng = config.stream(STREAM_SPEED_NOISE);
    let mut missing_rng = config.stream(STREAM_MISSING);
    let mut volume_rng = config.stream(STREAM_VOLUME_NOISE);
    let mut speed = Vec::with_capacity(steps * n);
    let mut volume = Vec::with_capacity(steps * n);
    for step in 0..steps {
        let rate = missing_rate(config, step % STEPS_PER_DAY);
        for v in 0..n {
            let own = latent(v, step + lag);
            let neighbors = graph.in_neighbors(v);
            let spatial = if neighbors.is_empty() {
                0.0
            } else {
                neighbors.iter().map(|&u| latent(u, step)).sum::<f64>() / neighbors.len() as f64
            };
            let noise: f64 = speed_rng.sample::<f64, _>(StandardNormal) * config.noise_std;
            let value = model.deterministic_speed(config, v, step)
                + config.latent_amplitude * (OWN_LATENT_WEIGHT * own + config.spatial_strength * spatial)
                + noise;
            if missing_rng.gen_bool(rate) {
                speed.push(f32::NAN);
            } else {
                speed.push(value.max(3.0) as f32);
            }
            let vnoise: f64 = volume_rng.sample::<f64, _>(StandardNormal) * config.volume_noise_std;
            volume.push((model.deterministic_volume(config, v, step) + vnoise).max(0.0) as f32);
        }
    }
    SeriesStore::new(synth_start(), n, speed, volume)
}

/// Graph, attributes, traffic, and a chronological split in one call.
pub fn generate_dataset(config: &SynthConfig, train_frac: f64, val_frac: f64) -> Result<Dataset> {
    let (graph, statics) = generate_graph(config)?;
    let store = generate_traffic(&graph, &statics, config)?;
    let splits = Splits::from_fractions(store.num_steps(), train_frac, val_frac)?;
    Ok(Dataset { graph, statics, store, splits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{degree_stats, load_graph, save_graph};
    use crate::series::{load_series, save_series, Channel};

    fn small_config(n: usize, seed: u64) -> SynthConfig {
        SynthConfig { n_nodes: n, seed, ..SynthConfig::default() }
    }

    #[test]
    fn config_validation_rejects_out_of_band_settings() {
        assert!(SynthConfig::default().validate().is_ok());
        let mut c = SynthConfig::default();
        c.days = 7;
        assert!(c.validate().err().unwrap().to_string().contains("14"));
        let mut c = SynthConfig::default();
        c.missing_rate_day = 1.5;
        assert!(c.validate().is_err());
        let mut c = SynthConfig::default();
        c.n_nodes = 3;
        assert!(c.validate().is_err());
        let mut c = SynthConfig::default();
        c.noise_std = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn latent_time_constant_is_three_hours() {
        assert!((LATENT_PHI - (-1.0f64 / 36.0).exp()).abs() < 1e-15);
    }

    #[test]
    fn generated_degree_stays_in_the_city_band() {
        for seed in [1, 2, 3] {
            let (graph, statics) = generate_graph(&small_config(100, seed)).unwrap();
            assert_eq!(graph.num_nodes(), 100);
            assert_eq!(statics.num_nodes(), 100);
            let avg = degree_stats(&graph).avg_undirected_degree;
            assert!((2.5..=4.0).contains(&avg), "seed {seed}: avg degree {avg}");
        }
    }

    #[test]
    fn node_count_is_exact_for_small_networks() {
        for n in [4usize, 10, 37] {
            let (graph, _) = generate_graph(&small_config(n, 2)).unwrap();
            assert_eq!(graph.num_nodes(), n);
        }
    }

    #[test]
    fn attributes_have_plausible_marginals() {
        let (_, statics) = generate_graph(&small_config(300, 1)).unwrap();
        let mut zero = 0;
        let mut fast = 0;
        for v in 0..300 {
            let code = statics.numeric(v, numeric_col::SPEED_LIMIT);
            assert_eq!(code, code.round());
            assert!((0.0..=11.0).contains(&code), "code {code}");
            if code == 0.0 {
                zero += 1;
            }
            if code >= 9.0 {
                fast += 1;
            }
            assert!(statics.numeric(v, numeric_col::LENGTH) > 0.0);
            assert!(statics.numeric(v, numeric_col::NUM_SEGMENTS) >= 1.0);
            for c in 0..NUM_NUMERIC {
                assert!(statics.numeric(v, c).is_finite());
            }
        }
        assert!(zero > 0, "no unknown speed limits");
        assert!(fast > 0, "no high-speed segments");
        let cards = statics.cat_cardinalities();
        assert!(cards.iter().all(|&c| (2..=8).contains(&c)), "cardinalities {cards:?}");
        let (x0, _) = statics.midpoint(0);
        assert!((0..300).any(|v| statics.midpoint(v).0 != x0), "all midpoints collapsed");
    }

    #[test]
    fn same_seed_generates_bit_identical_data() {
        let config = SynthConfig { days: 14, ..small_config(50, 9) };
        let a = generate_dataset(&config, 0.7, 0.1).unwrap();
        let b = generate_dataset(&config, 0.7, 0.1).unwrap();
        assert_eq!(a.graph.node_ids(), b.graph.node_ids());
        assert_eq!(a.graph.edges().collect::<Vec<_>>(), b.graph.edges().collect::<Vec<_>>());
        assert_eq!(a.statics, b.statics);
        let bits = |xs: &[f32]| xs.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.store.speed_raw()), bits(b.store.speed_raw()));
        assert_eq!(bits(a.store.volume_raw()), bits(b.store.volume_raw()));
    }

    #[test]
    fn dataset_round_trips_through_the_file_formats() {
        let config = small_config(60, 4);
        let (graph, statics) = generate_graph(&config).unwrap();
        let store = generate_traffic(&graph, &statics, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let edges = dir.path().join("edges.csv");
        let feats = dir.path().join("features.csv");
        save_graph(&edges, &feats, &graph, &statics).unwrap();
        save_series(dir.path(), &store).unwrap();
        let (g2, s2, _) = load_graph(&edges, &feats).unwrap();
        assert_eq!(graph.edges().collect::<Vec<_>>(), g2.edges().collect::<Vec<_>>());
        assert_eq!(statics, s2);
        let store2 = load_series(dir.path()).unwrap();
        assert_eq!(store.start(), store2.start());
        let bits = |xs: &[f32]| xs.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(store.speed_raw()), bits(store2.speed_raw()));
        assert_eq!(bits(store.volume_raw()), bits(store2.volume_raw()));
    }

    #[test]
    fn weekday_profile_dips_exactly_twice() {
        let config = small_config(100, 3);
        let (_, statics) = generate_graph(&config).unwrap();
        let model = TrafficModel::build(&config, &statics);
        // Closed-form network mean over a weekday (day 1 avoids nothing
        // special, any weekday works).
        let profile: Vec<f64> = (0..STEPS_PER_DAY)
            .map(|s| {
                (0..100)
                    .map(|v| model.deterministic_speed(&config, v, STEPS_PER_DAY + s))
                    .sum::<f64>()
                    / 100.0
            })
            .collect();
        let mut minima = 0;
        for i in 0..STEPS_PER_DAY {
            let prev = profile[(i + STEPS_PER_DAY - 1) % STEPS_PER_DAY];
            let next = profile[(i + 1) % STEPS_PER_DAY];
            if profile[i] < prev && profile[i] < next {
                minima += 1;
            }
        }
        assert_eq!(minima, 2, "daily profile should dip at the two rush hours");

        // The realized data shows the same shape: rush steps run slower
        // than midday and small hours.
        let store = generate_traffic(&generate_graph(&config).unwrap().0, &statics, &config).unwrap();
        let mut sums = vec![0.0f64; STEPS_PER_DAY];
        let mut counts = vec![0.0f64; STEPS_PER_DAY];
        for day in (0..config.days).filter(|d| !is_weekend(*d)) {
            for s in 0..STEPS_PER_DAY {
                for v in 0..100 {
                    let x = store.value(Channel::Speed, day * STEPS_PER_DAY + s, v);
                    if !x.is_nan() {
                        sums[s] += x as f64;
                        counts[s] += 1.0;
                    }
                }
            }
        }
        let mean = |s: usize| sums[s] / counts[s];
        let morning = mean(102); // 08:30
        let evening = mean(210); // 17:30
        let midday = mean(156); // 13:00
        let night = mean(36); // 03:00
        assert!(morning < midday - 1.0, "morning {morning} vs midday {midday}");
        assert!(evening < midday - 1.0, "evening {evening} vs midday {midday}");
        assert!(morning < night - 1.0 && evening < night - 1.0);
    }

    #[test]
    fn missing_fraction_tracks_the_time_weighted_rate() {
        let config = small_config(100, 6);
        let data = generate_dataset(&config, 0.7, 0.1).unwrap();
        let target = (16.0 * config.missing_rate_day + 8.0 * config.missing_rate_night) / 24.0;
        let realized = data.store.speed_missing_fraction();
        assert!((realized - target).abs() < 0.01, "{realized} vs {target}");

        let mut day = (0usize, 0usize);
        let mut night = (0usize, 0usize);
        for t in 0..data.store.num_steps() {
            let h = (t % STEPS_PER_DAY) * 5 / 60;
            let bucket = if (6..22).contains(&h) { &mut day } else { &mut night };
            for v in 0..100 {
                bucket.0 += data.store.value(Channel::Speed, t, v).is_nan() as usize;
                bucket.1 += 1;
            }
        }
        let day_rate = day.0 as f64 / day.1 as f64;
        let night_rate = night.0 as f64 / night.1 as f64;
        assert!((day_rate - config.missing_rate_day).abs() < 0.01);
        assert!((night_rate - config.missing_rate_night).abs() < 0.015);
        assert!(night_rate > day_rate);
    }

    #[test]
    fn crosswalk_penalty_is_observable_in_the_series() {
        let with = small_config(150, 5);
        let without = SynthConfig { crosswalk_penalty: 0.0, ..with.clone() };
        let a = generate_dataset(&with, 0.7, 0.1).unwrap();
        let b = generate_dataset(&without, 0.7, 0.1).unwrap();
        assert_eq!(a.statics, b.statics, "the penalty must not touch attribute generation");

        let crosswalk: Vec<usize> = (0..150)
            .filter(|&v| a.statics.boolean(v, boolean_col::ENDS_WITH_CROSSWALK))
            .collect();
        assert!(crosswalk.len() >= 20, "fixture needs crosswalk segments");
        let mut diff = 0.0f64;
        let mut count = 0.0f64;
        for t in 0..a.store.num_steps() {
            for &v in &crosswalk {
                let (xa, xb) = (a.store.value(Channel::Speed, t, v), b.store.value(Channel::Speed, t, v));
                if !xa.is_nan() {
                    diff += (xb - xa) as f64;
                    count += 1.0;
                }
            }
        }
        assert!((diff / count - with.crosswalk_penalty).abs() < 0.05);

        // Nodes without a crosswalk are untouched bit for bit.
        for t in 0..a.store.num_steps() {
            for v in (0..150).filter(|v| !crosswalk.contains(v)) {
                assert_eq!(
                    a.store.value(Channel::Speed, t, v).to_bits(),
                    b.store.value(Channel::Speed, t, v).to_bits()
                );
            }
        }
    }

    #[test]
    fn volume_is_nonnegative_observed_and_weekend_damped() {
        let data = generate_dataset(&small_config(80, 7), 0.7, 0.1).unwrap();
        assert!(data.store.volume_raw().iter().all(|x| x.is_finite() && *x >= 0.0));

        let mut weekday = (0.0f64, 0.0f64);
        let mut weekend = (0.0f64, 0.0f64);
        for t in 0..data.store.num_steps() {
            let bucket = if is_weekend(t / STEPS_PER_DAY) { &mut weekend } else { &mut weekday };
            for v in 0..80 {
                bucket.0 += data.store.value(Channel::Volume, t, v) as f64;
                bucket.1 += 1.0;
            }
        }
        assert!(weekend.0 / weekend.1 < 0.85 * (weekday.0 / weekday.1));
    }

    /// Solves the symmetric system `m x = b` by Gaussian elimination.
    fn solve(mut m: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let pivot = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs())).unwrap();
            m.swap(col, pivot);
            b.swap(col, pivot);
            for row in col + 1..n {
                let f = m[row][col] / m[col][col];
                for k in col..n {
                    m[row][k] -= f * m[col][k];
                }
                b[row] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for row in (0..n).rev() {
            let mut acc = b[row];
            for k in row + 1..n {
                acc -= m[row][k] * x[k];
            }
            x[row] = acc / m[row][row];
        }
        x
    }

    /// Least-squares fit of `y ~ features + intercept`; returns coefficients
    /// with the intercept last.
    fn ols(features: &[Vec<f64>], ys: &[f64]) -> Vec<f64> {
        let k = features[0].len() + 1;
        let mut m = vec![vec![0.0; k]; k];
        let mut b = vec![0.0; k];
        for (f, &y) in features.iter().zip(ys) {
            let mut row = f.clone();
            row.push(1.0);
            for i in 0..k {
                for j in 0..k {
                    m[i][j] += row[i] * row[j];
                }
                b[i] += row[i] * y;
            }
        }
        solve(m, b)
    }

    #[test]
    fn neighbor_informed_oracle_beats_the_per_node_oracle() {
        // The spatial term feeds each node its in-neighbors' latents with a
        // delay, so a predictor that reads neighbor history must beat one
        // restricted to the node's own recent value.
        let config = small_config(100, 8);
        let data = generate_dataset(&config, 0.7, 0.1).unwrap();
        let model = TrafficModel::build(&config, &data.statics);
        let dev = |v: usize, t: usize| -> Option<f64> {
            let x = data.store.value(Channel::Speed, t, v);
            if x.is_nan() {
                None
            } else {
                Some(x as f64 - model.deterministic_speed(&config, v, t))
            }
        };
        let horizon = 11usize;
        let mut collect = |range: std::ops::Range<usize>| {
            let mut rows = Vec::new();
            let mut ys = Vec::new();
            for t in range.clone().step_by(2) {
                for v in 0..100 {
                    let (Some(own), Some(y)) = (dev(v, t - 1), dev(v, t + horizon)) else {
                        continue;
                    };
                    let nb: Vec<f64> =
                        data.graph.in_neighbors(v).iter().filter_map(|&u| dev(u, t - 1)).collect();
                    if nb.is_empty() {
                        continue;
                    }
                    rows.push(vec![own, nb.iter().sum::<f64>() / nb.len() as f64]);
                    ys.push(y);
                }
            }
            (rows, ys)
        };
        let (train_x, train_y) = collect(1..data.splits.train_end - horizon);
        let (test_x, test_y) = collect(data.splits.val_end + 1..data.store.num_steps() - horizon);

        let own_fit = ols(&train_x.iter().map(|r| vec![r[0]]).collect::<Vec<_>>(), &train_y);
        let both_fit = ols(&train_x, &train_y);
        let mae = |coef: &[f64], use_nb: bool| {
            let mut total = 0.0;
            for (r, y) in test_x.iter().zip(&test_y) {
                let pred = if use_nb {
                    coef[0] * r[0] + coef[1] * r[1] + coef[2]
                } else {
                    coef[0] * r[0] + coef[1]
                };
                total += (pred - y).abs();
            }
            total / test_y.len() as f64
        };
        let own_mae = mae(&own_fit, false);
        let both_mae = mae(&both_fit, true);
        assert!(
            both_mae < 0.99 * own_mae,
            "neighbor-informed {both_mae} should clearly beat per-node {own_mae}"
        );
    }
}
