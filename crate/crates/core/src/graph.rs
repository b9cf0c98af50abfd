//! Road-segment graph and static attributes.
//!
//! Nodes are directed road segments; an edge `u -> v` means a vehicle
//! leaving segment `u` may continue onto segment `v`. Adjacency is stored as
//! CSR in both directions (the in-CSR is the exact transpose of the
//! out-CSR), built with a counting sort. Node order is the feature-file row
//! order; the edge file refers to external string ids that are mapped to
//! dense indices once at load.
//!
//! The static attribute table has a fixed 26-column schema (see
//! [`ATTRIBUTES`]). Speed limits arrive as raw km/h values and are stored as
//! ordinal codes 0..=11, with 0 meaning "no limit recorded"; unknown
//! categorical values use the reserved code 0 as well.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::{Error, Result};

// ===== Attribute schema =====

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttrKind {
    Numeric,
    Categorical,
    Boolean,
}

/// Canonical attribute order used by feature files and encoders.
pub const ATTRIBUTES: [(&str, AttrKind); 26] = [
    ("category", AttrKind::Categorical),
    ("edge_type", AttrKind::Categorical),
    ("speed_mode", AttrKind::Categorical),
    ("speed_limit", AttrKind::Numeric),
    ("region_id", AttrKind::Categorical),
    ("can_bind_to_reverse_edge", AttrKind::Boolean),
    ("dismount_bike", AttrKind::Boolean),
    ("has_masstransit_lane", AttrKind::Boolean),
    ("ends_with_crosswalk", AttrKind::Boolean),
    ("ends_with_toll_post", AttrKind::Boolean),
    ("is_in_poor_condition", AttrKind::Boolean),
    ("is_paved", AttrKind::Boolean),
    ("is_restricted_for_trucks", AttrKind::Boolean),
    ("is_toll", AttrKind::Boolean),
    ("access_0", AttrKind::Boolean),
    ("access_1", AttrKind::Boolean),
    ("access_2", AttrKind::Boolean),
    ("access_3", AttrKind::Boolean),
    ("access_4", AttrKind::Boolean),
    ("access_5", AttrKind::Boolean),
    ("length", AttrKind::Numeric),
    ("num_segments", AttrKind::Numeric),
    ("x_coordinate_start", AttrKind::Numeric),
    ("y_coordinate_start", AttrKind::Numeric),
    ("x_coordinate_end", AttrKind::Numeric),
    ("y_coordinate_end", AttrKind::Numeric),
];

pub const NUM_NUMERIC: usize = 7;
pub const NUM_CATEGORICAL: usize = 4;
pub const NUM_BOOLEAN: usize = 15;

/// Raw km/h speed-limit levels; ordinal code = position + 1, code 0 = absent.
pub const SPEED_LIMIT_LEVELS: [f32; 11] =
    [5.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0, 110.0];

pub fn speed_limit_code(raw_kmh: f32) -> Option<u8> {
    if raw_kmh.is_nan() {
        return Some(0);
    }
    SPEED_LIMIT_LEVELS.iter().position(|&l| l == raw_kmh).map(|i| (i + 1) as u8)
}

pub fn speed_limit_kmh(code: u8) -> Option<f32> {
    match code {
        0 => Some(f32::NAN),
        1..=11 => Some(SPEED_LIMIT_LEVELS[code as usize - 1]),
        _ => None,
    }
}

fn columns_of(kind: AttrKind) -> impl Iterator<Item = (usize, &'static str)> {
    ATTRIBUTES
        .iter()
        .enumerate()
        .filter(move |(_, (_, k))| *k == kind)
        .map(|(i, (name, _))| (i, *name))
}

// ===== Static features =====

/// Per-node attribute table in columnar, type-separated form. Numeric
/// columns keep NaN for missing values (imputed by the encoder), speed
/// limits are already ordinal codes, categorical columns hold integer codes
/// with 0 reserved for "unknown".
#[derive(Clone, Debug, PartialEq)]
pub struct StaticFeatures {
    num_nodes: usize,
    numeric: Vec<f32>,     // row-major [n, NUM_NUMERIC]
    categorical: Vec<u32>, // row-major [n, NUM_CATEGORICAL]
    boolean: Vec<u8>,      // row-major [n, NUM_BOOLEAN]
    cat_cardinalities: [usize; NUM_CATEGORICAL],
}

impl StaticFeatures {
    pub fn from_columns(
        num_nodes: usize,
        numeric: Vec<f32>,
        categorical: Vec<u32>,
        boolean: Vec<u8>,
    ) -> Self {
        assert_eq!(numeric.len(), num_nodes * NUM_NUMERIC);
        assert_eq!(categorical.len(), num_nodes * NUM_CATEGORICAL);
        assert_eq!(boolean.len(), num_nodes * NUM_BOOLEAN);
        let mut cat_cardinalities = [1usize; NUM_CATEGORICAL];
        for (i, &code) in categorical.iter().enumerate() {
            let col = i % NUM_CATEGORICAL;
            cat_cardinalities[col] = cat_cardinalities[col].max(code as usize + 1);
        }
        StaticFeatures { num_nodes, numeric, categorical, boolean, cat_cardinalities }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn numeric(&self, node: usize, col: usize) -> f32 {
        self.numeric[node * NUM_NUMERIC + col]
    }

    pub fn categorical(&self, node: usize, col: usize) -> u32 {
        self.categorical[node * NUM_CATEGORICAL + col]
    }

    pub fn boolean(&self, node: usize, col: usize) -> bool {
        self.boolean[node * NUM_BOOLEAN + col] != 0
    }

    /// Number of distinct codes per categorical column (max code + 1); code 0
    /// is always reserved, so cardinality is at least 1.
    pub fn cat_cardinalities(&self) -> [usize; NUM_CATEGORICAL] {
        self.cat_cardinalities
    }

    /// Segment midpoint from the endpoint coordinate columns.
    pub fn midpoint(&self, node: usize) -> (f32, f32) {
        let x = (self.numeric(node, numeric_col::X_START) + self.numeric(node, numeric_col::X_END)) * 0.5;
        let y = (self.numeric(node, numeric_col::Y_START) + self.numeric(node, numeric_col::Y_END)) * 0.5;
        (x, y)
    }
}

/// Column indices within the numeric block, in schema order.
pub mod numeric_col {
    pub const SPEED_LIMIT: usize = 0;
    pub const LENGTH: usize = 1;
    pub const NUM_SEGMENTS: usize = 2;
    pub const X_START: usize = 3;
    pub const Y_START: usize = 4;
    pub const X_END: usize = 5;
    pub const Y_END: usize = 6;
}

/// Column indices within the boolean block, in schema order.
pub mod boolean_col {
    pub const CAN_BIND_TO_REVERSE_EDGE: usize = 0;
    pub const DISMOUNT_BIKE: usize = 1;
    pub const HAS_MASSTRANSIT_LANE: usize = 2;
    pub const ENDS_WITH_CROSSWALK: usize = 3;
    pub const ENDS_WITH_TOLL_POST: usize = 4;
    pub const IS_IN_POOR_CONDITION: usize = 5;
    pub const IS_PAVED: usize = 6;
    pub const IS_RESTRICTED_FOR_TRUCKS: usize = 7;
    pub const IS_TOLL: usize = 8;
}

// ===== Graph =====

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    In,
    Out,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoadGraph {
    num_nodes: usize,
    out_offsets: Vec<usize>,
    out_targets: Vec<usize>,
    in_offsets: Vec<usize>,
    in_sources: Vec<usize>,
    node_ids: Vec<String>,
}

impl RoadGraph {
    /// Builds both CSR directions from an edge list with a counting sort.
    /// Edges must be deduplicated and self-loop free; neighbor lists come out
    /// sorted ascending.
    pub fn from_edges(node_ids: Vec<String>, edges: &[(usize, usize)]) -> Self {
        let n = node_ids.len();
        let mut out_offsets = vec![0usize; n + 1];
        let mut in_offsets = vec![0usize; n + 1];
        for &(u, v) in edges {
            debug_assert!(u < n && v < n && u != v);
            out_offsets[u + 1] += 1;
            in_offsets[v + 1] += 1;
        }
        for i in 0..n {
            out_offsets[i + 1] += out_offsets[i];
            in_offsets[i + 1] += in_offsets[i];
        }
        let mut out_targets = vec![0usize; edges.len()];
        let mut in_sources = vec![0usize; edges.len()];
        let mut out_fill = out_offsets.clone();
        let mut in_fill = in_offsets.clone();
        // Filling in (u, v)-sorted order would already leave rows sorted, but
        // the input order is arbitrary, so sort each row afterwards.
        for &(u, v) in edges {
            out_targets[out_fill[u]] = v;
            out_fill[u] += 1;
            in_sources[in_fill[v]] = u;
            in_fill[v] += 1;
        }
        let mut g = RoadGraph { num_nodes: n, out_offsets, out_targets, in_offsets, in_sources, node_ids };
        for v in 0..n {
            let r = g.out_offsets[v]..g.out_offsets[v + 1];
            g.out_targets[r].sort_unstable();
            let r = g.in_offsets[v]..g.in_offsets[v + 1];
            g.in_sources[r].sort_unstable();
        }
        debug_assert_eq!(*g.out_offsets.last().unwrap(), g.out_targets.len());
        debug_assert_eq!(*g.in_offsets.last().unwrap(), g.in_sources.len());
        g
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.out_targets.len()
    }

    pub fn out_neighbors(&self, v: usize) -> &[usize] {
        &self.out_targets[self.out_offsets[v]..self.out_offsets[v + 1]]
    }

    pub fn in_neighbors(&self, v: usize) -> &[usize] {
        &self.in_sources[self.in_offsets[v]..self.in_offsets[v + 1]]
    }

    pub fn out_degree(&self, v: usize) -> usize {
        self.out_offsets[v + 1] - self.out_offsets[v]
    }

    pub fn in_degree(&self, v: usize) -> usize {
        self.in_offsets[v + 1] - self.in_offsets[v]
    }

    /// Neighbor slice in the requested direction, with an index check for
    /// callers handing through external input.
    pub fn neighborhood(&self, v: usize, direction: Direction) -> Result<&[usize]> {
        if v >= self.num_nodes {
            return Err(Error::data(format!(
                "node index {v} out of range for graph with {} nodes",
                self.num_nodes
            )));
        }
        Ok(match direction {
            Direction::In => self.in_neighbors(v),
            Direction::Out => self.out_neighbors(v),
        })
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes).flat_map(move |u| self.out_neighbors(u).iter().map(move |&v| (u, v)))
    }

    /// Distinct-neighbor degree in the undirected view (reciprocal edge
    /// pairs collapse to one).
    pub fn undirected_degree(&self, v: usize) -> usize {
        let (a, b) = (self.out_neighbors(v), self.in_neighbors(v));
        // Both slices are sorted; count the union with a merge.
        let (mut i, mut j, mut count) = (0, 0, 0);
        while i < a.len() || j < b.len() {
            count += 1;
            if j == b.len() || (i < a.len() && a[i] < b[j]) {
                i += 1;
            } else if i == a.len() || b[j] < a[i] {
                j += 1;
            } else {
                i += 1;
                j += 1;
            }
        }
        count
    }
}

// ===== Degree statistics =====

#[derive(Clone, Debug)]
pub struct DegreeStats {
    pub num_nodes: usize,
    pub num_edges: usize,
    pub avg_in_degree: f64,
    pub avg_out_degree: f64,
    pub avg_undirected_degree: f64,
    pub gini_undirected: f64,
}

pub fn degree_stats(g: &RoadGraph) -> DegreeStats {
    let n = g.num_nodes();
    let degrees: Vec<f64> = (0..n).map(|v| g.undirected_degree(v) as f64).collect();
    let avg = if n == 0 { 0.0 } else { degrees.iter().sum::<f64>() / n as f64 };
    let avg_dir = if n == 0 { 0.0 } else { g.num_edges() as f64 / n as f64 };
    DegreeStats {
        num_nodes: n,
        num_edges: g.num_edges(),
        avg_in_degree: avg_dir,
        avg_out_degree: avg_dir,
        avg_undirected_degree: avg,
        gini_undirected: gini(&degrees),
    }
}

/// Gini coefficient `sum_ij |x_i - x_j| / (2 n^2 mean)`; 0 for empty,
/// all-equal or all-zero input. Computed via the sorted form in O(n log n).
pub fn gini(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = xs.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let weighted: f64 =
        sorted.iter().enumerate().map(|(i, x)| (2.0 * i as f64 - n as f64 + 1.0) * x).sum();
    (weighted / (n as f64 * total)).max(0.0)
}

// ===== Loading and saving =====

#[derive(Clone, Copy, Debug, Default)]
pub struct LoadStats {
    /// Duplicate edges dropped during load; non-zero values deserve a warning.
    pub duplicate_edges: usize,
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Loads the feature table (which fixes node order) and then the edge list.
pub fn load_graph(
    edge_path: &Path,
    feature_path: &Path,
) -> Result<(RoadGraph, StaticFeatures, LoadStats)> {
    let (node_ids, features) = load_features(feature_path)?;
    let mut index: HashMap<&str, usize> = HashMap::with_capacity(node_ids.len());
    for (i, id) in node_ids.iter().enumerate() {
        if index.insert(id.as_str(), i).is_some() {
            return Err(Error::data(format!(
                "{}: duplicate node id {id:?}",
                feature_path.display()
            )));
        }
    }

    let text = read_to_string(edge_path)?;
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if lineno == 0 && line == "src_id,dst_id" {
            continue;
        }
        let mut fields = line.split(',');
        let (src, dst) = match (fields.next(), fields.next(), fields.next()) {
            (Some(s), Some(d), None) => (s.trim(), d.trim()),
            _ => {
                return Err(Error::data(format!(
                    "{}:{}: expected 'src_id,dst_id', got {line:?}",
                    edge_path.display(),
                    lineno + 1
                )))
            }
        };
        let resolve = |id: &str| {
            index.get(id).copied().ok_or_else(|| {
                Error::data(format!(
                    "{}:{}: edge references unknown node id {id:?}",
                    edge_path.display(),
                    lineno + 1
                ))
            })
        };
        let (u, v) = (resolve(src)?, resolve(dst)?);
        if u == v {
            return Err(Error::data(format!(
                "{}:{}: self-loop on node {src:?}",
                edge_path.display(),
                lineno + 1
            )));
        }
        edges.push((u, v));
    }

    edges.sort_unstable();
    let before = edges.len();
    edges.dedup();
    let stats = LoadStats { duplicate_edges: before - edges.len() };
    Ok((RoadGraph::from_edges(node_ids, &edges), features, stats))
}

fn load_features(path: &Path) -> Result<(Vec<String>, StaticFeatures)> {
    let text = read_to_string(path)?;
    let mut node_ids = Vec::new();
    let mut numeric = Vec::new();
    let mut categorical = Vec::new();
    let mut boolean = Vec::new();
    let expected_fields = 1 + ATTRIBUTES.len();

    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if lineno == 0 && fields.first() == Some(&"id") {
            continue;
        }
        if fields.len() != expected_fields {
            return Err(Error::data(format!(
                "{}:{}: expected {expected_fields} fields, got {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        node_ids.push(fields[0].to_string());
        for (col, (name, kind)) in ATTRIBUTES.iter().enumerate() {
            let field = fields[col + 1];
            let ctx = || format!("{}:{}: column {name}", path.display(), lineno + 1);
            match kind {
                AttrKind::Numeric => {
                    let raw = if field.is_empty() {
                        f32::NAN
                    } else {
                        field.parse::<f32>().map_err(|_| {
                            Error::data(format!("{}: non-numeric value {field:?}", ctx()))
                        })?
                    };
                    if *name == "speed_limit" {
                        let code = speed_limit_code(raw).ok_or_else(|| {
                            Error::data(format!(
                                "{}: speed limit {field:?} is not one of the known km/h levels",
                                ctx()
                            ))
                        })?;
                        numeric.push(code as f32);
                    } else {
                        numeric.push(raw);
                    }
                }
                AttrKind::Categorical => {
                    let code = if field.is_empty() {
                        0
                    } else {
                        field.parse::<u32>().map_err(|_| {
                            Error::data(format!("{}: bad categorical code {field:?}", ctx()))
                        })?
                    };
                    categorical.push(code);
                }
                AttrKind::Boolean => {
                    let b = match field {
                        "" | "0" => 0u8,
                        "1" => 1u8,
                        _ => {
                            return Err(Error::data(format!(
                                "{}: boolean must be 0 or 1, got {field:?}",
                                ctx()
                            )))
                        }
                    };
                    boolean.push(b);
                }
            }
        }
    }

    let n = node_ids.len();
    if n == 0 {
        return Err(Error::data(format!("{}: no nodes", path.display())));
    }
    Ok((node_ids, StaticFeatures::from_columns(n, numeric, categorical, boolean)))
}

/// Writes the edge and feature files in the load format; loading them back
/// reproduces the graph, features and node order exactly.
pub fn save_graph(
    edge_path: &Path,
    feature_path: &Path,
    graph: &RoadGraph,
    features: &StaticFeatures,
) -> Result<()> {
    let mut edges = String::from("src_id,dst_id\n");
    for (u, v) in graph.edges() {
        let _ = writeln!(edges, "{},{}", graph.node_ids()[u], graph.node_ids()[v]);
    }
    fs::write(edge_path, edges).map_err(|e| Error::io(edge_path.display().to_string(), e))?;

    let mut table = String::from("id");
    for (name, _) in ATTRIBUTES {
        table.push(',');
        table.push_str(name);
    }
    table.push('\n');
    for v in 0..features.num_nodes() {
        table.push_str(&graph.node_ids()[v]);
        let (mut ni, mut ci, mut bi) = (0, 0, 0);
        for (name, kind) in ATTRIBUTES {
            table.push(',');
            match kind {
                AttrKind::Numeric => {
                    let mut x = features.numeric(v, ni);
                    if name == "speed_limit" {
                        x = speed_limit_kmh(x as u8).unwrap_or(f32::NAN);
                    }
                    if !x.is_nan() {
                        let _ = write!(table, "{x}");
                    }
                    ni += 1;
                }
                AttrKind::Categorical => {
                    let _ = write!(table, "{}", features.categorical(v, ci));
                    ci += 1;
                }
                AttrKind::Boolean => {
                    let _ = write!(table, "{}", features.boolean(v, bi) as u8);
                    bi += 1;
                }
            }
        }
        table.push('\n');
    }
    fs::write(feature_path, table).map_err(|e| Error::io(feature_path.display().to_string(), e))
}

pub fn numeric_column_names() -> Vec<&'static str> {
    columns_of(AttrKind::Numeric).map(|(_, n)| n).collect()
}

pub fn categorical_column_names() -> Vec<&'static str> {
    columns_of(AttrKind::Categorical).map(|(_, n)| n).collect()
}

pub fn boolean_column_names() -> Vec<&'static str> {
    columns_of(AttrKind::Boolean).map(|(_, n)| n).collect()
}
