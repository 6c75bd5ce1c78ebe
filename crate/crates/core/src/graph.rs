//! Areal units and their binary contiguity structure.
//!
//! Units carry string identifiers externally and dense `0..n` indices
//! internally; the index order is fixed by the order in which identifiers are
//! supplied. Edges are unordered pairs, stored once with `i < j`.

use std::collections::{HashMap, VecDeque};
use std::io::{Read, Write};

use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown unit id {0:?}")]
    UnknownId(String),
    #[error("self-edge {0}")]
    SelfEdge(String),
    #[error("duplicate unit id {0:?}")]
    DuplicateId(String),
    #[error("edge ({0}, {1}) out of range for {2} units")]
    IndexOutOfRange(usize, usize, usize),
    #[error("member set is empty")]
    EmptyMembers,
    #[error("member index {0} out of range for {1} units")]
    MemberOutOfRange(usize, usize),
    #[error("feature {0} has no usable id property {1:?}")]
    MissingIdProperty(usize, String),
    #[error("feature {0:?} has non-polygon geometry")]
    NonPolygon(String),
    #[error("invalid GeoJSON: {0}")]
    GeoJson(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Number of neighbours of each unit (row sums of the adjacency matrix).
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborCounts(pub Vec<usize>);

impl NeighborCounts {
    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreaGraph {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl AreaGraph {
    /// Builds a graph from ids and index pairs. Pairs are deduplicated and
    /// symmetrised; self-pairs and out-of-range indices are rejected.
    pub fn new<I>(ids: Vec<String>, edges: I) -> Result<Self, GraphError>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let n = ids.len();
        let mut index = HashMap::with_capacity(n);
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(GraphError::DuplicateId(id.clone()));
            }
        }
        let mut pairs = Vec::new();
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(GraphError::IndexOutOfRange(a, b, n));
            }
            if a == b {
                return Err(GraphError::SelfEdge(ids[a].clone()));
            }
            pairs.push((a.min(b), a.max(b)));
        }
        pairs.sort_unstable();
        pairs.dedup();

        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in &pairs {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Ok(Self {
            ids,
            index,
            edges: pairs,
            neighbors,
        })
    }

    /// Rook-adjacency lattice with `rows * cols` units in row-major order.
    /// Unit ids are `r{row}c{col}`.
    pub fn grid(rows: usize, cols: usize) -> Self {
        let ids = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| format!("r{r}c{c}")))
            .collect();
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if c + 1 < cols {
                    edges.push((i, i + 1));
                }
                if r + 1 < rows {
                    edges.push((i, i + cols));
                }
            }
        }
        Self::new(ids, edges).expect("lattice edges are valid")
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Unordered edges, each stored once as `(i, j)` with `i < j`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn is_adjacent(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    pub fn neighbor_counts(&self) -> NeighborCounts {
        NeighborCounts(self.neighbors.iter().map(Vec::len).collect())
    }

    /// Connected-component label per unit, labels numbered by first appearance.
    pub fn components(&self) -> Vec<usize> {
        let n = self.n();
        let mut label = vec![usize::MAX; n];
        let mut next = 0;
        let mut queue = VecDeque::new();
        for start in 0..n {
            if label[start] != usize::MAX {
                continue;
            }
            label[start] = next;
            queue.push_back(start);
            while let Some(u) = queue.pop_front() {
                for &v in &self.neighbors[u] {
                    if label[v] == usize::MAX {
                        label[v] = next;
                        queue.push_back(v);
                    }
                }
            }
            next += 1;
        }
        label
    }

    pub fn n_components(&self) -> usize {
        self.components().into_iter().max().map_or(0, |m| m + 1)
    }

    /// True iff the subgraph induced by `members` is connected.
    pub fn is_contiguous(&self, members: &[usize]) -> Result<bool, GraphError> {
        let n = self.n();
        let &first = members.first().ok_or(GraphError::EmptyMembers)?;
        let mut inside = vec![false; n];
        for &m in members {
            if m >= n {
                return Err(GraphError::MemberOutOfRange(m, n));
            }
            inside[m] = true;
        }
        let target = inside.iter().filter(|&&b| b).count();
        let mut seen = vec![false; n];
        seen[first] = true;
        let mut reached = 1;
        let mut queue = VecDeque::from([first]);
        while let Some(u) = queue.pop_front() {
            for &v in &self.neighbors[u] {
                if inside[v] && !seen[v] {
                    seen[v] = true;
                    reached += 1;
                    queue.push_back(v);
                }
            }
        }
        Ok(reached == target)
    }

    /// Writes the edge list as `from,to` CSV using unit ids.
    pub fn write_edge_list<W: Write>(&self, writer: W) -> Result<(), GraphError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["from", "to"])?;
        for &(a, b) in &self.edges {
            w.write_record([&self.ids[a], &self.ids[b]])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_ids<W: Write>(&self, writer: W) -> Result<(), GraphError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["id"])?;
        for id in &self.ids {
            w.write_record([id])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Deserialize)]
struct EdgeRow {
    from: String,
    to: String,
}

#[derive(Deserialize)]
struct IdRow {
    id: String,
}

/// Reads an id list CSV with header `id`; row order defines the index order.
pub fn load_ids<R: Read>(source: R) -> Result<Vec<String>, GraphError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(source);
    let mut ids = Vec::new();
    for row in reader.deserialize::<IdRow>() {
        ids.push(row?.id);
    }
    Ok(ids)
}

/// Reads a `from,to` edge list CSV against a fixed id list.
pub fn load_edge_list<R: Read>(source: R, ids: &[String]) -> Result<AreaGraph, GraphError> {
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let lookup = |id: &str| {
        index
            .get(id)
            .copied()
            .ok_or_else(|| GraphError::UnknownId(id.to_string()))
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(source);
    let mut edges = Vec::new();
    for row in reader.deserialize::<EdgeRow>() {
        let row = row?;
        if row.from == row.to {
            return Err(GraphError::SelfEdge(row.from));
        }
        edges.push((lookup(&row.from)?, lookup(&row.to)?));
    }
    AreaGraph::new(ids.to_vec(), edges)
}

/// Options for deriving adjacency from polygon geometry.
#[derive(Debug, Clone)]
pub struct PolygonOptions {
    pub id_property: String,
    /// Coordinate tolerance for treating points as coincident.
    pub snap: f64,
    /// Point contact is enough for adjacency (queen); otherwise a shared
    /// boundary segment of positive length is required (rook).
    pub queen: bool,
}

impl Default for PolygonOptions {
    fn default() -> Self {
        Self {
            id_property: "id".to_string(),
            snap: 1e-9,
            queen: false,
        }
    }
}

type Segment = ([f64; 2], [f64; 2]);

struct Shape {
    segments: Vec<Segment>,
    bbox: [f64; 4],
}

/// Builds an [`AreaGraph`] from a GeoJSON FeatureCollection of polygons and
/// multipolygons.
pub fn adjacency_from_polygons<R: Read>(
    mut source: R,
    options: &PolygonOptions,
) -> Result<AreaGraph, GraphError> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    let collection: geojson::FeatureCollection = text
        .parse::<geojson::GeoJson>()
        .map_err(|e| GraphError::GeoJson(e.to_string()))?
        .try_into()
        .map_err(|e: geojson::Error| GraphError::GeoJson(e.to_string()))?;

    let mut ids = Vec::with_capacity(collection.features.len());
    let mut shapes = Vec::with_capacity(collection.features.len());
    for (fi, feature) in collection.features.iter().enumerate() {
        let id = feature
            .properties
            .as_ref()
            .and_then(|p| p.get(&options.id_property))
            .and_then(|v| match v {
                serde_json::Value::String(s) => Some(s.clone()),
                serde_json::Value::Number(n) => Some(n.to_string()),
                _ => None,
            })
            .ok_or_else(|| GraphError::MissingIdProperty(fi, options.id_property.clone()))?;
        let rings: Vec<&Vec<geojson::Position>> = match feature.geometry.as_ref().map(|g| &g.value) {
            Some(geojson::Value::Polygon(rings)) => rings.iter().collect(),
            Some(geojson::Value::MultiPolygon(polys)) => polys.iter().flatten().collect(),
            _ => return Err(GraphError::NonPolygon(id)),
        };
        shapes.push(shape_from_rings(&rings));
        ids.push(id);
    }

    let tol = options.snap;
    let mut order: Vec<usize> = (0..shapes.len()).collect();
    order.sort_by(|&a, &b| shapes[a].bbox[0].total_cmp(&shapes[b].bbox[0]));
    let mut edges = Vec::new();
    for (oi, &a) in order.iter().enumerate() {
        for &b in &order[oi + 1..] {
            if shapes[b].bbox[0] > shapes[a].bbox[2] + tol {
                break;
            }
            if !boxes_touch(&shapes[a].bbox, &shapes[b].bbox, tol) {
                continue;
            }
            if shapes_adjacent(&shapes[a], &shapes[b], tol, options.queen) {
                edges.push((a, b));
            }
        }
    }
    AreaGraph::new(ids, edges)
}

fn shape_from_rings(rings: &[&Vec<geojson::Position>]) -> Shape {
    let mut segments = Vec::new();
    let mut bbox = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for ring in rings {
        let pts: Vec<[f64; 2]> = ring.iter().map(|p| [p[0], p[1]]).collect();
        for p in &pts {
            bbox[0] = bbox[0].min(p[0]);
            bbox[1] = bbox[1].min(p[1]);
            bbox[2] = bbox[2].max(p[0]);
            bbox[3] = bbox[3].max(p[1]);
        }
        for w in pts.windows(2) {
            if w[0] != w[1] {
                segments.push((w[0], w[1]));
            }
        }
        // unclosed rings get their closing segment
        if let (Some(&first), Some(&last)) = (pts.first(), pts.last()) {
            if first != last {
                segments.push((last, first));
            }
        }
    }
    Shape { segments, bbox }
}

fn boxes_touch(a: &[f64; 4], b: &[f64; 4], tol: f64) -> bool {
    a[0] <= b[2] + tol && b[0] <= a[2] + tol && a[1] <= b[3] + tol && b[1] <= a[3] + tol
}

fn shapes_adjacent(a: &Shape, b: &Shape, tol: f64, queen: bool) -> bool {
    a.segments.iter().any(|sa| {
        b.segments.iter().any(|sb| {
            if queen {
                segment_distance(sa, sb) <= tol
            } else {
                collinear_overlap(sa, sb, tol) > tol
            }
        })
    })
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn point_segment_distance(p: [f64; 2], s: &Segment) -> f64 {
    let d = sub(s.1, s.0);
    let len2 = dot(d, d);
    let t = if len2 == 0.0 {
        0.0
    } else {
        (dot(sub(p, s.0), d) / len2).clamp(0.0, 1.0)
    };
    let proj = [s.0[0] + t * d[0], s.0[1] + t * d[1]];
    dot(sub(p, proj), sub(p, proj)).sqrt()
}

fn segment_distance(a: &Segment, b: &Segment) -> f64 {
    let da = sub(a.1, a.0);
    let db = sub(b.1, b.0);
    let c1 = cross(da, sub(b.0, a.0));
    let c2 = cross(da, sub(b.1, a.0));
    let c3 = cross(db, sub(a.0, b.0));
    let c4 = cross(db, sub(a.1, b.0));
    if c1 * c2 < 0.0 && c3 * c4 < 0.0 {
        return 0.0;
    }
    point_segment_distance(a.0, b)
        .min(point_segment_distance(a.1, b))
        .min(point_segment_distance(b.0, a))
        .min(point_segment_distance(b.1, a))
}

/// Length of the shared stretch of two segments lying on a common line
/// (within `tol`), zero when they are not collinear.
fn collinear_overlap(a: &Segment, b: &Segment, tol: f64) -> f64 {
    let d = sub(a.1, a.0);
    let len = dot(d, d).sqrt();
    if len == 0.0 {
        return 0.0;
    }
    let off = |p: [f64; 2]| cross(d, sub(p, a.0)).abs() / len;
    if off(b.0) > tol || off(b.1) > tol {
        return 0.0;
    }
    let t0 = dot(sub(b.0, a.0), d) / len;
    let t1 = dot(sub(b.1, a.0), d) / len;
    let (lo, hi) = (t0.min(t1).max(0.0), t0.max(t1).min(len));
    (hi - lo).max(0.0)
}
