//! Snapshot persistence and bounding-box subgraph queries.
//!
//! Snapshot layout, one file:
//!
//! ```text
//! FCSNAP1
//! {header json}
//! {"sections":[{"kind":"nodes","level":1,"rows":..,"bytes":..}, ...]}
//! <section bytes: NDJSON graph records, in table order>
//! ```
//!
//! Sections alternate nodes/edges per level, ascending. Nodes are sorted by
//! cell, edges by `(src, dst)`, so identical inputs give identical bytes.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rstar::primitives::GeomWithData;
use rstar::{RTree, AABB};
use serde::{Deserialize, Serialize};

use crate::aggregate::TimeBucketing;
use crate::error::{Error, IoContext, Result};
use crate::model::{CellId, GridConfig, GridHierarchy, Region};
use crate::records::{EdgeRecord, NodeRecord, Record};

const MAGIC: &str = "FCSNAP1";
pub const DEFAULT_MAX_ELEMENTS: usize = 50_000;

/// Settings and inputs that produced a snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// xxh3 of the movement input, hex.
    pub input_hash: String,
    pub alpha: f64,
    pub radius_cells: Vec<f64>,
    pub threshold: f64,
    pub fp_rate: f64,
    pub edge_filter: String,
    /// Unix seconds.
    pub built_at: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub version: u32,
    pub grid: GridConfig,
    pub bucketing: TimeBucketing,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SectionKind {
    Nodes,
    Edges,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Section {
    kind: SectionKind,
    level: u32,
    rows: u64,
    bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SectionTable {
    sections: Vec<Section>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotCounts {
    /// `(nodes, edges)` per level, index 0 = level 1.
    pub per_level: Vec<(u64, u64)>,
}

impl SnapshotCounts {
    pub fn nodes(&self) -> u64 {
        self.per_level.iter().map(|c| c.0).sum()
    }

    pub fn edges(&self) -> u64 {
        self.per_level.iter().map(|c| c.1).sum()
    }
}

/// Serialize a snapshot to bytes. Fails on dangling edge endpoints, nodes
/// outside the grid's levels, or duplicate keys.
pub fn snapshot_bytes(
    header: &SnapshotHeader,
    mut nodes: Vec<NodeRecord>,
    mut edges: Vec<EdgeRecord>,
) -> Result<(Vec<u8>, SnapshotCounts)> {
    let grid = GridHierarchy::new(header.grid.clone())?;
    let levels = grid.levels();
    nodes.sort_by_key(|n| (n.level, n.cell));
    edges.sort_by_key(|e| (e.level, e.src, e.dst));

    for w in nodes.windows(2) {
        if (w[0].level, w[0].cell) == (w[1].level, w[1].cell) {
            return Err(Error::Integrity(format!("duplicate node {}/{}", w[0].level, w[0].cell)));
        }
    }
    for w in edges.windows(2) {
        if (w[0].level, w[0].src, w[0].dst) == (w[1].level, w[1].src, w[1].dst) {
            return Err(Error::Integrity(format!("duplicate edge {}/{}->{}", w[0].level, w[0].src, w[0].dst)));
        }
    }
    for n in &nodes {
        grid.check_level(n.level)?;
    }
    let keys: HashSet<CellId> = nodes.iter().map(NodeRecord::cell_id).collect();
    let dangling: Vec<String> = edges
        .iter()
        .filter(|e| !keys.contains(&CellId::new(e.level, e.src)) || !keys.contains(&CellId::new(e.level, e.dst)))
        .take(10)
        .map(|e| format!("{}/{}->{}", e.level, e.src, e.dst))
        .collect();
    if !dangling.is_empty() {
        return Err(Error::Integrity(format!("edges reference missing nodes: {}", dangling.join(", "))));
    }

    let mut sections = Vec::new();
    let mut body = Vec::new();
    let mut counts = SnapshotCounts::default();
    let (mut ni, mut ei) = (0, 0);
    for level in 1..=levels {
        let start = body.len();
        let mut rows = 0;
        while ni < nodes.len() && nodes[ni].level == level {
            writeln!(body, "{}", Record::Node(nodes[ni].clone()).to_line()).expect("vec write");
            ni += 1;
            rows += 1;
        }
        sections.push(Section { kind: SectionKind::Nodes, level, rows, bytes: (body.len() - start) as u64 });
        let start = body.len();
        let node_rows = rows;
        let mut rows = 0;
        while ei < edges.len() && edges[ei].level == level {
            writeln!(body, "{}", Record::Edge(edges[ei].clone()).to_line()).expect("vec write");
            ei += 1;
            rows += 1;
        }
        sections.push(Section { kind: SectionKind::Edges, level, rows, bytes: (body.len() - start) as u64 });
        counts.per_level.push((node_rows, rows));
    }

    let mut out = Vec::with_capacity(body.len() + 4096);
    writeln!(out, "{MAGIC}").expect("vec write");
    writeln!(out, "{}", serde_json::to_string(header)?).expect("vec write");
    writeln!(out, "{}", serde_json::to_string(&SectionTable { sections })?).expect("vec write");
    out.extend_from_slice(&body);
    Ok((out, counts))
}

/// Write a snapshot file atomically (temp file + rename).
pub fn write_snapshot(
    path: &Path,
    header: &SnapshotHeader,
    nodes: Vec<NodeRecord>,
    edges: Vec<EdgeRecord>,
) -> Result<SnapshotCounts> {
    let (bytes, counts) = snapshot_bytes(header, nodes, edges)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension("snap.tmp");
    fs::write(&tmp, &bytes).ctx(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).ctx(|| format!("renaming {}", tmp.display()))?;
    Ok(counts)
}

/// Flattened sparse histograms with per-row prefix sums.
#[derive(Debug, Default)]
struct HistIndex {
    offsets: Vec<usize>,
    buckets: Vec<u64>,
    cum: Vec<u64>,
}

impl HistIndex {
    fn push(&mut self, hist: &[[u64; 2]]) {
        if self.offsets.is_empty() {
            self.offsets.push(0);
        }
        let mut acc = 0;
        for &[b, c] in hist {
            acc += c;
            self.buckets.push(b);
            self.cum.push(acc);
        }
        self.offsets.push(self.buckets.len());
    }

    /// Sum of row `i` over buckets `from..=to`.
    fn sum(&self, i: usize, from: u64, to: u64) -> u64 {
        let (lo, hi) = (self.offsets[i], self.offsets[i + 1]);
        let buckets = &self.buckets[lo..hi];
        let a = buckets.partition_point(|&b| b < from);
        let b = buckets.partition_point(|&b| b <= to);
        if b <= a {
            return 0;
        }
        let before = if a == 0 { 0 } else { self.cum[lo + a - 1] };
        self.cum[lo + b - 1] - before
    }
}

struct LevelStore {
    nodes: Vec<NodeRecord>,
    by_cell: HashMap<u64, usize>,
    tree: RTree<GeomWithData<[f64; 2], usize>>,
    node_hist: HistIndex,
    edges: Vec<EdgeRecord>,
    /// Edges of node `i` are `edges[out_start[i]..out_start[i + 1]]`.
    out_start: Vec<usize>,
    /// Node index of each edge's target.
    edge_dst: Vec<usize>,
    edge_hist: HistIndex,
}

impl LevelStore {
    fn build(nodes: Vec<NodeRecord>, edges: Vec<EdgeRecord>) -> Result<Self> {
        let by_cell: HashMap<u64, usize> = nodes.iter().enumerate().map(|(i, n)| (n.cell, i)).collect();
        let tree = RTree::bulk_load(
            nodes.iter().enumerate().map(|(i, n)| GeomWithData::new([n.lon, n.lat], i)).collect(),
        );
        let mut node_hist = HistIndex::default();
        nodes.iter().for_each(|n| node_hist.push(&n.tbuckets));
        let mut edge_hist = HistIndex::default();
        edges.iter().for_each(|e| edge_hist.push(&e.tbuckets));
        let mut out_start = vec![0; nodes.len() + 1];
        let mut edge_dst = Vec::with_capacity(edges.len());
        for e in &edges {
            let src = *by_cell
                .get(&e.src)
                .ok_or_else(|| Error::Integrity(format!("edge source {}/{} missing", e.level, e.src)))?;
            let dst = *by_cell
                .get(&e.dst)
                .ok_or_else(|| Error::Integrity(format!("edge target {}/{} missing", e.level, e.dst)))?;
            out_start[src + 1] += 1;
            edge_dst.push(dst);
        }
        for i in 0..nodes.len() {
            out_start[i + 1] += out_start[i];
        }
        Ok(LevelStore { nodes, by_cell, tree, node_hist, edges, out_start, edge_dst, edge_hist })
    }

    fn in_box(&self, bbox: &Region) -> Vec<usize> {
        let env = AABB::from_corners([bbox.lon_min, bbox.lat_min], [bbox.lon_max, bbox.lat_max]);
        let mut hits: Vec<usize> = self.tree.locate_in_envelope(&env).map(|g| g.data).collect();
        hits.sort_unstable();
        hits
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultNode {
    pub id: u64,
    pub lon: f64,
    pub lat: f64,
    pub count: u64,
    pub users: Option<u64>,
    pub avg_tt: Option<f64>,
    pub rank: Option<f64>,
    /// Endpoint of a returned edge whose centroid lies outside the box.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub context: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultEdge {
    pub s: u64,
    pub d: u64,
    pub count: u64,
    pub avg_tt: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgraphResult {
    pub level: u32,
    pub bbox: [f64; 4],
    pub window: [u64; 2],
    pub truncated: bool,
    pub nodes: Vec<ResultNode>,
    pub edges: Vec<ResultEdge>,
}

impl SubgraphResult {
    pub fn elements(&self) -> usize {
        self.nodes.len() + self.edges.len()
    }
}

pub struct Cube {
    header: SnapshotHeader,
    grid: GridHierarchy,
    levels: Vec<LevelStore>,
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), reason: reason.into() }
}

impl Cube {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).ctx(|| format!("reading snapshot {}", path.display()))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Parse { reason, .. } => format_err(path, reason),
            Error::Json(e) => format_err(path, e.to_string()),
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut lines = bytes.splitn(4, |&b| b == b'\n');
        let bad = |why: &str| Error::parse("snapshot", why);
        if lines.next() != Some(MAGIC.as_bytes()) {
            return Err(bad("missing FCSNAP1 magic"));
        }
        let header: SnapshotHeader = serde_json::from_slice(lines.next().ok_or_else(|| bad("missing header"))?)?;
        let table: SectionTable = serde_json::from_slice(lines.next().ok_or_else(|| bad("missing section table"))?)?;
        let body = lines.next().unwrap_or(&[]);
        let grid = GridHierarchy::new(header.grid.clone())?;

        let mut levels: Vec<(Vec<NodeRecord>, Vec<EdgeRecord>)> =
            (0..grid.levels()).map(|_| (Vec::new(), Vec::new())).collect();
        let mut at = 0usize;
        for s in &table.sections {
            grid.check_level(s.level)?;
            let end = at + s.bytes as usize;
            let chunk = body.get(at..end).ok_or_else(|| bad("section extends past end of file"))?;
            at = end;
            let text = std::str::from_utf8(chunk).map_err(|_| bad("section is not UTF-8"))?;
            let slot = &mut levels[(s.level - 1) as usize];
            let mut rows = 0;
            for line in text.lines() {
                rows += 1;
                match (s.kind, Record::parse(line)?) {
                    (SectionKind::Nodes, Record::Node(n)) if n.level == s.level => slot.0.push(n),
                    (SectionKind::Edges, Record::Edge(e)) if e.level == s.level => slot.1.push(e),
                    _ => return Err(bad("record does not match its section")),
                }
            }
            if rows != s.rows {
                return Err(bad("section row count mismatch"));
            }
        }
        if at != body.len() {
            return Err(bad("trailing bytes after last section"));
        }
        let levels = levels
            .into_iter()
            .map(|(nodes, edges)| LevelStore::build(nodes, edges))
            .collect::<Result<Vec<_>>>()?;
        Ok(Cube { header, grid, levels })
    }

    pub fn header(&self) -> &SnapshotHeader {
        &self.header
    }

    pub fn grid(&self) -> &GridHierarchy {
        &self.grid
    }

    pub fn counts(&self) -> SnapshotCounts {
        SnapshotCounts {
            per_level: self.levels.iter().map(|l| (l.nodes.len() as u64, l.edges.len() as u64)).collect(),
        }
    }

    fn level(&self, level: u32) -> Result<&LevelStore> {
        self.grid.check_level(level)?;
        Ok(&self.levels[(level - 1) as usize])
    }

    pub fn nodes(&self, level: u32) -> Result<&[NodeRecord]> {
        Ok(&self.level(level)?.nodes)
    }

    pub fn edges(&self, level: u32) -> Result<&[EdgeRecord]> {
        Ok(&self.level(level)?.edges)
    }

    /// Rewrite the loaded snapshot; byte-identical to the file it came from.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let nodes = self.levels.iter().flat_map(|l| l.nodes.iter().cloned()).collect();
        let edges = self.levels.iter().flat_map(|l| l.edges.iter().cloned()).collect();
        Ok(snapshot_bytes(&self.header, nodes, edges)?.0)
    }

    pub fn node_detail(&self, level: u32, cell: u64) -> Result<&NodeRecord> {
        let store = self.level(level)?;
        store
            .by_cell
            .get(&cell)
            .map(|&i| &store.nodes[i])
            .ok_or_else(|| Error::NotFound(format!("node {level}/{cell}")))
    }

    /// Last bucket holding any data, if the snapshot is non-empty.
    pub fn max_bucket(&self) -> Option<u64> {
        self.levels
            .iter()
            .flat_map(|l| l.nodes.iter())
            .filter_map(|n| n.tbuckets.last().map(|b| b[0]))
            .max()
    }

    fn check_query(&self, level: u32, bbox: &Region, from: u64, to: u64) -> Result<()> {
        self.grid.check_level(level)?;
        if !bbox.intersects(&self.grid.region()) {
            return Err(Error::InvalidArgument("query box does not intersect the grid region".into()));
        }
        if from > to {
            return Err(Error::InvalidArgument(format!("empty time window [{from}, {to}]")));
        }
        Ok(())
    }

    /// Upper bound on result elements before window filtering and
    /// truncation: in-box nodes plus their out-degree.
    pub fn estimate(&self, level: u32, bbox: &Region) -> Result<usize> {
        let store = self.level(level)?;
        Ok(store
            .in_box(bbox)
            .into_iter()
            .map(|i| 1 + store.out_start[i + 1] - store.out_start[i])
            .sum())
    }

    /// Nodes with centroid in the closed box and a nonzero in-window count,
    /// their in-window out-edges, and the edges' outside endpoints as
    /// context nodes. When the result would exceed `max_elements`, nodes are
    /// taken by descending in-window count until the budget is spent.
    pub fn query_bbox(&self, level: u32, bbox: &Region, from: u64, to: u64, max_elements: usize) -> Result<SubgraphResult> {
        self.check_query(level, bbox, from, to)?;
        let store = self.level(level)?;
        let mut hits: Vec<(usize, u64)> = store
            .in_box(bbox)
            .into_iter()
            .map(|i| (i, store.node_hist.sum(i, from, to)))
            .filter(|&(_, c)| c > 0)
            .collect();
        const TAKEN: u8 = 1;
        const CONTEXT: u8 = 2;
        let assemble = |order: &[(usize, u64)]| {
            let mut mark = vec![0u8; store.nodes.len()];
            let mut taken = Vec::new();
            let mut context = Vec::new();
            let mut edges: Vec<(usize, u64)> = Vec::new();
            let mut out: Vec<(usize, u64)> = Vec::new();
            let mut used = 0;
            let mut skipped = false;
            for &(i, c) in order {
                out.clear();
                out.extend(
                    (store.out_start[i]..store.out_start[i + 1])
                        .map(|e| (e, store.edge_hist.sum(e, from, to)))
                        .filter(|&(_, c)| c > 0),
                );
                // targets are distinct per source, so no dedup is needed
                let new_ctx = out.iter().filter(|&&(e, _)| store.edge_dst[e] != i && mark[store.edge_dst[e]] == 0).count();
                let promoted = (mark[i] == CONTEXT) as usize;
                let cost = 1 + out.len() + new_ctx - promoted;
                if used + cost > max_elements {
                    skipped = true;
                    continue;
                }
                used += cost;
                mark[i] = TAKEN;
                taken.push((i, c));
                for &(e, _) in &out {
                    let d = store.edge_dst[e];
                    if mark[d] == 0 {
                        mark[d] = CONTEXT;
                        context.push(d);
                    }
                }
                edges.extend_from_slice(&out);
            }
            taken.sort_unstable();
            context.retain(|&d| mark[d] == CONTEXT);
            context.sort_unstable();
            (taken, context, edges, skipped)
        };
        let (mut taken, mut context, mut edges, truncated) = assemble(&hits);
        if truncated {
            hits.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            (taken, context, edges, _) = assemble(&hits);
        }
        edges.sort_unstable();

        let node_out = |i: usize, count: u64, context: bool| {
            let n = &store.nodes[i];
            ResultNode {
                id: n.cell,
                lon: n.lon,
                lat: n.lat,
                count,
                users: n.users,
                avg_tt: n.avg_travel_time(),
                rank: n.rank,
                context,
            }
        };
        let mut nodes: Vec<ResultNode> = taken.iter().map(|&(i, c)| node_out(i, c, false)).collect();
        nodes.extend(context.iter().map(|&i| node_out(i, store.node_hist.sum(i, from, to), true)));
        let edges = edges
            .into_iter()
            .map(|(e, c)| {
                let r = &store.edges[e];
                ResultEdge { s: r.src, d: r.dst, count: c, avg_tt: r.avg_travel_time() }
            })
            .collect();
        Ok(SubgraphResult {
            level,
            bbox: bbox.to_array(),
            window: [from, to],
            truncated,
            nodes,
            edges,
        })
    }

    /// Reference implementation of [`Cube::query_bbox`] without truncation:
    /// a linear scan over the level's rows.
    pub fn query_scan(&self, level: u32, bbox: &Region, from: u64, to: u64) -> Result<SubgraphResult> {
        use crate::records::window_sum;
        self.check_query(level, bbox, from, to)?;
        let store = self.level(level)?;
        let inside = |n: &NodeRecord| {
            n.lon >= bbox.lon_min && n.lon <= bbox.lon_max && n.lat >= bbox.lat_min && n.lat <= bbox.lat_max
        };
        let mut nodes = Vec::new();
        let mut ids = HashSet::new();
        for n in &store.nodes {
            let c = window_sum(&n.tbuckets, from, to);
            if inside(n) && c > 0 {
                ids.insert(n.cell);
                nodes.push(ResultNode {
                    id: n.cell,
                    lon: n.lon,
                    lat: n.lat,
                    count: c,
                    users: n.users,
                    avg_tt: n.avg_travel_time(),
                    rank: n.rank,
                    context: false,
                });
            }
        }
        let mut edges = Vec::new();
        let mut ctx = BTreeSet::new();
        for e in &store.edges {
            let c = window_sum(&e.tbuckets, from, to);
            if ids.contains(&e.src) && c > 0 {
                edges.push(ResultEdge { s: e.src, d: e.dst, count: c, avg_tt: e.avg_travel_time() });
                if !ids.contains(&e.dst) {
                    ctx.insert(e.dst);
                }
            }
        }
        for n in &store.nodes {
            if ctx.contains(&n.cell) {
                nodes.push(ResultNode {
                    id: n.cell,
                    lon: n.lon,
                    lat: n.lat,
                    count: window_sum(&n.tbuckets, from, to),
                    users: n.users,
                    avg_tt: n.avg_travel_time(),
                    rank: n.rank,
                    context: true,
                });
            }
        }
        Ok(SubgraphResult { level, bbox: bbox.to_array(), window: [from, to], truncated: false, nodes, edges })
    }
}
