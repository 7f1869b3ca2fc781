//! Multi-level spatial aggregation of movements into a flow graph.
//!
//! Each mapper combines partial nodes and edges in memory across its whole
//! split and emits them once at cleanup, routed by cell. Reducers merge the
//! partials and write node and edge records.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::parse_movement_line;
use crate::model::{great_circle_km, CellId, GeoPoint, GridHierarchy, MovementRecord};
use crate::mr::{Emitter, Job, RecordWriter};
use crate::records::{EdgeRecord, NodeRecord, Record};
use crate::routing::CellRouter;

pub const DEFAULT_ALPHA: f64 = 64.0;
pub const DEFAULT_BUCKET_SECONDS: i64 = 86_400;

const NANO: f64 = 1e9;

/// Temporal axis of the cube: `bucket(t) = floor((t - t0) / width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeBucketing {
    pub t0: i64,
    pub width: i64,
}

impl Default for TimeBucketing {
    fn default() -> Self {
        TimeBucketing { t0: 0, width: DEFAULT_BUCKET_SECONDS }
    }
}

impl TimeBucketing {
    pub fn new(t0: i64, width: i64) -> Result<Self> {
        if width <= 0 {
            return Err(Error::InvalidArgument(format!("bucket width must be positive, got {width}")));
        }
        Ok(TimeBucketing { t0, width })
    }

    /// `None` for times before `t0`.
    pub fn bucket(&self, t: i64) -> Option<u64> {
        (t >= self.t0).then(|| ((t - self.t0) / self.width) as u64)
    }

    pub fn bucket_start(&self, bucket: u64) -> i64 {
        self.t0 + bucket as i64 * self.width
    }
}

/// Maximum edge length kept at `level`: `alpha` cell lengths.
pub fn threshold_km(level: u32, grid: &GridHierarchy, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    Ok(alpha * grid.cell_len_km(level)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateConfig {
    pub alpha: f64,
    pub bucketing: TimeBucketing,
    pub track_users: bool,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        AggregateConfig {
            alpha: DEFAULT_ALPHA,
            bucketing: TimeBucketing::default(),
            track_users: false,
        }
    }
}

fn hist_add(hist: &mut Vec<[u64; 2]>, bucket: u64, n: u64) {
    match hist.binary_search_by_key(&bucket, |e| e[0]) {
        Ok(i) => hist[i][1] += n,
        Err(i) => hist.insert(i, [bucket, n]),
    }
}

fn hist_merge(into: &mut Vec<[u64; 2]>, from: &[[u64; 2]]) {
    for &[b, n] in from {
        hist_add(into, b, n);
    }
}

/// Partial node. Coordinates accumulate as integer nano-degree sums so merges
/// are exactly associative and commutative.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeAcc {
    pub lon_nano: i128,
    pub lat_nano: i128,
    pub count: u64,
    pub source_count: u64,
    pub tt_sum: i64,
    pub users: Vec<u64>,
    pub tbuckets: Vec<[u64; 2]>,
}

impl NodeAcc {
    pub fn add_endpoint(&mut self, p: GeoPoint, bucket: u64, source_tt: Option<i64>, user: Option<u64>) {
        self.lon_nano += (p.lon * NANO).round() as i128;
        self.lat_nano += (p.lat * NANO).round() as i128;
        self.count += 1;
        if let Some(tt) = source_tt {
            self.source_count += 1;
            self.tt_sum += tt;
        }
        if let Some(u) = user {
            if let Err(i) = self.users.binary_search(&u) {
                self.users.insert(i, u);
            }
        }
        hist_add(&mut self.tbuckets, bucket, 1);
    }

    pub fn merge(&mut self, other: &NodeAcc) {
        self.lon_nano += other.lon_nano;
        self.lat_nano += other.lat_nano;
        self.count += other.count;
        self.source_count += other.source_count;
        self.tt_sum += other.tt_sum;
        if !other.users.is_empty() {
            let mut all = std::mem::take(&mut self.users);
            all.extend_from_slice(&other.users);
            all.sort_unstable();
            all.dedup();
            self.users = all;
        }
        hist_merge(&mut self.tbuckets, &other.tbuckets);
    }

    fn mean(sum: i128, count: u64) -> f64 {
        let c = count as i128;
        let (q, r) = (sum.div_euclid(c), sum.rem_euclid(c));
        (q as f64 + r as f64 / count as f64) / NANO
    }

    pub fn centroid(&self) -> GeoPoint {
        GeoPoint {
            lon: Self::mean(self.lon_nano, self.count),
            lat: Self::mean(self.lat_nano, self.count),
        }
    }

    /// Final record; the centroid is clamped into the cell rectangle to
    /// absorb nano-degree rounding at cell edges.
    pub fn to_record(&self, cell: CellId, grid: &GridHierarchy, track_users: bool) -> Result<NodeRecord> {
        let (_, bounds) = grid.cell_centroid_bounds(cell)?;
        let c = self.centroid();
        Ok(NodeRecord {
            level: cell.level,
            cell: cell.index,
            lon: c.lon.clamp(bounds.lon_min, bounds.lon_max),
            lat: c.lat.clamp(bounds.lat_min, bounds.lat_max),
            count: self.count,
            source_count: self.source_count,
            users: track_users.then_some(self.users.len() as u64),
            tt_sum: self.tt_sum,
            tbuckets: self.tbuckets.clone(),
            rank: None,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeAcc {
    pub count: u64,
    pub tt_sum: i64,
    pub max_km: f64,
    pub tbuckets: Vec<[u64; 2]>,
}

impl EdgeAcc {
    pub fn add_movement(&mut self, tt: i64, km: f64, bucket: u64) {
        self.count += 1;
        self.tt_sum += tt;
        self.max_km = self.max_km.max(km);
        hist_add(&mut self.tbuckets, bucket, 1);
    }

    pub fn merge(&mut self, other: &EdgeAcc) {
        self.count += other.count;
        self.tt_sum += other.tt_sum;
        self.max_km = self.max_km.max(other.max_km);
        hist_merge(&mut self.tbuckets, &other.tbuckets);
    }

    pub fn to_record(&self, level: u32, src: u64, dst: u64) -> EdgeRecord {
        EdgeRecord {
            level,
            src,
            dst,
            count: self.count,
            tt_sum: self.tt_sum,
            max_km: self.max_km,
            tbuckets: self.tbuckets.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggKey {
    Node { level: u32, cell: u64 },
    Edge { level: u32, src: u64, dst: u64 },
}

impl AggKey {
    /// The cell whose partition reduces this key: the node's own cell, or
    /// the edge's source cell.
    pub fn routing_cell(&self) -> CellId {
        match *self {
            AggKey::Node { level, cell } => CellId::new(level, cell),
            AggKey::Edge { level, src, .. } => CellId::new(level, src),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AggValue {
    Node(NodeAcc),
    Edge(EdgeAcc),
}

/// Per-level in-mapper combining state.
#[derive(Debug, Default)]
pub struct LevelGraphs {
    pub nodes: Vec<HashMap<u64, NodeAcc>>,
    pub edges: Vec<HashMap<(u64, u64), EdgeAcc>>,
}

impl LevelGraphs {
    pub fn new(levels: u32) -> Self {
        LevelGraphs {
            nodes: (0..levels).map(|_| HashMap::new()).collect(),
            edges: (0..levels).map(|_| HashMap::new()).collect(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.iter().map(HashMap::len).sum()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().map(HashMap::len).sum()
    }
}

#[derive(Debug, Default)]
pub struct AggregateCounters {
    pub movements: AtomicU64,
    pub dropped: AtomicU64,
}

pub struct AggregateJob {
    grid: Arc<GridHierarchy>,
    router: Arc<dyn CellRouter>,
    config: AggregateConfig,
    thresholds: Vec<f64>,
    pub counters: AggregateCounters,
}

impl AggregateJob {
    pub fn new(grid: Arc<GridHierarchy>, router: Arc<dyn CellRouter>, config: AggregateConfig) -> Result<Self> {
        let thresholds = (1..=grid.levels())
            .map(|l| threshold_km(l, &grid, config.alpha))
            .collect::<Result<Vec<_>>>()?;
        Ok(AggregateJob {
            grid,
            router,
            config,
            thresholds,
            counters: AggregateCounters::default(),
        })
    }

    pub fn threshold(&self, level: u32) -> f64 {
        self.thresholds[(level - 1) as usize]
    }

    /// Fold one movement into the combining state at every level. Returns
    /// `false` (and counts a drop) when the movement cannot be placed.
    pub fn agg_map(&self, m: &MovementRecord, state: &mut LevelGraphs) -> bool {
        let region = self.grid.region();
        let bucket = self.config.bucketing.bucket(m.t_src);
        let (Some(bucket), true, true) = (bucket, region.contains(m.src), region.contains(m.dst)) else {
            self.counters.dropped.fetch_add(1, Ordering::Relaxed);
            return false;
        };
        self.counters.movements.fetch_add(1, Ordering::Relaxed);
        let user = self.config.track_users.then_some(m.user);
        let tt = m.travel_time();
        let km = great_circle_km(m.src, m.dst);
        for level in 1..=self.grid.levels() {
            let i = (level - 1) as usize;
            // both points were checked against the region above
            let id1 = self.grid.cell_id(m.src, level).expect("in region").index;
            let id2 = self.grid.cell_id(m.dst, level).expect("in region").index;
            state.nodes[i].entry(id1).or_default().add_endpoint(m.src, bucket, Some(tt), user);
            state.nodes[i].entry(id2).or_default().add_endpoint(m.dst, bucket, None, user);
            if km < self.thresholds[i] {
                state.edges[i].entry((id1, id2)).or_default().add_movement(tt, km, bucket);
            }
        }
        true
    }

    /// Drain the combining state into keyed emissions.
    pub fn agg_cleanup(&self, state: LevelGraphs) -> impl Iterator<Item = (AggKey, AggValue)> {
        let nodes = state.nodes.into_iter().enumerate().flat_map(|(i, map)| {
            map.into_iter().map(move |(cell, acc)| {
                (AggKey::Node { level: i as u32 + 1, cell }, AggValue::Node(acc))
            })
        });
        let edges = state.edges.into_iter().enumerate().flat_map(|(i, map)| {
            map.into_iter().map(move |((src, dst), acc)| {
                (AggKey::Edge { level: i as u32 + 1, src, dst }, AggValue::Edge(acc))
            })
        });
        nodes.chain(edges)
    }

    /// Merge all partials for one key into a finished record.
    pub fn agg_reduce(&self, key: AggKey, values: Vec<AggValue>) -> Result<Record> {
        match key {
            AggKey::Node { level, cell } => {
                let mut acc = NodeAcc::default();
                for v in &values {
                    match v {
                        AggValue::Node(n) => acc.merge(n),
                        AggValue::Edge(_) => return Err(Error::parse("aggregate shuffle", "edge value under node key")),
                    }
                }
                Ok(Record::Node(acc.to_record(CellId::new(level, cell), &self.grid, self.config.track_users)?))
            }
            AggKey::Edge { level, src, dst } => {
                let mut acc = EdgeAcc::default();
                for v in &values {
                    match v {
                        AggValue::Edge(e) => acc.merge(e),
                        AggValue::Node(_) => return Err(Error::parse("aggregate shuffle", "node value under edge key")),
                    }
                }
                Ok(Record::Edge(acc.to_record(level, src, dst)))
            }
        }
    }
}

impl Job for AggregateJob {
    type Input = MovementRecord;
    type Key = AggKey;
    type Value = AggValue;
    type MapState = LevelGraphs;
    type ReduceState = ();

    fn parse(&self, line: &str) -> Result<Option<MovementRecord>> {
        parse_movement_line(line)
    }

    fn map_setup(&self) -> LevelGraphs {
        LevelGraphs::new(self.grid.levels())
    }

    fn map(&self, state: &mut LevelGraphs, m: MovementRecord, _out: &mut Emitter<'_, Self>) -> Result<()> {
        self.agg_map(&m, state);
        Ok(())
    }

    fn map_cleanup(&self, state: LevelGraphs, out: &mut Emitter<'_, Self>) -> Result<()> {
        for (key, value) in self.agg_cleanup(state) {
            out.emit(&key, &value)?;
        }
        Ok(())
    }

    fn partition(&self, key: &AggKey, _partitions: usize) -> usize {
        self.router.route(key.routing_cell())
    }

    fn reduce_setup(&self, _partition: usize) {}

    fn reduce(&self, _: &mut (), key: AggKey, values: Vec<AggValue>, out: &mut RecordWriter) -> Result<()> {
        out.write_line(&self.agg_reduce(key, values)?.to_line())
    }
}
