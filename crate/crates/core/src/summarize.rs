//! Node summarization: keep nodes whose count ranks high within their
//! great-circle neighborhood at the same level.
//!
//! Mappers replicate every node to each partition whose rectangle meets the
//! node's neighborhood window, so a reducer sees every neighbor of the nodes
//! it owns. Only the home replica (the copy in the partition containing the
//! centroid) is scored.

use std::collections::BTreeMap;
use std::sync::Arc;

use rstar::primitives::GeomWithData;
use rstar::{RTree, AABB};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{great_circle_km, GridHierarchy};
use crate::mr::{Emitter, Job, RecordWriter};
use crate::partition::RectIndex;
use crate::records::{NodeRecord, Record};

pub const DEFAULT_RADIUS_CELLS: f64 = 8.0;
pub const DEFAULT_THRESHOLD: f64 = 80.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryConfig {
    /// Neighborhood radius per level, in cell lengths (index 0 = level 1).
    pub radius_cells: Vec<f64>,
    /// Percentile a node must exceed to be kept.
    pub threshold: f64,
}

impl SummaryConfig {
    pub fn uniform(levels: u32, radius_cells: f64, threshold: f64) -> Self {
        SummaryConfig {
            radius_cells: vec![radius_cells; levels as usize],
            threshold,
        }
    }

    pub fn validate(&self, levels: u32) -> Result<()> {
        if self.radius_cells.len() != levels as usize {
            return Err(Error::InvalidArgument(format!(
                "expected {levels} neighborhood radii, got {}",
                self.radius_cells.len()
            )));
        }
        if self.radius_cells.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::InvalidArgument("neighborhood radii must be positive".into()));
        }
        if !(0.0..=100.0).contains(&self.threshold) {
            return Err(Error::InvalidArgument(format!("threshold {} outside [0, 100]", self.threshold)));
        }
        Ok(())
    }
}

/// Mean-rank percentile of `count` among `neighbors` (which exclude the node
/// itself). An empty neighborhood ranks 100.
pub fn percentile_rank(count: u64, neighbors: &[u64]) -> f64 {
    if neighbors.is_empty() {
        return 100.0;
    }
    let below = neighbors.iter().filter(|&&q| q < count).count() as f64;
    let ties = neighbors.iter().filter(|&&q| q == count).count() as f64;
    100.0 * (below + 0.5 * ties) / neighbors.len() as f64
}

#[derive(Debug, Clone, Copy)]
struct LevelWindow {
    radius_km: f64,
    lon_off: f64,
    lat_off: f64,
}

pub struct SummarizeJob {
    index: Arc<RectIndex>,
    config: SummaryConfig,
    windows: Vec<LevelWindow>,
}

impl SummarizeJob {
    pub fn new(grid: &GridHierarchy, index: Arc<RectIndex>, config: SummaryConfig) -> Result<Self> {
        config.validate(grid.levels())?;
        let windows = (1..=grid.levels())
            .map(|l| {
                let radius_km = grid.cell_len_km(l)? * config.radius_cells[(l - 1) as usize];
                let (lon_off, lat_off) = grid.window_for_radius(radius_km);
                Ok(LevelWindow { radius_km, lon_off, lat_off })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SummarizeJob { index, config, windows })
    }

    fn window(&self, level: u32) -> Result<&LevelWindow> {
        self.windows
            .get((level as usize).wrapping_sub(1))
            .ok_or(Error::LevelOutOfRange { level, levels: self.windows.len() as u32 })
    }

    pub fn radius_km(&self, level: u32) -> Result<f64> {
        Ok(self.window(level)?.radius_km)
    }

    /// Square window half-width in degrees that contains the level's
    /// neighborhood disc anywhere in the region.
    pub fn offset_deg(&self, level: u32) -> Result<f64> {
        let w = self.window(level)?;
        Ok(w.lon_off.max(w.lat_off))
    }

    /// `(partition, is_home)` for every replica of `node`.
    pub fn neighbor_fanout(&self, node: &NodeRecord) -> Result<Vec<(usize, bool)>> {
        let c = node.centroid();
        let home = self.index.locate(c)?;
        let targets = self.index.neighbor_partitions(c, self.offset_deg(node.level)?);
        Ok(targets.into_iter().map(|p| (p, p == home)).collect())
    }

    /// Score the home nodes among `replicas` (all nodes one partition
    /// received) and return the kept ones with their rank, ordered by
    /// `(level, cell)`.
    pub fn score(&self, replicas: &[(NodeRecord, bool)]) -> Result<Vec<NodeRecord>> {
        let mut by_level: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, (n, _)) in replicas.iter().enumerate() {
            by_level.entry(n.level).or_default().push(i);
        }
        let mut kept = Vec::new();
        for (level, members) in by_level {
            let w = *self.window(level)?;
            let tree = RTree::bulk_load(
                members
                    .iter()
                    .map(|&i| GeomWithData::new([replicas[i].0.lon, replicas[i].0.lat], i))
                    .collect(),
            );
            let mut home: Vec<usize> = members.into_iter().filter(|&i| replicas[i].1).collect();
            home.sort_by_key(|&i| replicas[i].0.cell);
            for i in home {
                let node = &replicas[i].0;
                let env = AABB::from_corners(
                    [node.lon - w.lon_off, node.lat - w.lat_off],
                    [node.lon + w.lon_off, node.lat + w.lat_off],
                );
                let neighbors: Vec<u64> = tree
                    .locate_in_envelope(&env)
                    .filter(|q| q.data != i)
                    .map(|q| &replicas[q.data].0)
                    .filter(|q| great_circle_km(node.centroid(), q.centroid()) < w.radius_km)
                    .map(|q| q.count)
                    .collect();
                let rank = percentile_rank(node.count, &neighbors);
                if rank > self.config.threshold {
                    let mut out = node.clone();
                    out.rank = Some(rank);
                    kept.push(out);
                }
            }
        }
        Ok(kept)
    }
}

/// Shuffle key: `(partition, level, cell)`.
pub type ReplicaKey = (u32, u32, u64);

impl Job for SummarizeJob {
    type Input = NodeRecord;
    type Key = ReplicaKey;
    /// Node record line plus the home flag.
    type Value = (String, bool);
    type MapState = ();
    type ReduceState = Vec<(NodeRecord, bool)>;

    fn parse(&self, line: &str) -> Result<Option<NodeRecord>> {
        if line.is_empty() || !line.starts_with(r#"{"t":"n""#) {
            return Ok(None);
        }
        match Record::parse(line)? {
            Record::Node(n) => Ok(Some(n)),
            Record::Edge(_) => Ok(None),
        }
    }

    fn map_setup(&self) {}

    fn map(&self, _: &mut (), node: NodeRecord, out: &mut Emitter<'_, Self>) -> Result<()> {
        let line = Record::Node(node.clone()).to_line();
        for (p, home) in self.neighbor_fanout(&node)? {
            out.emit_to(p, &(p as u32, node.level, node.cell), &(line.clone(), home))?;
        }
        Ok(())
    }

    fn partition(&self, key: &ReplicaKey, _partitions: usize) -> usize {
        key.0 as usize
    }

    fn reduce_setup(&self, _partition: usize) -> Vec<(NodeRecord, bool)> {
        Vec::new()
    }

    fn reduce(
        &self,
        state: &mut Vec<(NodeRecord, bool)>,
        _key: ReplicaKey,
        values: Vec<(String, bool)>,
        _out: &mut RecordWriter,
    ) -> Result<()> {
        // one replica per (partition, node); duplicates would be identical
        let (line, home) = values.into_iter().next().expect("non-empty group");
        match Record::parse(&line)? {
            Record::Node(n) => state.push((n, home)),
            Record::Edge(_) => return Err(Error::parse("summarize shuffle", "edge replica")),
        }
        Ok(())
    }

    fn reduce_cleanup(&self, state: Vec<(NodeRecord, bool)>, out: &mut RecordWriter) -> Result<()> {
        for node in self.score(&state)? {
            out.write_line(&Record::Node(node).to_line())?;
        }
        Ok(())
    }
}
