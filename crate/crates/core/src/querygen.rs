//! Stress-test query scripts.
//!
//! Both patterns draw levels uniformly from `1..=L` and size the box as
//! `box_cells` cell lengths of the chosen level, centered on a drawn point
//! and clipped to the region.

use std::io::{BufRead, Write};

use rand::distributions::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::model::{GeoPoint, GridHierarchy, Region};
use crate::registry::Registry;

pub const DEFAULT_BOX_CELLS: f64 = 40.0;

/// Level at which the hotspot pattern picks its dense sub-region.
pub const HOTSPOT_LEVEL: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub level: u32,
    pub bbox: [f64; 4],
    /// Bucket window; absent means all buckets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<[u64; 2]>,
}

/// Weighted points standing in for data density.
#[derive(Debug, Clone, Default)]
pub struct DensitySample {
    pub points: Vec<GeoPoint>,
    pub weights: Vec<f64>,
}

impl DensitySample {
    pub fn unweighted(points: Vec<GeoPoint>) -> Self {
        let weights = vec![1.0; points.len()];
        DensitySample { points, weights }
    }

    fn pick(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Result<GeoPoint> {
        let dist = WeightedIndex::new(idx.iter().map(|&i| self.weights[i]))
            .map_err(|e| Error::InvalidArgument(format!("density weights: {e}")))?;
        Ok(self.points[idx[rng.sample(&dist)]])
    }
}

/// Node centroids weighted by count.
pub fn density_from_nodes(nodes: &[crate::records::NodeRecord]) -> DensitySample {
    DensitySample {
        points: nodes.iter().map(|n| GeoPoint { lon: n.lon, lat: n.lat }).collect(),
        weights: nodes.iter().map(|n| n.count as f64).collect(),
    }
}

pub struct GenContext<'a> {
    pub grid: &'a GridHierarchy,
    pub sample: &'a DensitySample,
    pub box_cells: f64,
}

pub trait QueryPattern: Send + Sync {
    fn name(&self) -> &'static str;

    /// Query-box centers for `n` queries, plus the sub-region they were
    /// confined to, if any.
    fn centers(&self, ctx: &GenContext<'_>, n: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<GeoPoint>, Option<Region>)>;
}

/// Centers proportional to density over the whole region.
pub struct PopulationPattern;

impl QueryPattern for PopulationPattern {
    fn name(&self) -> &'static str {
        "population"
    }

    fn centers(&self, ctx: &GenContext<'_>, n: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<GeoPoint>, Option<Region>)> {
        let all: Vec<usize> = (0..ctx.sample.points.len()).collect();
        let centers = (0..n).map(|_| ctx.sample.pick(&all, rng)).collect::<Result<_>>()?;
        Ok((centers, None))
    }
}

/// Centers confined to one coarse cell, chosen with probability
/// proportional to its density, then drawn by density inside it.
pub struct HotspotPattern;

impl QueryPattern for HotspotPattern {
    fn name(&self) -> &'static str {
        "hotspot"
    }

    fn centers(&self, ctx: &GenContext<'_>, n: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<GeoPoint>, Option<Region>)> {
        let level = HOTSPOT_LEVEL.min(ctx.grid.levels());
        let mut bins: std::collections::BTreeMap<u64, (f64, Vec<usize>)> = Default::default();
        for (i, p) in ctx.sample.points.iter().enumerate() {
            let cell = ctx.grid.cell_id(*p, level)?;
            let bin = bins.entry(cell.index).or_default();
            bin.0 += ctx.sample.weights[i];
            bin.1.push(i);
        }
        let bins: Vec<(u64, (f64, Vec<usize>))> = bins.into_iter().collect();
        let dist = WeightedIndex::new(bins.iter().map(|b| b.1 .0))
            .map_err(|e| Error::InvalidArgument(format!("density weights: {e}")))?;
        let (cell, (_, members)) = &bins[rng.sample(&dist)];
        let (_, bounds) = ctx.grid.cell_centroid_bounds(crate::model::CellId::new(level, *cell))?;
        let centers = (0..n).map(|_| ctx.sample.pick(members, rng)).collect::<Result<_>>()?;
        Ok((centers, Some(bounds)))
    }
}

pub static QUERY_PATTERNS: Registry<dyn QueryPattern> = Registry::new(
    "query-pattern",
    &[("population", |_| Box::new(PopulationPattern)), ("hotspot", |_| Box::new(HotspotPattern))],
);

#[derive(Debug, Clone)]
pub struct QueryScript {
    pub queries: Vec<QuerySpec>,
    pub subregion: Option<Region>,
}

/// Deterministic query script for `pattern`.
pub fn stress_gen(pattern: &dyn QueryPattern, ctx: &GenContext<'_>, n: usize, seed: u64) -> Result<QueryScript> {
    if ctx.sample.points.is_empty() {
        return Err(Error::EmptyInput("density sample has no points".into()));
    }
    if ctx.sample.points.len() != ctx.sample.weights.len() {
        return Err(Error::InvalidArgument("density sample weights do not match points".into()));
    }
    if !(ctx.box_cells > 0.0) {
        return Err(Error::InvalidArgument("box size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (centers, subregion) = pattern.centers(ctx, n, &mut rng)?;
    let region = ctx.grid.region();
    let queries = centers
        .into_iter()
        .map(|c| {
            let level = rng.gen_range(1..=ctx.grid.levels());
            let half = ctx.box_cells * ctx.grid.cell_len_deg(level)? / 2.0;
            Ok(QuerySpec {
                level,
                bbox: [
                    (c.lon - half).max(region.lon_min),
                    (c.lat - half).max(region.lat_min),
                    (c.lon + half).min(region.lon_max),
                    (c.lat + half).min(region.lat_max),
                ],
                window: None,
            })
        })
        .collect::<Result<_>>()?;
    Ok(QueryScript { queries, subregion })
}

pub fn write_script<W: Write>(mut out: W, queries: &[QuerySpec]) -> Result<()> {
    for q in queries {
        writeln!(out, "{}", serde_json::to_string(q)?).ctx(|| "writing query script".into())?;
    }
    Ok(())
}

pub fn read_script<R: BufRead>(input: R) -> Result<Vec<QuerySpec>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line.ctx(|| "reading query script".into())?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| Error::parse("query script", e.to_string()))?);
        }
    }
    Ok(out)
}
