//! Balanced rectangle decomposition of the grid region.
//!
//! A [`PartitionScheme`] is built from a sample of movement source points
//! and shipped to every pipeline stage. [`RectIndex`] answers point
//! location and window queries over its rectangles.
//!
//! Boundary convention: a rectangle is half-open `[min, max)` on both axes,
//! except where its max edge coincides with the region's max edge, which is
//! closed. Every region point therefore lies in exactly one rectangle.

use std::borrow::Borrow;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rstar::primitives::{GeomWithData, Rectangle};
use rstar::{RTree, AABB};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::model::{GeoPoint, MovementRecord, Region};
use crate::registry::Registry;

pub const DEFAULT_SAMPLE_RATE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionScheme {
    pub depth: u32,
    pub rects: Vec<Region>,
    pub counts: Vec<u64>,
    pub seed: u64,
    #[serde(default)]
    pub sample_rate: f64,
    #[serde(default)]
    pub sample_size: u64,
    #[serde(default = "default_strategy_name")]
    pub strategy: String,
    pub region: Region,
}

fn default_strategy_name() -> String {
    PARTITION_STRATEGIES.default_name().to_string()
}

impl PartitionScheme {
    pub fn len(&self) -> usize {
        self.rects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rects.is_empty()
    }

    /// A one-rectangle scheme covering the whole region.
    pub fn single(region: Region) -> Self {
        PartitionScheme {
            depth: 0,
            rects: vec![region],
            counts: vec![0],
            seed: 0,
            sample_rate: 0.0,
            sample_size: 0,
            strategy: default_strategy_name(),
            region,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).ctx(|| format!("reading partition file {}", path.display()))?;
        let scheme: PartitionScheme = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if scheme.rects.is_empty() || scheme.rects.len() != scheme.counts.len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "rects and counts must be non-empty and of equal length".into(),
            });
        }
        Ok(scheme)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text + "\n").ctx(|| format!("writing partition file {}", path.display()))
    }

    pub fn index(&self) -> RectIndex {
        RectIndex::new(self)
    }
}

/// Bernoulli sample of movement source points, deterministic for a seed.
pub fn sample_points<I>(movements: I, rate: f64, seed: u64) -> Result<Vec<GeoPoint>>
where
    I: IntoIterator,
    I::Item: Borrow<MovementRecord>,
{
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidArgument(format!("sample rate must be in (0, 1], got {rate}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = 0u64;
    let mut out = Vec::new();
    for m in movements {
        seen += 1;
        if rate >= 1.0 || rng.gen::<f64>() < rate {
            out.push(m.borrow().src);
        }
    }
    if seen == 0 {
        return Err(Error::EmptyInput("no movements to sample".into()));
    }
    if out.is_empty() {
        return Err(Error::EmptyInput(format!(
            "sample of {seen} movements at rate {rate} is empty; raise the sample rate"
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Lon,
    Lat,
}

impl Axis {
    fn coord(self, p: &GeoPoint) -> f64 {
        match self {
            Axis::Lon => p.lon,
            Axis::Lat => p.lat,
        }
    }

    fn extent(self, r: &Region) -> (f64, f64) {
        match self {
            Axis::Lon => (r.lon_min, r.lon_max),
            Axis::Lat => (r.lat_min, r.lat_max),
        }
    }

    fn split(self, r: &Region, cut: f64) -> (Region, Region) {
        match self {
            Axis::Lon => (
                Region::from_bounds(r.lon_min, r.lat_min, cut, r.lat_max),
                Region::from_bounds(cut, r.lat_min, r.lon_max, r.lat_max),
            ),
            Axis::Lat => (
                Region::from_bounds(r.lon_min, r.lat_min, r.lon_max, cut),
                Region::from_bounds(r.lon_min, cut, r.lon_max, r.lat_max),
            ),
        }
    }
}

/// A proposed cut: points with coordinate `< position` go left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cut {
    pub axis: Axis,
    pub position: f64,
    pub imbalance: u64,
}

/// Median cut along one axis: the position minimizing the left/right
/// sample-count difference. Falls back to the spatial midpoint when the
/// samples admit no interior cut.
pub fn median_cut(rect: &Region, points: &[GeoPoint], axis: Axis) -> Cut {
    let mut vals: Vec<f64> = points.iter().map(|p| axis.coord(p)).collect();
    vals.sort_by(f64::total_cmp);
    let n = vals.len() as i64;
    let mut best: Option<(u64, f64)> = None;
    for i in 1..vals.len() {
        if vals[i - 1] < vals[i] {
            let imbalance = (2 * i as i64 - n).unsigned_abs();
            if best.is_none_or(|(b, _)| imbalance < b) {
                let mid = vals[i - 1] + (vals[i] - vals[i - 1]) / 2.0;
                let position = if mid > vals[i - 1] { mid } else { vals[i] };
                best = Some((imbalance, position));
            }
        }
    }
    match best {
        Some((imbalance, position)) => Cut { axis, position, imbalance },
        None => {
            let (lo, hi) = axis.extent(rect);
            let position = lo + (hi - lo) / 2.0;
            let left = vals.iter().filter(|&&v| v < position).count() as i64;
            Cut {
                axis,
                position,
                imbalance: (2 * left - n).unsigned_abs(),
            }
        }
    }
}

fn midpoint_cut(rect: &Region, points: &[GeoPoint]) -> Cut {
    let axis = if rect.height() > rect.width() { Axis::Lat } else { Axis::Lon };
    let (lo, hi) = axis.extent(rect);
    let position = lo + (hi - lo) / 2.0;
    let left = points.iter().filter(|p| axis.coord(p) < position).count() as i64;
    Cut {
        axis,
        position,
        imbalance: (2 * left - points.len() as i64).unsigned_abs(),
    }
}

/// How a bisection strategy picks the cut for one rectangle.
pub trait PartitionStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Choose a cut for `rect` holding `points`, `level` splits below the root.
    fn choose_cut(&self, rect: &Region, points: &[GeoPoint], level: u32) -> Cut;
}

/// Median cut on whichever axis yields the better balance; ties go to the
/// longer axis, then to longitude.
pub struct BalancedBisection;

impl PartitionStrategy for BalancedBisection {
    fn name(&self) -> &'static str {
        "bisect"
    }

    fn choose_cut(&self, rect: &Region, points: &[GeoPoint], _level: u32) -> Cut {
        if points.is_empty() {
            return midpoint_cut(rect, points);
        }
        let x = median_cut(rect, points, Axis::Lon);
        let y = median_cut(rect, points, Axis::Lat);
        if x.imbalance != y.imbalance {
            return if x.imbalance < y.imbalance { x } else { y };
        }
        if rect.height() > rect.width() {
            y
        } else {
            x
        }
    }
}

/// Classic recursive bisection: median cut, axis alternating with depth.
pub struct AlternatingBisection;

impl PartitionStrategy for AlternatingBisection {
    fn name(&self) -> &'static str {
        "bisect-alternating"
    }

    fn choose_cut(&self, rect: &Region, points: &[GeoPoint], level: u32) -> Cut {
        if points.is_empty() {
            return midpoint_cut(rect, points);
        }
        let axis = if level.is_multiple_of(2) { Axis::Lon } else { Axis::Lat };
        median_cut(rect, points, axis)
    }
}

/// Data-independent halving at the spatial midpoint of the longer axis.
pub struct UniformSplit;

impl PartitionStrategy for UniformSplit {
    fn name(&self) -> &'static str {
        "uniform"
    }

    fn choose_cut(&self, rect: &Region, points: &[GeoPoint], _level: u32) -> Cut {
        midpoint_cut(rect, points)
    }
}

pub static PARTITION_STRATEGIES: Registry<dyn PartitionStrategy> = Registry::new(
    "partition",
    &[
        ("bisect", |_| Box::new(BalancedBisection)),
        ("bisect-alternating", |_| Box::new(AlternatingBisection)),
        ("uniform", |_| Box::new(UniformSplit)),
    ],
);

/// Split `region` `depth` times, yielding `2^depth` rectangles in depth-first
/// (left before right) order.
pub fn recursive_bisect(
    region: Region,
    points: &[GeoPoint],
    depth: u32,
    strategy: &dyn PartitionStrategy,
) -> Result<PartitionScheme> {
    if points.is_empty() {
        return Err(Error::EmptyInput("cannot partition an empty sample".into()));
    }
    if depth > 20 {
        return Err(Error::InvalidArgument(format!("depth {depth} is too large")));
    }
    let inside: Vec<GeoPoint> = points.iter().copied().filter(|p| region.contains(*p)).collect();
    let mut rects = Vec::with_capacity(1 << depth);
    let mut counts = Vec::with_capacity(1 << depth);
    split(region, inside, 0, depth, strategy, &mut rects, &mut counts);
    Ok(PartitionScheme {
        depth,
        rects,
        counts,
        seed: 0,
        sample_rate: 0.0,
        sample_size: points.len() as u64,
        strategy: strategy.name().to_string(),
        region,
    })
}

fn split(
    rect: Region,
    points: Vec<GeoPoint>,
    level: u32,
    depth: u32,
    strategy: &dyn PartitionStrategy,
    rects: &mut Vec<Region>,
    counts: &mut Vec<u64>,
) {
    if level == depth {
        rects.push(rect);
        counts.push(points.len() as u64);
        return;
    }
    let cut = strategy.choose_cut(&rect, &points, level);
    let (left_rect, right_rect) = cut.axis.split(&rect, cut.position);
    let (left, right): (Vec<GeoPoint>, Vec<GeoPoint>) =
        points.into_iter().partition(|p| cut.axis.coord(p) < cut.position);
    split(left_rect, left, level + 1, depth, strategy, rects, counts);
    split(right_rect, right, level + 1, depth, strategy, rects, counts);
}

type IndexedRect = GeomWithData<Rectangle<[f64; 2]>, usize>;

/// R-tree over partition rectangles; leaf payload is the partition id.
#[derive(Debug, Clone)]
pub struct RectIndex {
    tree: RTree<IndexedRect>,
    rects: Vec<Region>,
    region: Region,
}

impl RectIndex {
    pub fn new(scheme: &PartitionScheme) -> Self {
        let items = scheme
            .rects
            .iter()
            .enumerate()
            .map(|(id, r)| GeomWithData::new(Rectangle::from_corners([r.lon_min, r.lat_min], [r.lon_max, r.lat_max]), id))
            .collect();
        RectIndex {
            tree: RTree::bulk_load(items),
            rects: scheme.rects.clone(),
            region: scheme.region,
        }
    }

    pub fn len(&self) -> usize {
        self.rects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rects.is_empty()
    }

    pub fn rect(&self, id: usize) -> &Region {
        &self.rects[id]
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    fn upper_ok(&self, value: f64, max: f64, region_max: f64) -> bool {
        value < max || (max == region_max && value <= max)
    }

    fn owns(&self, r: &Region, p: GeoPoint) -> bool {
        p.lon >= r.lon_min
            && p.lat >= r.lat_min
            && self.upper_ok(p.lon, r.lon_max, self.region.lon_max)
            && self.upper_ok(p.lat, r.lat_max, self.region.lat_max)
    }

    /// The unique partition owning `p`.
    pub fn locate(&self, p: GeoPoint) -> Result<usize> {
        if !self.region.contains(p) {
            return Err(Error::OutOfRegion(p));
        }
        self.tree
            .locate_all_at_point(&[p.lon, p.lat])
            .map(|item| item.data)
            .filter(|&id| self.owns(&self.rects[id], p))
            .min()
            .ok_or(Error::OutOfRegion(p))
    }

    /// Partitions whose (half-open) extent meets the closed window
    /// `[p.lon ± lon_off] × [p.lat ± lat_off]`, sorted ascending.
    pub fn neighbors_in_window(&self, p: GeoPoint, lon_off: f64, lat_off: f64) -> Vec<usize> {
        let (w0, w1) = (p.lon - lon_off, p.lon + lon_off);
        let (s0, s1) = (p.lat - lat_off, p.lat + lat_off);
        let env = AABB::from_corners([w0, s0], [w1, s1]);
        let mut ids: Vec<usize> = self
            .tree
            .locate_in_envelope_intersecting(&env)
            .map(|item| item.data)
            .filter(|&id| {
                let r = &self.rects[id];
                w1 >= r.lon_min
                    && s1 >= r.lat_min
                    && self.upper_ok(w0, r.lon_max, self.region.lon_max)
                    && self.upper_ok(s0, r.lat_max, self.region.lat_max)
            })
            .collect();
        ids.sort_unstable();
        ids
    }

    /// Square-window neighbor query with half-width `offset_deg`.
    pub fn neighbor_partitions(&self, p: GeoPoint, offset_deg: f64) -> Vec<usize> {
        self.neighbors_in_window(p, offset_deg, offset_deg)
    }
}
