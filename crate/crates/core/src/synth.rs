//! Synthetic event generator.
//!
//! Each user gets a home point: with probability `skew` inside one of a few
//! small dense squares (together covering `hot_area_fraction` of the
//! region), otherwise uniform over the region. Events are a noisy walk
//! around home with occasional repeats of the previous position.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::ingest::GeoEvent;
use crate::model::{GeoPoint, GridHierarchy, Region};
use crate::records::{EdgeRecord, NodeRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub users: u64,
    pub events_per_user: u64,
    /// Fraction of users living in the dense squares.
    pub skew: f64,
    pub clusters: u32,
    pub hot_area_fraction: f64,
    pub region: Region,
    pub seed: u64,
    /// Std-dev of event positions around home, degrees.
    pub spread_deg: f64,
    /// Probability an event repeats the previous position.
    pub stay_prob: f64,
    pub t0: i64,
    /// Mean gap between a user's events, seconds.
    pub mean_gap_s: f64,
}

impl SynthConfig {
    pub fn new(region: Region, users: u64, events_per_user: u64, seed: u64) -> Self {
        SynthConfig {
            users,
            events_per_user,
            skew: 0.8,
            clusters: 8,
            hot_area_fraction: 0.05,
            region,
            seed,
            spread_deg: 0.02 * region.width().min(region.height()),
            stay_prob: 0.15,
            t0: 1_356_998_400,
            mean_gap_s: 6.0 * 3600.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(0.0..=1.0).contains(&self.skew) {
            return bad("skew must be in [0, 1]");
        }
        if !(self.hot_area_fraction > 0.0 && self.hot_area_fraction <= 1.0) {
            return bad("hot area fraction must be in (0, 1]");
        }
        if self.clusters == 0 {
            return bad("at least one cluster is required");
        }
        if !(self.spread_deg >= 0.0) || !(0.0..1.0).contains(&self.stay_prob) || !(self.mean_gap_s > 0.0) {
            return bad("spread, stay probability and gap must be sane");
        }
        Ok(())
    }
}

fn uniform_in(rng: &mut ChaCha8Rng, r: &Region) -> GeoPoint {
    GeoPoint {
        lon: rng.gen_range(r.lon_min..=r.lon_max),
        lat: rng.gen_range(r.lat_min..=r.lat_max),
    }
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Dense squares for a config; deterministic in the seed.
pub fn hot_squares(cfg: &SynthConfig) -> Result<Vec<Region>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5157);
    let r = cfg.region;
    let side = (cfg.hot_area_fraction * r.area() / cfg.clusters as f64).sqrt();
    let side = side.min(r.width()).min(r.height());
    (0..cfg.clusters)
        .map(|_| {
            let lon = rng.gen_range(r.lon_min..=r.lon_max - side);
            let lat = rng.gen_range(r.lat_min..=r.lat_max - side);
            Region::new(lon, lat, lon + side, lat + side)
        })
        .collect()
}

/// Events in user order, each user's events in time order. Positions are
/// clamped to the region and rounded to 1e-6 degrees.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<GeoEvent>> {
    let squares = hot_squares(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.spread_deg.max(f64::MIN_POSITIVE)).expect("finite std-dev");
    let gap = Exp::new(1.0 / cfg.mean_gap_s).expect("positive rate");
    let r = cfg.region;
    let mut events = Vec::with_capacity((cfg.users * cfg.events_per_user) as usize);
    for user in 0..cfg.users {
        let home_area = if rng.gen_bool(cfg.skew) {
            squares[rng.gen_range(0..squares.len())]
        } else {
            r
        };
        let home = uniform_in(&mut rng, &home_area);
        let spread = if home_area == r { 1.0 } else { 0.25 };
        let mut t = cfg.t0 + rng.gen_range(0..86_400 * 7);
        let mut last: Option<GeoPoint> = None;
        for _ in 0..cfg.events_per_user {
            let point = match last {
                Some(p) if rng.gen_bool(cfg.stay_prob) => p,
                _ => GeoPoint {
                    lon: round6((home.lon + spread * noise.sample(&mut rng)).clamp(r.lon_min, r.lon_max)),
                    lat: round6((home.lat + spread * noise.sample(&mut rng)).clamp(r.lat_min, r.lat_max)),
                },
            };
            events.push(GeoEvent { user, t, point });
            last = Some(point);
            t += 1 + gap.sample(&mut rng) as i64;
        }
    }
    Ok(events)
}

pub const EVENT_HEADER: &str = "user_id,epoch_seconds,lon,lat";

pub fn write_events<W: Write>(mut out: W, events: &[GeoEvent]) -> Result<()> {
    let ctx = || "writing events".to_string();
    writeln!(out, "{EVENT_HEADER}").ctx(ctx)?;
    for e in events {
        writeln!(out, "{},{},{},{}", e.user, e.t, e.point.lon, e.point.lat).ctx(ctx)?;
    }
    out.flush().ctx(ctx)
}

/// Shape of a directly generated multi-level graph.
#[derive(Debug, Clone)]
pub struct GraphSynthConfig {
    pub nodes: usize,
    pub edges_per_node: usize,
    pub buckets: u64,
    pub skew: f64,
    pub seed: u64,
}

/// Random multi-level graph over `grid`, bypassing the pipeline. Nodes per
/// level grow with level (capped by the level's cell count), node positions
/// follow the same dense-square mixture as [`generate`], and each node gets
/// up to `edges_per_node` out-edges to nodes close to it in cell order.
pub fn synthetic_graph(grid: &GridHierarchy, cfg: &GraphSynthConfig) -> Result<(Vec<NodeRecord>, Vec<EdgeRecord>)> {
    let mut base = SynthConfig::new(grid.region(), 0, 0, cfg.seed);
    base.skew = cfg.skew;
    let squares = hot_squares(&base)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let levels = grid.levels();
    let weights: Vec<f64> = (1..=levels).map(|l| l as f64).collect();
    let total_w: f64 = weights.iter().sum();
    let buckets = cfg.buckets.max(1);
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    for level in 1..=levels {
        let cap = grid.cell_count(level)? as usize;
        let want = ((cfg.nodes as f64 * weights[(level - 1) as usize] / total_w).round() as usize).min(cap);
        let mut cells: BTreeMap<u64, GeoPoint> = BTreeMap::new();
        let mut attempts = 0;
        while cells.len() < want && attempts < want * 20 {
            attempts += 1;
            let area = if rng.gen_bool(cfg.skew) { squares[rng.gen_range(0..squares.len())] } else { grid.region() };
            let p = uniform_in(&mut rng, &area);
            let id = grid.cell_id(p, level)?;
            let (_, bounds) = grid.cell_centroid_bounds(id)?;
            cells.entry(id.index).or_insert_with(|| uniform_in(&mut rng, &bounds));
        }
        let ids: Vec<u64> = cells.keys().copied().collect();
        for (&cell, p) in &cells {
            let mut tb: BTreeMap<u64, u64> = BTreeMap::new();
            let count = 1 + (1.0 / (1.0 - rng.gen::<f64>()).max(1e-6)).powf(1.2) as u64;
            for _ in 0..count.min(32) {
                *tb.entry(rng.gen_range(0..buckets)).or_default() += 1;
            }
            // fold the remainder into the first bucket so the histogram sums to count
            let spread: u64 = tb.values().sum();
            *tb.values_mut().next().expect("non-empty") += count - spread;
            nodes.push(NodeRecord {
                level,
                cell,
                lon: p.lon,
                lat: p.lat,
                count,
                source_count: count.div_ceil(2),
                users: Some(count.div_ceil(3)),
                tt_sum: (count as i64) * rng.gen_range(600..7200),
                tbuckets: tb.into_iter().map(|(b, c)| [b, c]).collect(),
                rank: Some(rng.gen_range(80.0..=100.0)),
            });
        }
        let n = ids.len();
        for (i, &src) in ids.iter().enumerate() {
            let mut dsts: Vec<u64> = (0..cfg.edges_per_node.min(n.saturating_sub(1)))
                .map(|_| {
                    let off = rng.gen_range(1..=64.min(n - 1));
                    ids[(i + off) % n]
                })
                .collect();
            dsts.sort_unstable();
            dsts.dedup();
            for dst in dsts {
                let c = rng.gen_range(1..=8u64);
                edges.push(EdgeRecord {
                    level,
                    src,
                    dst,
                    count: c,
                    tt_sum: c as i64 * 1800,
                    max_km: 1.0,
                    tbuckets: vec![[rng.gen_range(0..buckets), c]],
                });
            }
        }
    }
    Ok((nodes, edges))
}
