//! Shared helpers for CLI integration tests, including a brute-force
//! reference pipeline written without any of the library's code paths.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_flowcube");

pub fn flowcube<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().expect("spawning flowcube")
}

/// Run and require exit code 0.
pub fn ok<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    let out = flowcube(args);
    assert!(
        out.status.success(),
        "flowcube failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// 16° x 16° region, five levels, 0.125° finest cells.
pub const SMALL_GRID: &str = r#"{"region":[-100.0,30.0,-84.0,46.0],"levels":5,"base_cell_arcsec":450.0,"growth":2}"#;

pub fn write_small_grid(dir: &Path) -> PathBuf {
    let p = dir.join("grid.json");
    std::fs::write(&p, SMALL_GRID).unwrap();
    p
}

pub fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

// reference pipeline

#[derive(Debug, Clone, Copy)]
pub struct RefGrid {
    pub w: f64,
    pub s: f64,
    pub e: f64,
    pub n: f64,
    pub levels: u32,
    pub base_arcsec: f64,
}

impl RefGrid {
    pub fn small() -> Self {
        RefGrid { w: -100.0, s: 30.0, e: -84.0, n: 46.0, levels: 5, base_arcsec: 450.0 }
    }

    pub fn deg(&self, level: u32) -> f64 {
        self.base_arcsec * 2f64.powi((self.levels - level) as i32) / 3600.0
    }

    pub fn km(&self, level: u32) -> f64 {
        self.deg(level) * 6371.0 * std::f64::consts::PI / 180.0
    }

    pub fn cell(&self, level: u32, lon: f64, lat: f64) -> u64 {
        let d = self.deg(level);
        let cols = ((self.e - self.w) / d).round() as u64;
        let rows = ((self.n - self.s) / d).round() as u64;
        let c = (((lon - self.w) / d).floor() as u64).min(cols - 1);
        let r = (((lat - self.s) / d).floor() as u64).min(rows - 1);
        r * cols + c
    }
}

pub fn haversine(lon1: f64, lat1: f64, lon2: f64, lat2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let a = ((p2 - p1) / 2.0).sin().powi(2) + p1.cos() * p2.cos() * ((lon2 - lon1).to_radians() / 2.0).sin().powi(2);
    2.0 * 6371.0 * a.sqrt().asin()
}

#[derive(Debug, Clone, Copy)]
pub struct Move {
    pub t_src: i64,
    pub t_dst: i64,
    pub src: (f64, f64),
    pub dst: (f64, f64),
}

pub fn read_moves(path: &Path) -> Vec<Move> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let x = |i: usize| f[i].parse::<f64>().unwrap();
            Move {
                t_src: f[1].parse().unwrap(),
                t_dst: f[2].parse().unwrap(),
                src: (x(3), x(4)),
                dst: (x(5), x(6)),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct RefNode {
    pub lon_sum: f64,
    pub lat_sum: f64,
    pub count: u64,
    pub sources: u64,
    pub tt: i64,
    pub hist: BTreeMap<u64, u64>,
}

impl RefNode {
    pub fn centroid(&self) -> (f64, f64) {
        (self.lon_sum / self.count as f64, self.lat_sum / self.count as f64)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RefEdge {
    pub count: u64,
    pub tt: i64,
    pub max_km: f64,
    pub hist: BTreeMap<u64, u64>,
}

pub type NodeKey = (u32, u64);
pub type EdgeKey = (u32, u64, u64);

pub struct Reference {
    pub nodes: BTreeMap<NodeKey, RefNode>,
    pub edges: BTreeMap<EdgeKey, RefEdge>,
    pub kept: BTreeSet<NodeKey>,
    pub kept_edges: BTreeSet<EdgeKey>,
}

/// Single pass per level, quadratic neighbourhoods, exact semi-join.
pub fn reference(grid: &RefGrid, moves: &[Move], alpha: f64, radius_cells: f64, threshold: f64) -> Reference {
    let day = 86_400;
    let mut nodes: BTreeMap<NodeKey, RefNode> = BTreeMap::new();
    let mut edges: BTreeMap<EdgeKey, RefEdge> = BTreeMap::new();
    for m in moves {
        let bucket = (m.t_src / day) as u64;
        let tt = m.t_dst - m.t_src;
        let km = haversine(m.src.0, m.src.1, m.dst.0, m.dst.1);
        for l in 1..=grid.levels {
            let a = grid.cell(l, m.src.0, m.src.1);
            let b = grid.cell(l, m.dst.0, m.dst.1);
            let n = nodes.entry((l, a)).or_default();
            n.lon_sum += m.src.0;
            n.lat_sum += m.src.1;
            n.count += 1;
            n.sources += 1;
            n.tt += tt;
            *n.hist.entry(bucket).or_default() += 1;
            let n = nodes.entry((l, b)).or_default();
            n.lon_sum += m.dst.0;
            n.lat_sum += m.dst.1;
            n.count += 1;
            *n.hist.entry(bucket).or_default() += 1;
            if km < alpha * grid.km(l) {
                let e = edges.entry((l, a, b)).or_default();
                e.count += 1;
                e.tt += tt;
                e.max_km = e.max_km.max(km);
                *e.hist.entry(bucket).or_default() += 1;
            }
        }
    }
    let mut kept = BTreeSet::new();
    for l in 1..=grid.levels {
        let radius = radius_cells * grid.km(l);
        let level: Vec<(&NodeKey, (f64, f64), u64)> =
            nodes.range((l, 0)..=(l, u64::MAX)).map(|(k, n)| (k, n.centroid(), n.count)).collect();
        for (i, (key, c, count)) in level.iter().enumerate() {
            let (mut below, mut ties, mut total) = (0.0, 0.0, 0.0);
            for (j, (_, d, other)) in level.iter().enumerate() {
                if i == j || haversine(c.0, c.1, d.0, d.1) >= radius {
                    continue;
                }
                total += 1.0;
                if other < count {
                    below += 1.0;
                } else if other == count {
                    ties += 1.0;
                }
            }
            let rank = if total == 0.0 { 100.0 } else { 100.0 * (below + 0.5 * ties) / total };
            if rank > threshold {
                kept.insert(**key);
            }
        }
    }
    let kept_edges = edges
        .keys()
        .filter(|(l, a, b)| kept.contains(&(*l, *a)) && kept.contains(&(*l, *b)))
        .copied()
        .collect();
    Reference { nodes, edges, kept, kept_edges }
}
