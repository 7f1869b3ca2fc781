//! Acceptance criteria A1 to A10. Runs sequentially (timing criteria must not
//! share the CPU with each other) and prints one PASS/FAIL line each.
//! Pass criterion names (`A3 A9`) after `--` to run a subset.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use common::*;
use flowcube_core::aggregate::TimeBucketing;
use flowcube_core::cube::{write_snapshot, Cube, Provenance, SnapshotHeader};
use flowcube_core::filter::BloomFilter;
use flowcube_core::pipeline::read_records;
use flowcube_core::querygen::QuerySpec;
use flowcube_core::records::Record;
use flowcube_core::synth::{synthetic_graph, GraphSynthConfig};
use flowcube_core::{GridConfig, GridHierarchy, Region};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// A1 dataset, built once and shared.
struct A1Data {
    _dir: tempfile::TempDir,
    root: PathBuf,
    grid: PathBuf,
    work: PathBuf,
    snapshot: PathBuf,
    run_all: Duration,
}

impl A1Data {
    fn movements(&self) -> PathBuf {
        self.work.join("movements.csv")
    }
    fn parts(&self) -> PathBuf {
        self.work.join("parts.json")
    }
    fn agg(&self) -> PathBuf {
        self.work.join("agg")
    }
    fn summary(&self) -> PathBuf {
        self.work.join("summary")
    }
    fn edges(&self) -> PathBuf {
        self.work.join("edges")
    }
}

fn a1_data() -> &'static A1Data {
    static DATA: OnceLock<A1Data> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let grid = write_small_grid(&root);
        let events = root.join("events.csv");
        ok(["synth", "--users", "1000", "--events-per-user", "20", "--seed", "1", "--grid", &s(&grid), "-o", &s(&events)]);
        let work = root.join("work");
        let snapshot = root.join("a1.snap");
        let t = Instant::now();
        ok([
            "run-all", &s(&events), "-o", &s(&snapshot), "--work-dir", &s(&work), "--grid", &s(&grid), "--built-at", "0",
        ]);
        A1Data { _dir: dir, root, grid, work, snapshot, run_all: t.elapsed() }
    })
}

fn node_keys(dir: &Path) -> BTreeSet<NodeKey> {
    read_records(dir).unwrap().0.iter().map(|n| (n.level, n.cell)).collect()
}

fn edge_keys(dir: &Path) -> BTreeSet<EdgeKey> {
    read_records(dir).unwrap().1.iter().map(|e| (e.level, e.src, e.dst)).collect()
}

fn hist(h: &BTreeMap<u64, u64>) -> Vec<[u64; 2]> {
    h.iter().map(|(&b, &c)| [b, c]).collect()
}

fn a1() -> Outcome {
    let d = a1_data();
    let t = Instant::now();
    let moves = read_moves(&d.movements());
    let r = reference(&RefGrid::small(), &moves, 64.0, 8.0, 80.0);
    let elapsed = d.run_all + t.elapsed();

    let (nodes, edges) = read_records(&d.agg()).unwrap();
    let mut node_bad = 0;
    let mut max_centroid_err = 0f64;
    for n in &nodes {
        match r.nodes.get(&(n.level, n.cell)) {
            Some(x) => {
                let (lon, lat) = x.centroid();
                let err = (lon - n.lon).abs().max((lat - n.lat).abs());
                max_centroid_err = max_centroid_err.max(err);
                if x.count != n.count || x.sources != n.source_count || x.tt != n.tt_sum || hist(&x.hist) != n.tbuckets || err > 1e-9 {
                    node_bad += 1;
                }
            }
            None => node_bad += 1,
        }
    }
    let node_multiset = nodes.len() == r.nodes.len() && node_bad == 0;

    let mut edge_bad = 0;
    for e in &edges {
        match r.edges.get(&(e.level, e.src, e.dst)) {
            Some(x) => {
                if x.count != e.count || x.tt != e.tt_sum || hist(&x.hist) != e.tbuckets || (x.max_km - e.max_km).abs() > 1e-9 {
                    edge_bad += 1;
                }
            }
            None => edge_bad += 1,
        }
    }
    let edge_multiset = edges.len() == r.edges.len() && edge_bad == 0;

    let kept = node_keys(&d.summary());
    let kept_ok = kept == r.kept;

    let filtered = edge_keys(&d.edges());
    let all: BTreeSet<EdgeKey> = r.edges.keys().copied().collect();
    let surplus: BTreeSet<EdgeKey> = filtered.difference(&r.kept_edges).copied().collect();
    let filtered_ok = r.kept_edges.is_subset(&filtered) && surplus.iter().all(|e| all.contains(e) && !r.kept_edges.contains(e));

    let cube = Cube::load(&d.snapshot).unwrap();
    let mut snap_nodes = BTreeSet::new();
    let mut snap_edges = BTreeSet::new();
    for l in 1..=5 {
        snap_nodes.extend(cube.nodes(l).unwrap().iter().map(|n| (l, n.cell)));
        snap_edges.extend(cube.edges(l).unwrap().iter().map(|e| (l, e.src, e.dst)));
    }
    let snap_ok = snap_nodes == r.kept && snap_edges == r.kept_edges;

    let pass = node_multiset && edge_multiset && kept_ok && filtered_ok && snap_ok && elapsed < Duration::from_secs(60);
    outcome(
        pass,
        format!(
            "movements={} nodes={}/{} (bad {node_bad}) edges={}/{} (bad {edge_bad}) max centroid err={max_centroid_err:.1e} \
             kept={}/{} kept edges={} bloom surplus={} snapshot match={snap_ok} runtime={:.1}s (limit 60s)",
            moves.len(),
            nodes.len(),
            r.nodes.len(),
            edges.len(),
            r.edges.len(),
            kept.len(),
            r.kept.len(),
            r.kept_edges.len(),
            surplus.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn stage_report(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn a2() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| s(&dir.path().join(n));
    ok(["synth", "--users", "20000", "--events-per-user", "50", "--skew", "0.8", "--seed", "2", "-o", &p("events.csv")]);
    ok(["ingest", &p("events.csv"), "-o", &p("movements.csv")]);
    ok(["partition", &p("movements.csv"), "--depth", "4", "--sample-rate", "0.01", "--seed", "2", "-o", &p("parts.json")]);
    ok(["aggregate", &p("movements.csv"), "--parts", &p("parts.json"), "-o", &p("agg"), "--report", &p("report.json")]);
    let report = stage_report(&dir.path().join("report.json"));
    let loads: Vec<f64> = report["job"]["map_output"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let mean = loads.iter().sum::<f64>() / loads.len() as f64;
    let max = loads.iter().cloned().fold(f64::MIN, f64::max) / mean;
    let min = loads.iter().cloned().fold(f64::MAX, f64::min) / mean;
    outcome(
        loads.len() == 16 && max <= 1.3 && min >= 0.7,
        format!("partitions={} mean map output={mean:.0} max/mean={max:.3} (<=1.3) min/mean={min:.3} (>=0.7)", loads.len()),
    )
}

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn a3() -> Outcome {
    let d = a1_data();
    let mut runs = Vec::new();
    for w in ["1", "8"] {
        let out = d.root.join(format!("w{w}"));
        let (agg, sum, edg) = (out.join("agg"), out.join("summary"), out.join("edges"));
        let exec = ["--workers", w, "--split-bytes", "200000"];
        ok([&["aggregate", &s(&d.movements()), "--parts", &s(&d.parts()), "--grid", &s(&d.grid), "-o", &s(&agg)][..], &exec].concat());
        ok([&["summarize", &s(&agg), "--parts", &s(&d.parts()), "-o", &s(&sum)][..], &exec].concat());
        ok([&["filter-edges", &s(&agg), &s(&sum), "-o", &s(&edg)][..], &exec].concat());
        runs.push(files_under(&out));
    }
    let same = runs[0] == runs[1];
    let bytes: usize = runs[0].values().map(Vec::len).sum();
    outcome(same, format!("files={} bytes={bytes} identical={same}", runs[0].len()))
}

fn a4() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| s(&dir.path().join(n));
    ok(["synth", "--users", "260000", "--events-per-user", "24", "--seed", "4", "-o", &p("events.csv")]);
    let ingest: Value = serde_json::from_slice(&ok(["ingest", &p("events.csv"), "-o", &p("movements.csv")]).stdout).unwrap();
    std::fs::remove_file(dir.path().join("events.csv")).unwrap();
    ok(["partition", &p("movements.csv"), "--depth", "4", "-o", &p("parts.json")]);
    let mut wall = Vec::new();
    for w in ["1", "8"] {
        let report = p(&format!("report{w}.json"));
        ok(["aggregate", &p("movements.csv"), "--parts", &p("parts.json"), "-o", &p("agg"), "--workers", w, "--report", &report]);
        wall.push(stage_report(Path::new(&report))["wall_ms"].as_f64().unwrap());
    }
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let movements = ingest["movements"].as_u64().unwrap();
    let ratio = wall[1] / wall[0];
    outcome(
        movements >= 5_000_000 && ratio <= 1.0 / 3.0,
        format!(
            "movements={movements} cores={cores} W1={:.1}s W8={:.1}s ratio={ratio:.3} (<=0.333; needs 8 cores)",
            wall[0] / 1e3,
            wall[1] / 1e3
        ),
    )
}

fn scaled_copy(src: &Path, dst: &Path, factor: u64) {
    std::fs::create_dir_all(dst).unwrap();
    for (name, bytes) in files_under(src) {
        let text = String::from_utf8(bytes).unwrap();
        let out = if name.to_string_lossy().starts_with("part-") {
            text.lines()
                .map(|line| {
                    let mut rec = Record::parse(line).unwrap();
                    if let Record::Node(n) = &mut rec {
                        n.count *= factor;
                    }
                    rec.to_line() + "\n"
                })
                .collect()
        } else {
            text
        };
        std::fs::write(dst.join(name), out).unwrap();
    }
}

fn a5() -> Outcome {
    let d = a1_data();
    let base = node_keys(&d.summary());
    let dir = d.root.join("a5");
    let summarize = |agg: &Path, parts: &Path, threshold: &str, out: &str| {
        let out = dir.join(out);
        ok(["summarize", &s(agg), "--parts", &s(parts), "--threshold", threshold, "-o", &s(&out)]);
        node_keys(&out)
    };
    let k85 = summarize(&d.agg(), &d.parts(), "85", "t85");
    let nested = k85.is_subset(&base) && k85.len() < base.len();

    scaled_copy(&d.agg(), &dir.join("agg7"), 7);
    let scaled = summarize(&dir.join("agg7"), &d.parts(), "80", "x7") == base;

    let mut layouts = Vec::new();
    for depth in 0..=3 {
        let parts = dir.join(format!("parts{depth}.json"));
        ok(["partition", &s(&d.movements()), "--depth", &depth.to_string(), "--grid", &s(&d.grid), "-o", &s(&parts)]);
        layouts.push(summarize(&d.agg(), &parts, "80", &format!("d{depth}")) == base);
    }
    let layout = layouts.iter().all(|&b| b);
    outcome(
        nested && scaled && layout,
        format!(
            "kept(80)={} kept(85)={} subset={nested} x7 identical={scaled} depths 0-3 identical={layouts:?}",
            base.len(),
            k85.len()
        ),
    )
}

fn a6() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut false_neg = 0;
    let mut worst_fp = 0f64;
    let mut probes_total = 0;
    let mut roundtrip = true;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keys: BTreeSet<u64> = (0..20_000).map(|_| rng.gen_range(0..1u64 << 40)).collect();
        let mut f = BloomFilter::new(3, keys.len() as u64, 0.01).unwrap();
        for &k in &keys {
            f.insert(k);
        }
        false_neg += keys.iter().filter(|&&k| !f.contains(k)).count();
        let probes: Vec<u64> = std::iter::repeat_with(|| rng.gen_range(0..1u64 << 40))
            .filter(|k| !keys.contains(k))
            .take(20_000)
            .collect();
        probes_total += probes.len();
        let fp = probes.iter().filter(|&&k| f.contains(k)).count() as f64 / probes.len() as f64;
        worst_fp = worst_fp.max(fp);
        let path = dir.path().join(format!("f{seed}.blm"));
        f.save(&path).unwrap();
        let g = BloomFilter::load(&path).unwrap();
        roundtrip &= keys.iter().chain(&probes).all(|&k| f.contains(k) == g.contains(k)) && g.to_bytes() == f.to_bytes();
    }
    outcome(
        false_neg == 0 && worst_fp <= 0.02 && roundtrip,
        format!("seeds=10 false negatives={false_neg} worst fp rate={worst_fp:.4} (<=0.02) over {probes_total} probes round-trip={roundtrip}"),
    )
}

fn a7() -> Outcome {
    let d = a1_data();
    let grid = RefGrid::small();
    let moves = read_moves(&d.movements());
    let r = reference(&grid, &moves, 64.0, 8.0, 80.0);
    let (_, edges) = read_records(&d.agg()).unwrap();
    let cube = Cube::load(&d.snapshot).unwrap();
    let mut checked = 0;
    let mut violations = 0;
    for l in 1..=5 {
        let limit = 64.0 * grid.km(l);
        let snap = cube.edges(l).unwrap().iter().map(|e| (e.src, e.dst, e.max_km));
        let agg = edges.iter().filter(|e| e.level == l).map(|e| (e.src, e.dst, e.max_km));
        for (src, dst, dm) in snap.chain(agg) {
            checked += 1;
            // recomputed from the raw movements as well as the stored maximum
            let raw = r.edges.get(&(l, src, dst)).map_or(f64::INFINITY, |x| x.max_km);
            if dm >= limit || raw >= limit {
                violations += 1;
            }
        }
    }
    outcome(violations == 0 && checked > 0, format!("edges checked={checked} violations={violations}"))
}

fn big_snapshot(path: &Path) -> (u64, u64) {
    let config = GridConfig::north_america();
    let grid = GridHierarchy::new(config.clone()).unwrap();
    let cfg = GraphSynthConfig { nodes: 120_000, edges_per_node: 10, buckets: 365, skew: 0.8, seed: 8 };
    let (nodes, edges) = synthetic_graph(&grid, &cfg).unwrap();
    let header = SnapshotHeader {
        version: 1,
        grid: config,
        bucketing: TimeBucketing { t0: 1_356_998_400, width: 86_400 },
        provenance: Provenance {
            input_hash: "synthetic".into(),
            alpha: 64.0,
            radius_cells: vec![8.0; 10],
            threshold: 80.0,
            fp_rate: 0.01,
            edge_filter: "bloom".into(),
            built_at: 0,
        },
    };
    let counts = write_snapshot(path, &header, nodes, edges).unwrap();
    (counts.nodes(), counts.edges())
}

fn big_data() -> &'static (tempfile::TempDir, PathBuf, u64, u64) {
    static DATA: OnceLock<(tempfile::TempDir, PathBuf, u64, u64)> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.snap");
        let (n, e) = big_snapshot(&path);
        (dir, path, n, e)
    })
}

fn a8() -> Outcome {
    let (dir, snap, nodes, edges) = big_data();
    let mut stats = BTreeMap::new();
    for mode in ["population", "hotspot"] {
        let out = dir.path().join(format!("{mode}.json"));
        ok(["stress", &s(snap), "--mode", mode, "-n", "2000", "--rate", "40", "--seed", "8", "-o", &s(&out)]);
        let r = stage_report(&out);
        stats.insert(mode, (r["median_ms"].as_f64().unwrap(), r["p90_ms"].as_f64().unwrap(), r["errors"].as_u64().unwrap()));
    }
    let (pm, p90, perr) = stats["population"];
    let (hm, h90, herr) = stats["hotspot"];
    outcome(
        *nodes >= 100_000 && *edges >= 1_000_000 && pm < 100.0 && p90 < 300.0 && hm <= pm * 1.5 && perr == 0 && herr == 0,
        format!(
            "snapshot nodes={nodes} edges={edges}; population median={pm:.1}ms (<100) p90={p90:.1}ms (<300) errors={perr}; \
             hotspot median={hm:.1}ms (<= {:.1}) p90={h90:.1}ms errors={herr}",
            pm * 1.5
        ),
    )
}

fn a9() -> Outcome {
    let d = a1_data();
    let cube = Cube::load(&d.snapshot).unwrap();
    let region = cube.grid().region();
    let last = cube.max_bucket().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mismatches = 0;
    let mut nonempty = 0;
    for _ in 0..1000 {
        let level = rng.gen_range(1..=5);
        let w = rng.gen_range(0.05..region.width());
        let h = rng.gen_range(0.05..region.height());
        let lon = rng.gen_range(region.lon_min..=region.lon_max - w);
        let lat = rng.gen_range(region.lat_min..=region.lat_max - h);
        let bbox = Region::new(lon, lat, lon + w, lat + h).unwrap();
        let (from, to) = if rng.gen_bool(0.3) {
            (0, last)
        } else {
            let a = rng.gen_range(0..=last);
            (a, rng.gen_range(a..=last))
        };
        let fast = cube.query_bbox(level, &bbox, from, to, usize::MAX).unwrap();
        let scan = cube.query_scan(level, &bbox, from, to).unwrap();
        nonempty += usize::from(!fast.nodes.is_empty());
        if fast != scan {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("queries=1000 non-empty={nonempty} mismatches={mismatches}"))
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn a10() -> Outcome {
    let (_, snap, _, _) = big_data();
    let cube = Cube::load(snap).unwrap();
    let levels = cube.grid().levels();
    let region = cube.grid().region();
    let half = 20.0 * cube.grid().cell_len_deg(levels).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let finest = cube.nodes(levels).unwrap();
    let small: Vec<QuerySpec> = (0..100)
        .map(|_| {
            let n = &finest[rng.gen_range(0..finest.len())];
            QuerySpec {
                level: levels,
                bbox: [
                    (n.lon - half).max(region.lon_min),
                    (n.lat - half).max(region.lat_min),
                    (n.lon + half).min(region.lon_max),
                    (n.lat + half).min(region.lat_max),
                ],
                window: None,
            }
        })
        .collect();
    let big_estimate = cube.estimate(levels, &region).unwrap();
    drop(cube);

    let port = free_port();
    let mut server = std::process::Command::new(BIN)
        .args(["serve", &s(snap), "--port", &port.to_string()])
        .env("RUST_LOG", "warn")
        .spawn()
        .unwrap();
    let base = format!("http://127.0.0.1:{port}");
    let rt = tokio::runtime::Runtime::new().unwrap();
    let result = rt.block_on(async {
        let client = reqwest::Client::new();
        let deadline = Instant::now() + Duration::from_secs(60);
        while client.get(format!("{base}/api/meta")).send().await.map(|r| r.status().as_u16()).ok() != Some(200) {
            if Instant::now() > deadline {
                return Err("server did not come up".to_string());
            }
            tokio::time::sleep(Duration::from_millis(100)).await;
        }
        let alone = flowcube_server::stress::replay(&base, "small", &small, 20.0).await;

        let stop = Arc::new(AtomicBool::new(false));
        let big_url = flowcube_server::stress::graph_url(&base, &QuerySpec { level: levels, bbox: region.to_array(), window: None });
        let flag = stop.clone();
        let heavy = tokio::spawn(async move {
            let client = reqwest::Client::new();
            let (mut n, mut ms) = (0u32, 0f64);
            let mut status = 0;
            // keep exactly one whole-region query in flight
            while !flag.load(Ordering::Relaxed) {
                let t = Instant::now();
                if let Ok(resp) = client.get(&big_url).send().await {
                    status = resp.status().as_u16();
                    let _ = resp.bytes().await;
                }
                ms += t.elapsed().as_secs_f64() * 1e3;
                n += 1;
            }
            (n, ms / f64::from(n.max(1)), status)
        });
        tokio::time::sleep(Duration::from_millis(200)).await;
        let loaded = flowcube_server::stress::replay(&base, "small", &small, 20.0).await;
        stop.store(true, Ordering::Relaxed);
        let heavy = heavy.await.unwrap();
        Ok((alone, loaded, heavy))
    });
    let _ = server.kill();
    let _ = server.wait();
    let (alone, loaded, (big_runs, big_ms, big_status)) = match result {
        Ok(r) => r,
        Err(e) => return outcome(false, e),
    };
    let ratio = loaded.latency.median_ms / alone.latency.median_ms;
    outcome(
        ratio < 2.0 && big_status == 200 && alone.errors == 0 && loaded.errors == 0,
        format!(
            "small p50 alone={:.2}ms with whole-region query={:.2}ms ratio={ratio:.2} (<2); whole-region estimate={big_estimate} \
             runs={big_runs} avg={big_ms:.0}ms status={big_status}",
            alone.latency.median_ms, loaded.latency.median_ms
        ),
    )
}

fn main() {
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("A1", a1),
        ("A2", a2),
        ("A3", a3),
        ("A4", a4),
        ("A5", a5),
        ("A6", a6),
        ("A7", a7),
        ("A8", a8),
        ("A9", a9),
        ("A10", a10),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == name) {
            continue;
        }
        let t = Instant::now();
        let o = match std::panic::catch_unwind(run) {
            Ok(o) => o,
            Err(e) => {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
            }
        };
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("{name} {verdict} {} [{:.1}s]", o.detail, t.elapsed().as_secs_f64());
        std::io::stdout().flush().unwrap();
        if !o.pass {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        println!("failed: {}", failed.join(" "));
        std::process::exit(1);
    }
}
