use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use flowcube_core::aggregate::threshold_km;
use flowcube_core::cube::Cube;
use flowcube_core::pipeline::{
    read_records, run_aggregate, run_all, ExecOptions, RunAllParams, WorkLayout,
};
use flowcube_core::records::{window_sum, NodeRecord};
use flowcube_core::summarize::SummaryConfig;
use flowcube_core::synth::{generate, write_events, SynthConfig};
use flowcube_core::{GridConfig, GridHierarchy, Region};

fn small_grid() -> GridConfig {
    GridConfig {
        region: Region::new(-100.0, 30.0, -84.0, 46.0).unwrap(),
        levels: 5,
        base_cell_arcsec: 450.0,
        growth: 2,
    }
}

fn events(dir: &Path, users: u64, seed: u64) -> PathBuf {
    let cfg = SynthConfig::new(small_grid().region, users, 15, seed);
    let path = dir.join("events.csv");
    write_events(fs::File::create(&path).unwrap(), &generate(&cfg).unwrap()).unwrap();
    path
}

fn params(workers: usize) -> RunAllParams {
    let grid = small_grid();
    RunAllParams {
        summary: SummaryConfig::uniform(grid.levels, 8.0, 80.0),
        grid,
        parse: Default::default(),
        trajectory: Default::default(),
        partition: Default::default(),
        aggregate: Default::default(),
        filter: Default::default(),
        exec: ExecOptions { workers, split_bytes: 64 << 10, shuffle_mem_bytes: 1 << 20 },
        built_at: 0,
    }
}

fn dir_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_file() {
            out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap());
        }
    }
    out
}

#[test]
fn aggregate_records_hold_their_invariants() {
    let tmp = tempfile::tempdir().unwrap();
    let ev = events(tmp.path(), 300, 11);
    let work = tmp.path().join("work");
    let report = run_all(&ev, &work, &tmp.path().join("out.snap"), &params(2)).unwrap();
    let movements = report.ingest.movements;
    assert!(movements > 1000);

    let grid = GridHierarchy::new(small_grid()).unwrap();
    let (nodes, edges) = read_records(&report.layout.aggregate).unwrap();
    for level in 1..=grid.levels() {
        let level_nodes: Vec<&NodeRecord> = nodes.iter().filter(|n| n.level == level).collect();
        // every movement contributes two endpoints and one source per level
        assert_eq!(level_nodes.iter().map(|n| n.count).sum::<u64>(), 2 * movements);
        assert_eq!(level_nodes.iter().map(|n| n.source_count).sum::<u64>(), movements);
        let limit = threshold_km(level, &grid, 64.0).unwrap();
        for e in edges.iter().filter(|e| e.level == level) {
            assert!(e.max_km < limit);
            assert_eq!(window_sum(&e.tbuckets, 0, u64::MAX), e.count);
        }
    }
    for n in &nodes {
        assert!(n.count >= 1);
        assert_eq!(window_sum(&n.tbuckets, 0, u64::MAX), n.count);
        let (_, bounds) = grid.cell_centroid_bounds(n.cell_id()).unwrap();
        assert!(bounds.contains(n.centroid()), "centroid of {}/{} outside its cell", n.level, n.cell);
    }
}

#[test]
fn snapshot_matches_stage_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let ev = events(tmp.path(), 300, 12);
    let snap = tmp.path().join("out.snap");
    let report = run_all(&ev, &tmp.path().join("work"), &snap, &params(1)).unwrap();

    let (summary, _) = read_records(&report.layout.summary).unwrap();
    let (_, filtered) = read_records(&report.layout.edges).unwrap();
    let kept: HashSet<(u32, u64)> = summary.iter().map(|n| (n.level, n.cell)).collect();
    let exact = filtered
        .iter()
        .filter(|e| kept.contains(&(e.level, e.src)) && kept.contains(&(e.level, e.dst)))
        .count();

    let cube = Cube::load(&snap).unwrap();
    let counts = cube.counts();
    assert_eq!(counts.nodes(), summary.len() as u64);
    assert_eq!(counts.edges(), exact as u64);
    assert_eq!(report.pack.pruned_edges, (filtered.len() - exact) as u64);
    for n in &summary {
        assert_eq!(cube.node_detail(n.level, n.cell).unwrap(), n);
    }
}

#[test]
fn outputs_do_not_depend_on_worker_count() {
    let tmp = tempfile::tempdir().unwrap();
    let ev = events(tmp.path(), 200, 13);
    let mut runs = Vec::new();
    for workers in [1, 3] {
        let work = tmp.path().join(format!("w{workers}"));
        let snap = tmp.path().join(format!("w{workers}.snap"));
        run_all(&ev, &work, &snap, &params(workers)).unwrap();
        let layout = WorkLayout::under(&work);
        runs.push((
            dir_files(&layout.aggregate),
            dir_files(&layout.summary),
            dir_files(&layout.edges),
            fs::read(&snap).unwrap(),
        ));
    }
    assert!(runs[0] == runs[1]);
}

#[test]
fn hash_routing_gives_the_same_records() {
    let tmp = tempfile::tempdir().unwrap();
    let ev = events(tmp.path(), 150, 14);
    let work = tmp.path().join("work");
    let report = run_all(&ev, &work, &tmp.path().join("out.snap"), &params(1)).unwrap();
    let scheme = flowcube_core::partition::PartitionScheme::load(&report.layout.parts).unwrap();
    let mut p = params(1).aggregate;
    p.router = "hash".into();
    let out = tmp.path().join("agg-hash");
    run_aggregate(
        std::slice::from_ref(&report.layout.movements),
        &scheme,
        &small_grid(),
        &p,
        &params(1).exec,
        &out,
    )
    .unwrap();
    let sorted = |dir: &Path| {
        let (mut n, mut e) = read_records(dir).unwrap();
        n.sort_by_key(|n| (n.level, n.cell));
        e.sort_by_key(|e| (e.level, e.src, e.dst));
        (n, e)
    };
    assert_eq!(sorted(&report.layout.aggregate), sorted(&out));
}

#[test]
fn stricter_threshold_keeps_a_subset() {
    let tmp = tempfile::tempdir().unwrap();
    let ev = events(tmp.path(), 300, 15);
    let mut kept = Vec::new();
    for threshold in [60.0, 80.0, 95.0] {
        let mut p = params(1);
        p.summary.threshold = threshold;
        let work = tmp.path().join(format!("t{threshold}"));
        let report = run_all(&ev, &work, &tmp.path().join(format!("t{threshold}.snap")), &p).unwrap();
        let (nodes, _) = read_records(&report.layout.summary).unwrap();
        kept.push(nodes.into_iter().map(|n| (n.level, n.cell)).collect::<HashSet<_>>());
    }
    assert!(kept[1].is_subset(&kept[0]));
    assert!(kept[2].is_subset(&kept[1]));
    assert!(kept[2].len() < kept[0].len());
}

#[test]
fn rerun_into_same_work_dir_is_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let ev = events(tmp.path(), 100, 16);
    let work = tmp.path().join("work");
    let snap = tmp.path().join("out.snap");
    run_all(&ev, &work, &snap, &params(1)).unwrap();
    let first = fs::read(&snap).unwrap();
    run_all(&ev, &work, &snap, &params(1)).unwrap();
    assert_eq!(first, fs::read(&snap).unwrap());
}
