//! Stage drivers shared by the command line and tests.
//!
//! Every directory-producing stage writes `_meta.json` next to its part
//! files; downstream stages read it to recover the grid and settings, and
//! `pack` turns the final one into the snapshot header.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::Xxh3;

use crate::aggregate::{AggregateConfig, AggregateJob, TimeBucketing};
use crate::cube::{write_snapshot, Provenance, SnapshotCounts, SnapshotHeader};
use crate::error::{Error, IoContext, Result};
use crate::filter::{FilterInputs, FilterJob, EDGE_FILTERS};
use crate::ingest::{build_movements, parse_events, parse_movement_line, write_movements, ParseOptions, TrajectoryOptions};
use crate::model::{CellId, GridConfig, GridHierarchy};
use crate::mr::{part_files, plan_splits, run_job, JobReport, JobSpec, DEFAULT_SHUFFLE_MEM_MB, DEFAULT_SPLIT_BYTES};
use crate::partition::{recursive_bisect, sample_points, PartitionScheme, PARTITION_STRATEGIES};
use crate::records::{EdgeRecord, NodeRecord, Record};
use crate::routing::{CellRouter, HashRouter, RoutingContext, CELL_ROUTERS};
use crate::summarize::{SummarizeJob, SummaryConfig};

pub const META_FILE: &str = "_meta.json";
pub const FILTER_DIR: &str = "filters";

/// Provenance carried from stage to stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMeta {
    pub stage: String,
    pub grid: GridConfig,
    pub bucketing: TimeBucketing,
    pub alpha: f64,
    pub track_users: bool,
    pub input_hash: String,
    pub partitions: usize,
    pub router: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius_cells: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fp_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_filter: Option<String>,
}

impl StageMeta {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(META_FILE);
        let text = fs::read_to_string(&path).ctx(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| Error::Format { path, reason: e.to_string() })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(META_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").ctx(|| format!("writing {}", path.display()))
    }

    fn expect_stage(self, dir: &Path, stage: &str) -> Result<Self> {
        if self.stage != stage {
            return Err(Error::Format {
                path: dir.join(META_FILE),
                reason: format!("expected output of `{stage}`, found `{}`", self.stage),
            });
        }
        Ok(self)
    }
}

/// xxh3-64 over the concatenated file contents, as 16 hex digits.
pub fn hash_files(paths: &[PathBuf]) -> Result<String> {
    let mut h = Xxh3::new();
    let mut buf = vec![0u8; 1 << 16];
    for p in paths {
        let mut f = File::open(p).ctx(|| format!("opening {}", p.display()))?;
        loop {
            let n = f.read(&mut buf).ctx(|| format!("reading {}", p.display()))?;
            if n == 0 {
                break;
            }
            h.update(&buf[..n]);
        }
    }
    Ok(format!("{:016x}", h.digest()))
}

/// Execution knobs that never change stage output.
#[derive(Debug, Clone, Copy)]
pub struct ExecOptions {
    pub workers: usize,
    pub split_bytes: u64,
    pub shuffle_mem_bytes: usize,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions {
            workers: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            split_bytes: DEFAULT_SPLIT_BYTES,
            shuffle_mem_bytes: DEFAULT_SHUFFLE_MEM_MB << 20,
        }
    }
}

impl ExecOptions {
    fn spec(&self, inputs: &[PathBuf], partitions: usize, out: &Path) -> Result<JobSpec> {
        Ok(JobSpec::new(plan_splits(inputs, self.split_bytes)?, partitions, out)
            .workers(self.workers.max(1))
            .shuffle_mem_bytes(self.shuffle_mem_bytes))
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub lines: u64,
    pub malformed: u64,
    pub users: u64,
    pub out_of_region: u64,
    pub collapsed_stationary: u64,
    pub gap_breaks: u64,
    pub movements: u64,
}

pub fn run_ingest(
    events: &Path,
    out: &Path,
    grid: &GridConfig,
    parse: &ParseOptions,
    traj: &TrajectoryOptions,
) -> Result<IngestReport> {
    let file = File::open(events).ctx(|| format!("opening {}", events.display()))?;
    let (events, pstats) = parse_events(BufReader::new(file), parse)?;
    let (movements, tstats) = build_movements(&events, &grid.region, traj);
    let w = BufWriter::new(File::create(out).ctx(|| format!("creating {}", out.display()))?);
    write_movements(w, &movements)?;
    Ok(IngestReport {
        lines: pstats.lines,
        malformed: pstats.malformed,
        users: tstats.users,
        out_of_region: tstats.dropped_out_of_region,
        collapsed_stationary: tstats.collapsed_stationary,
        gap_breaks: tstats.gap_breaks,
        movements: movements.len() as u64,
    })
}

#[derive(Debug, Clone)]
pub struct PartitionParams {
    pub depth: u32,
    pub sample_rate: f64,
    pub seed: u64,
    pub strategy: String,
}

impl Default for PartitionParams {
    fn default() -> Self {
        PartitionParams {
            depth: 4,
            sample_rate: crate::partition::DEFAULT_SAMPLE_RATE,
            seed: 0,
            strategy: PARTITION_STRATEGIES.default_name().to_string(),
        }
    }
}

/// Stream a movement file through `f`.
pub fn for_each_movement(path: &Path, mut f: impl FnMut(crate::model::MovementRecord)) -> Result<()> {
    let file = File::open(path).ctx(|| format!("opening {}", path.display()))?;
    for line in BufReader::with_capacity(1 << 16, file).lines() {
        if let Some(m) = parse_movement_line(&line.ctx(|| format!("reading {}", path.display()))?)? {
            f(m);
        }
    }
    Ok(())
}

pub fn run_partition(movements: &Path, grid: &GridConfig, params: &PartitionParams) -> Result<PartitionScheme> {
    let strategy = PARTITION_STRATEGIES.create(&params.strategy, &())?;
    let file = File::open(movements).ctx(|| format!("opening {}", movements.display()))?;
    let mut failure = None;
    let stream = BufReader::with_capacity(1 << 16, file).lines().map_while(|line| {
        let parsed = line
            .ctx(|| format!("reading {}", movements.display()))
            .and_then(|l| parse_movement_line(&l));
        match parsed {
            Ok(m) => Some(m),
            Err(e) => {
                failure = Some(e);
                None
            }
        }
    });
    let sample = sample_points(stream.flatten(), params.sample_rate, params.seed);
    if let Some(e) = failure {
        return Err(e);
    }
    let sample = sample?;
    let mut scheme = recursive_bisect(grid.region, &sample, params.depth, strategy.as_ref())?;
    scheme.seed = params.seed;
    scheme.sample_rate = params.sample_rate;
    Ok(scheme)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub wall_ms: f64,
    pub job: JobReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropped: Option<u64>,
}

fn prepare_out_dir(out: &Path) -> Result<()> {
    if out.exists() {
        for entry in fs::read_dir(out).ctx(|| format!("listing {}", out.display()))? {
            let path = entry.ctx(|| format!("listing {}", out.display()))?.path();
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            if name.starts_with("part-") || name == META_FILE {
                fs::remove_file(&path).ctx(|| format!("removing stale {}", path.display()))?;
            } else if name == FILTER_DIR {
                fs::remove_dir_all(&path).ctx(|| format!("removing stale {}", path.display()))?;
            }
        }
    }
    fs::create_dir_all(out).ctx(|| format!("creating {}", out.display()))
}

fn routing(grid: &Arc<GridHierarchy>, scheme: &PartitionScheme, router: &str) -> Result<Arc<dyn CellRouter>> {
    let ctx = RoutingContext { grid: grid.clone(), index: Arc::new(scheme.index()) };
    Ok(Arc::from(CELL_ROUTERS.create(router, &ctx)?))
}

fn check_scheme(scheme: &PartitionScheme, grid: &GridConfig) -> Result<()> {
    if scheme.region != grid.region {
        return Err(Error::InvalidArgument(format!(
            "partition region {:?} differs from grid region {:?}",
            scheme.region.to_array(),
            grid.region.to_array()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AggregateParams {
    pub config: AggregateConfig,
    pub router: String,
}

impl Default for AggregateParams {
    fn default() -> Self {
        AggregateParams {
            config: AggregateConfig::default(),
            router: CELL_ROUTERS.default_name().to_string(),
        }
    }
}

pub fn run_aggregate(
    movements: &[PathBuf],
    scheme: &PartitionScheme,
    grid_config: &GridConfig,
    params: &AggregateParams,
    exec: &ExecOptions,
    out: &Path,
) -> Result<StageReport> {
    let started = Instant::now();
    check_scheme(scheme, grid_config)?;
    let grid = Arc::new(GridHierarchy::new(grid_config.clone())?);
    let router = routing(&grid, scheme, &params.router)?;
    let job = AggregateJob::new(grid, router, params.config)?;
    prepare_out_dir(out)?;
    let report = run_job(&job, &exec.spec(movements, scheme.len(), out)?)?;
    StageMeta {
        stage: "aggregate".into(),
        grid: grid_config.clone(),
        bucketing: params.config.bucketing,
        alpha: params.config.alpha,
        track_users: params.config.track_users,
        input_hash: hash_files(movements)?,
        partitions: scheme.len(),
        router: params.router.clone(),
        radius_cells: None,
        threshold: None,
        fp_rate: None,
        edge_filter: None,
    }
    .save(out)?;
    Ok(StageReport {
        stage: "aggregate".into(),
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
        job: report,
        dropped: Some(job.counters.dropped.load(Ordering::Relaxed)),
    })
}

pub fn run_summarize(
    agg_dir: &Path,
    scheme: &PartitionScheme,
    config: &SummaryConfig,
    exec: &ExecOptions,
    out: &Path,
) -> Result<StageReport> {
    let started = Instant::now();
    let meta = StageMeta::load(agg_dir)?.expect_stage(agg_dir, "aggregate")?;
    check_scheme(scheme, &meta.grid)?;
    let grid = GridHierarchy::new(meta.grid.clone())?;
    let job = SummarizeJob::new(&grid, Arc::new(scheme.index()), config.clone())?;
    prepare_out_dir(out)?;
    let report = run_job(&job, &exec.spec(&part_files(agg_dir)?, scheme.len(), out)?)?;
    StageMeta {
        stage: "summarize".into(),
        radius_cells: Some(config.radius_cells.clone()),
        threshold: Some(config.threshold),
        ..meta
    }
    .save(out)?;
    Ok(StageReport {
        stage: "summarize".into(),
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
        job: report,
        dropped: None,
    })
}

/// Read every graph record under a stage directory.
pub fn read_records(dir: &Path) -> Result<(Vec<NodeRecord>, Vec<EdgeRecord>)> {
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    for path in part_files(dir)? {
        let file = File::open(&path).ctx(|| format!("opening {}", path.display()))?;
        for line in BufReader::new(file).lines() {
            let line = line.ctx(|| format!("reading {}", path.display()))?;
            if line.is_empty() {
                continue;
            }
            match Record::parse(&line)? {
                Record::Node(n) => nodes.push(n),
                Record::Edge(e) => edges.push(e),
            }
        }
    }
    Ok((nodes, edges))
}

#[derive(Debug, Clone)]
pub struct FilterParams {
    pub fp_rate: f64,
    pub method: String,
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams {
            fp_rate: crate::filter::DEFAULT_FP_RATE,
            method: EDGE_FILTERS.default_name().to_string(),
        }
    }
}

pub fn run_filter(
    agg_dir: &Path,
    summary_dir: &Path,
    params: &FilterParams,
    exec: &ExecOptions,
    out: &Path,
) -> Result<StageReport> {
    let started = Instant::now();
    let agg_meta = StageMeta::load(agg_dir)?.expect_stage(agg_dir, "aggregate")?;
    let meta = StageMeta::load(summary_dir)?.expect_stage(summary_dir, "summarize")?;
    if agg_meta.input_hash != meta.input_hash || agg_meta.grid != meta.grid {
        return Err(Error::InvalidArgument(format!(
            "{} and {} come from different aggregations",
            agg_dir.display(),
            summary_dir.display()
        )));
    }
    let (summary, _) = read_records(summary_dir)?;
    let keys: Vec<CellId> = summary.iter().map(NodeRecord::cell_id).collect();
    let grid = Arc::new(GridHierarchy::new(meta.grid.clone())?);
    prepare_out_dir(out)?;
    let filter_dir = out.join(FILTER_DIR);
    let method = EDGE_FILTERS.create(&params.method, &())?;
    let membership = method.prepare(&FilterInputs {
        summary: &keys,
        levels: grid.levels(),
        fp_rate: params.fp_rate,
        side_dir: Some(&filter_dir),
    })?;
    // no partition file at this stage; spread by hash over the same count
    let partitions = meta.partitions;
    let router: Arc<dyn CellRouter> = Arc::new(HashRouter::new(partitions));
    let job = FilterJob::new(membership, router);
    let report = run_job(&job, &exec.spec(&part_files(agg_dir)?, partitions, out)?)?;
    StageMeta {
        stage: "filter-edges".into(),
        fp_rate: Some(params.fp_rate),
        edge_filter: Some(params.method.clone()),
        ..meta
    }
    .save(out)?;
    Ok(StageReport {
        stage: "filter-edges".into(),
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
        job: report,
        dropped: None,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PackReport {
    pub counts: SnapshotCounts,
    /// Bloom false-positive edges dropped because an endpoint is not a
    /// summary node.
    pub pruned_edges: u64,
    pub wall_ms: f64,
}

pub fn run_pack(summary_dir: &Path, edges_dir: &Path, out: &Path, built_at: i64) -> Result<PackReport> {
    let started = Instant::now();
    let meta = StageMeta::load(edges_dir)?.expect_stage(edges_dir, "filter-edges")?;
    let summary_meta = StageMeta::load(summary_dir)?.expect_stage(summary_dir, "summarize")?;
    if summary_meta.input_hash != meta.input_hash || summary_meta.radius_cells != meta.radius_cells {
        return Err(Error::InvalidArgument(format!(
            "{} and {} come from different runs",
            summary_dir.display(),
            edges_dir.display()
        )));
    }
    let (nodes, _) = read_records(summary_dir)?;
    let (_, edges) = read_records(edges_dir)?;
    let keys: HashSet<CellId> = nodes.iter().map(NodeRecord::cell_id).collect();
    let total = edges.len();
    let edges: Vec<EdgeRecord> = edges
        .into_iter()
        .filter(|e| keys.contains(&CellId::new(e.level, e.src)) && keys.contains(&CellId::new(e.level, e.dst)))
        .collect();
    let pruned_edges = (total - edges.len()) as u64;
    let header = SnapshotHeader {
        version: 1,
        grid: meta.grid,
        bucketing: meta.bucketing,
        provenance: Provenance {
            input_hash: meta.input_hash,
            alpha: meta.alpha,
            radius_cells: meta.radius_cells.unwrap_or_default(),
            threshold: meta.threshold.unwrap_or_default(),
            fp_rate: meta.fp_rate.unwrap_or_default(),
            edge_filter: meta.edge_filter.unwrap_or_default(),
            built_at,
        },
    };
    let counts = write_snapshot(out, &header, nodes, edges)?;
    Ok(PackReport { counts, pruned_edges, wall_ms: started.elapsed().as_secs_f64() * 1e3 })
}

#[derive(Debug, Clone)]
pub struct RunAllParams {
    pub grid: GridConfig,
    pub parse: ParseOptions,
    pub trajectory: TrajectoryOptions,
    pub partition: PartitionParams,
    pub aggregate: AggregateParams,
    pub summary: SummaryConfig,
    pub filter: FilterParams,
    pub exec: ExecOptions,
    pub built_at: i64,
}

/// Paths of the intermediate outputs under a work directory.
#[derive(Debug, Clone, Serialize)]
pub struct WorkLayout {
    pub movements: PathBuf,
    pub parts: PathBuf,
    pub aggregate: PathBuf,
    pub summary: PathBuf,
    pub edges: PathBuf,
}

impl WorkLayout {
    pub fn under(dir: &Path) -> Self {
        WorkLayout {
            movements: dir.join("movements.csv"),
            parts: dir.join("parts.json"),
            aggregate: dir.join("agg"),
            summary: dir.join("summary"),
            edges: dir.join("edges"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunAllReport {
    pub layout: WorkLayout,
    pub ingest: IngestReport,
    pub partition_counts: Vec<u64>,
    pub stages: Vec<StageReport>,
    pub pack: PackReport,
    pub timings: Vec<StageTiming>,
}

pub fn run_all(events: &Path, work_dir: &Path, out: &Path, p: &RunAllParams) -> Result<RunAllReport> {
    let layout = WorkLayout::under(work_dir);
    fs::create_dir_all(work_dir).ctx(|| format!("creating {}", work_dir.display()))?;
    let mut timings = Vec::new();
    let mut timed = |stage: &str, started: Instant| {
        timings.push(StageTiming { stage: stage.into(), wall_ms: started.elapsed().as_secs_f64() * 1e3 })
    };

    let t = Instant::now();
    let ingest = run_ingest(events, &layout.movements, &p.grid, &p.parse, &p.trajectory)?;
    timed("ingest", t);
    let t = Instant::now();
    let scheme = run_partition(&layout.movements, &p.grid, &p.partition)?;
    scheme.save(&layout.parts)?;
    timed("partition", t);
    let agg = run_aggregate(
        std::slice::from_ref(&layout.movements),
        &scheme,
        &p.grid,
        &p.aggregate,
        &p.exec,
        &layout.aggregate,
    )?;
    let sum = run_summarize(&layout.aggregate, &scheme, &p.summary, &p.exec, &layout.summary)?;
    let filt = run_filter(&layout.aggregate, &layout.summary, &p.filter, &p.exec, &layout.edges)?;
    let pack = run_pack(&layout.summary, &layout.edges, out, p.built_at)?;
    for r in [&agg, &sum, &filt] {
        timings.push(StageTiming { stage: r.stage.clone(), wall_ms: r.wall_ms });
    }
    timings.push(StageTiming { stage: "pack".into(), wall_ms: pack.wall_ms });
    Ok(RunAllReport {
        layout,
        ingest,
        partition_counts: scheme.counts,
        stages: vec![agg, sum, filt],
        pack,
        timings,
    })
}
