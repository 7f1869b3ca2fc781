use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use flowcube_core::aggregate::{AggregateConfig, TimeBucketing};
use flowcube_core::cube::Cube;
use flowcube_core::ingest::{ParseOptions, TrajectoryOptions};
use flowcube_core::mr::LoadStats;
use flowcube_core::partition::PartitionScheme;
use flowcube_core::pipeline::{self, AggregateParams, ExecOptions, FilterParams, PartitionParams, RunAllParams, StageReport};
use flowcube_core::querygen::{density_from_nodes, read_script, stress_gen, write_script, GenContext, QuerySpec, QUERY_PATTERNS};
use flowcube_core::summarize::SummaryConfig;
use flowcube_core::synth::{generate, write_events, SynthConfig};
use flowcube_core::{GridConfig, Region};
use flowcube_server::stress::replay;
use flowcube_server::{AppState, ServiceConfig};
use serde::Serialize;

use crate::args::*;

/// Usage problems detected after parsing (exit code 1).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

fn grid_config(g: &GridArgs) -> Result<GridConfig> {
    match &g.grid {
        Some(p) => Ok(GridConfig::load(p)?),
        None => Ok(GridConfig::north_america()),
    }
}

fn exec_options(e: &ExecArgs) -> Result<ExecOptions> {
    let mut opts = ExecOptions::default();
    if let Some(w) = e.workers {
        if w == 0 {
            return usage("--workers must be at least 1");
        }
        opts.workers = w;
    }
    if e.split_bytes == 0 || e.shuffle_mem_mb == 0 {
        return usage("--split-bytes and --shuffle-mem-mb must be positive");
    }
    opts.split_bytes = e.split_bytes;
    opts.shuffle_mem_bytes = e.shuffle_mem_mb << 20;
    Ok(opts)
}

fn partition_params(p: &PartitionArgs) -> PartitionParams {
    PartitionParams { depth: p.depth, sample_rate: p.sample_rate, seed: p.seed, strategy: p.strategy.clone() }
}

fn aggregate_params(a: &AggregateArgs) -> Result<AggregateParams> {
    Ok(AggregateParams {
        config: AggregateConfig {
            alpha: a.alpha,
            bucketing: TimeBucketing::new(a.t0, a.bucket_seconds)?,
            track_users: a.track_users,
        },
        router: a.router.clone(),
    })
}

fn summary_config(s: &SummaryArgs, levels: u32) -> SummaryConfig {
    match &s.radius_cells {
        Some(r) => SummaryConfig { radius_cells: r.clone(), threshold: s.threshold },
        None => SummaryConfig::uniform(levels, s.r, s.threshold),
    }
}

fn filter_params(f: &FilterArgs) -> FilterParams {
    FilterParams { fp_rate: f.p, method: f.method.clone() }
}

fn built_at(stamp: &BuildStamp) -> Result<i64> {
    if let Some(t) = stamp.built_at {
        return Ok(t);
    }
    if let Ok(s) = std::env::var("SOURCE_DATE_EPOCH") {
        return s.trim().parse().map_err(|_| UsageError(format!("SOURCE_DATE_EPOCH `{s}` is not an integer")).into());
    }
    Ok(std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH)?.as_secs() as i64)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct StageSummary<'a> {
    stage: &'a str,
    wall_ms: f64,
    input_records: u64,
    map_output: u64,
    output_records: u64,
    spilled_runs: u64,
    load: LoadStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    dropped: Option<u64>,
}

fn stage_summary(r: &StageReport) -> StageSummary<'_> {
    StageSummary {
        stage: &r.stage,
        wall_ms: r.wall_ms,
        input_records: r.job.input_records,
        map_output: r.job.total_map_output(),
        output_records: r.job.reduce_output.iter().sum(),
        spilled_runs: r.job.spilled_runs,
        load: r.job.load(),
        dropped: r.dropped,
    }
}

fn report_stage(r: &StageReport, per_partition: bool, file: Option<&PathBuf>) -> Result<()> {
    if per_partition {
        eprintln!("partition  map_output  reduce_output");
        for (i, (m, o)) in r.job.map_output.iter().zip(&r.job.reduce_output).enumerate() {
            eprintln!("{i:>9}  {m:>10}  {o:>13}");
        }
    }
    print_json(&stage_summary(r))?;
    if let Some(p) = file {
        write_json(p, r)?;
    }
    Ok(())
}

fn load_cube(path: &Path) -> Result<Cube> {
    Ok(Cube::load(path)?)
}

/// Density from the finest level that has nodes.
fn cube_density(cube: &Cube) -> Result<flowcube_core::querygen::DensitySample> {
    for level in (1..=cube.grid().levels()).rev() {
        let nodes = cube.nodes(level)?;
        if !nodes.is_empty() {
            return Ok(density_from_nodes(nodes));
        }
    }
    Err(flowcube_core::Error::EmptyInput("snapshot has no nodes".into()).into())
}

fn gen_queries(cube: &Cube, g: &QueryGenArgs) -> Result<Vec<QuerySpec>> {
    let pattern = QUERY_PATTERNS.create(&g.mode, &())?;
    let sample = cube_density(cube)?;
    let ctx = GenContext { grid: cube.grid(), sample: &sample, box_cells: g.box_cells };
    let script = stress_gen(pattern.as_ref(), &ctx, g.n, g.seed)?;
    if let Some(r) = script.subregion {
        log::info!("{} queries confined to {:?}", g.mode, r.to_array());
    }
    Ok(script.queries)
}

fn service_config(s: &ServeArgs) -> ServiceConfig {
    ServiceConfig {
        max_elements: s.max_response_elems,
        hard_cap: s.hard_cap,
        bulk_threshold: s.bulk_threshold,
        ..ServiceConfig::default()
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest { input, output, grid, ingest } => {
            let grid = grid_config(&grid)?;
            let report = pipeline::run_ingest(
                &input,
                &output,
                &grid,
                &ParseOptions { max_malformed_fraction: ingest.max_malformed },
                &TrajectoryOptions { max_gap_seconds: ingest.max_gap_seconds },
            )?;
            print_json(&report)
        }
        Command::Partition { input, output, grid, partition } => {
            let grid = grid_config(&grid)?;
            let scheme = pipeline::run_partition(&input, &grid, &partition_params(&partition))?;
            scheme.save(&output)?;
            let load = LoadStats::of(&scheme.counts);
            eprintln!(
                "{} partitions from {} sampled points; per-partition sample avg {:.1} std {:.1} min {} max {}",
                scheme.len(),
                scheme.sample_size,
                load.avg,
                load.std,
                load.min,
                load.max
            );
            Ok(())
        }
        Command::Aggregate { inputs, parts, output, grid, aggregate, exec, report } => {
            let grid = grid_config(&grid)?;
            let scheme = PartitionScheme::load(&parts)?;
            let r = pipeline::run_aggregate(&inputs, &scheme, &grid, &aggregate_params(&aggregate)?, &exec_options(&exec)?, &output)?;
            report_stage(&r, true, report.as_ref())
        }
        Command::Summarize { input, parts, output, summary, exec, report } => {
            let scheme = PartitionScheme::load(&parts)?;
            let meta = pipeline::StageMeta::load(&input)?;
            let cfg = summary_config(&summary, meta.grid.levels);
            let r = pipeline::run_summarize(&input, &scheme, &cfg, &exec_options(&exec)?, &output)?;
            report_stage(&r, false, report.as_ref())
        }
        Command::FilterEdges { aggregate, summary, output, filter, exec, report } => {
            let r = pipeline::run_filter(&aggregate, &summary, &filter_params(&filter), &exec_options(&exec)?, &output)?;
            report_stage(&r, false, report.as_ref())
        }
        Command::Pack { summary, edges, output, stamp } => {
            let r = pipeline::run_pack(&summary, &edges, &output, built_at(&stamp)?)?;
            print_json(&r)
        }
        Command::Inspect { snapshot } => {
            let cube = load_cube(&snapshot)?;
            #[derive(Serialize)]
            struct Inspect<'a> {
                header: &'a flowcube_core::cube::SnapshotHeader,
                levels: Vec<LevelRow>,
                nodes: u64,
                edges: u64,
                max_bucket: Option<u64>,
            }
            #[derive(Serialize)]
            struct LevelRow {
                level: u32,
                cell_len_deg: f64,
                nodes: u64,
                edges: u64,
            }
            let counts = cube.counts();
            let levels = counts
                .per_level
                .iter()
                .enumerate()
                .map(|(i, &(n, e))| {
                    let level = i as u32 + 1;
                    Ok(LevelRow { level, cell_len_deg: cube.grid().cell_len_deg(level)?, nodes: n, edges: e })
                })
                .collect::<flowcube_core::Result<_>>()?;
            print_json(&Inspect {
                header: cube.header(),
                levels,
                nodes: counts.nodes(),
                edges: counts.edges(),
                max_bucket: cube.max_bucket(),
            })
        }
        Command::RunAll {
            input,
            output,
            work_dir,
            grid,
            ingest,
            partition,
            aggregate,
            summary,
            filter,
            exec,
            stamp,
            report,
        } => {
            let grid = grid_config(&grid)?;
            let params = RunAllParams {
                summary: summary_config(&summary, grid.levels),
                grid,
                parse: ParseOptions { max_malformed_fraction: ingest.max_malformed },
                trajectory: TrajectoryOptions { max_gap_seconds: ingest.max_gap_seconds },
                partition: partition_params(&partition),
                aggregate: aggregate_params(&aggregate)?,
                filter: filter_params(&filter),
                exec: exec_options(&exec)?,
                built_at: built_at(&stamp)?,
            };
            let work = work_dir.unwrap_or_else(|| {
                let mut s = output.clone().into_os_string();
                s.push(".work");
                PathBuf::from(s)
            });
            let r = pipeline::run_all(&input, &work, &output, &params)?;
            eprintln!("stage          wall_ms");
            for t in &r.timings {
                eprintln!("{:<13} {:>8.1}", t.stage, t.wall_ms);
            }
            eprintln!("{:<13} {:>8.1}", "total", r.timings.iter().map(|t| t.wall_ms).sum::<f64>());
            #[derive(Serialize)]
            struct Summary<'a> {
                ingest: &'a pipeline::IngestReport,
                stages: Vec<StageSummary<'a>>,
                nodes: u64,
                edges: u64,
                pruned_edges: u64,
                timings: &'a [pipeline::StageTiming],
            }
            print_json(&Summary {
                ingest: &r.ingest,
                stages: r.stages.iter().map(stage_summary).collect(),
                nodes: r.pack.counts.nodes(),
                edges: r.pack.counts.edges(),
                pruned_edges: r.pack.pruned_edges,
                timings: &r.timings,
            })?;
            if let Some(p) = report {
                write_json(&p, &r)?;
            }
            Ok(())
        }
        Command::Serve { snapshot, snapshot_flag, serve } => {
            let state = Arc::new(AppState::new(service_config(&serve)));
            let snapshot = snapshot.or(snapshot_flag);
            match &snapshot {
                Some(path) => state.load(path)?,
                None => log::warn!("no snapshot given; data endpoints will answer 503"),
            }
            let ip: std::net::IpAddr = match serve.bind.parse() {
                Ok(ip) => ip,
                Err(_) => return usage(format!("--bind `{}` is not an IP address", serve.bind)),
            };
            runtime()?.block_on(async move {
                let listener = tokio::net::TcpListener::bind(SocketAddr::new(ip, serve.port)).await?;
                log::info!("listening on http://{}", listener.local_addr()?);
                flowcube_server::serve(listener, state, async {
                    let _ = tokio::signal::ctrl_c().await;
                })
                .await?;
                Ok(())
            })
        }
        Command::Synth { users, events_per_user, skew, seed, clusters, region, grid, output } => {
            let region = match region {
                Some(r) if r.len() == 4 => Region::new(r[0], r[1], r[2], r[3])?,
                Some(_) => return usage("--region needs four values w,s,e,n"),
                None => grid_config(&grid)?.region,
            };
            let mut cfg = SynthConfig::new(region, users, events_per_user, seed);
            cfg.skew = skew;
            cfg.clusters = clusters;
            let events = generate(&cfg)?;
            let out = BufWriter::new(File::create(&output).with_context(|| format!("creating {}", output.display()))?);
            write_events(out, &events)?;
            eprintln!("{} events written to {}", events.len(), output.display());
            Ok(())
        }
        Command::Querygen { snapshot, gen, output } => {
            let cube = load_cube(&snapshot)?;
            let queries = gen_queries(&cube, &gen)?;
            let mut out = BufWriter::new(File::create(&output).with_context(|| format!("creating {}", output.display()))?);
            write_script(&mut out, &queries)?;
            out.flush()?;
            Ok(())
        }
        Command::Stress { snapshot, gen, rate, script, url, serve, output } => {
            if !(rate > 0.0) {
                return usage("--rate must be positive");
            }
            let cube = load_cube(&snapshot)?;
            let queries = match &script {
                Some(p) => read_script(BufReader::new(File::open(p).with_context(|| format!("opening {}", p.display()))?))?,
                None => gen_queries(&cube, &gen)?,
            };
            let report = runtime()?.block_on(async {
                match url {
                    Some(base) => {
                        drop(cube);
                        Ok::<_, anyhow::Error>(replay(base.trim_end_matches('/'), &gen.mode, &queries, rate).await)
                    }
                    None => {
                        let state = Arc::new(AppState::new(service_config(&serve)));
                        state.swap(cube);
                        let (addr, stop, handle) =
                            flowcube_server::spawn(SocketAddr::from(([127, 0, 0, 1], 0)), state).await?;
                        let report = replay(&format!("http://{addr}"), &gen.mode, &queries, rate).await;
                        let _ = stop.send(());
                        let _ = handle.await;
                        Ok(report)
                    }
                }
            })?;
            write_json(&output, &report)?;
            print_json(&serde_json::json!({
                "pattern": report.pattern,
                "rate_qps": report.rate_qps,
                "count": report.latency.count,
                "avg_ms": report.latency.avg_ms,
                "median_ms": report.latency.median_ms,
                "p90_ms": report.latency.p90_ms,
                "max_ms": report.latency.max_ms,
                "errors": report.errors,
            }))
        }
    }
}
