use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "flowcube", version, about = "Build and serve multi-resolution origin-destination flow cubes")]
pub struct Cli {
    /// TOML or JSON file supplying defaults for any long flag; flags given
    /// on the command line win. A table named after the subcommand
    /// overrides top-level keys.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct GridArgs {
    /// Grid configuration JSON; defaults to the North America grid.
    #[arg(long, value_name = "FILE")]
    pub grid: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct ExecArgs {
    /// Parallel map and reduce workers.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Input split size in bytes.
    #[arg(long, default_value_t = 8 << 20)]
    pub split_bytes: u64,
    /// Shuffle memory budget per job in MiB before spilling.
    #[arg(long, default_value_t = 256)]
    pub shuffle_mem_mb: usize,
}

#[derive(Debug, Args, Clone)]
pub struct IngestArgs {
    /// Break trajectories at gaps longer than this many seconds.
    #[arg(long)]
    pub max_gap_seconds: Option<i64>,
    /// Fail when more than this fraction of lines is malformed.
    #[arg(long, default_value_t = 0.10)]
    pub max_malformed: f64,
}

#[derive(Debug, Args, Clone)]
pub struct PartitionArgs {
    #[arg(long, default_value_t = 4)]
    pub depth: u32,
    #[arg(long, default_value_t = 0.01)]
    pub sample_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Partitioning strategy (bisect, bisect-alternating, uniform).
    #[arg(long, default_value = "bisect")]
    pub strategy: String,
}

#[derive(Debug, Args, Clone)]
pub struct AggregateArgs {
    /// Edges at level l are kept when shorter than alpha cell lengths.
    #[arg(long, default_value_t = 64.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 86_400)]
    pub bucket_seconds: i64,
    /// Start of bucket 0, Unix seconds.
    #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
    pub t0: i64,
    /// Keep per-node distinct-user counts.
    #[arg(long)]
    pub track_users: bool,
    /// Shuffle routing (spatial, hash).
    #[arg(long, default_value = "spatial")]
    pub router: String,
}

#[derive(Debug, Args, Clone)]
pub struct SummaryArgs {
    /// Neighborhood radius in cell lengths, all levels.
    #[arg(long = "r", default_value_t = 8.0)]
    pub r: f64,
    /// Per-level radii (comma separated, level 1 first); overrides --r.
    #[arg(long, value_delimiter = ',')]
    pub radius_cells: Option<Vec<f64>>,
    /// Percentile a node must exceed to be kept.
    #[arg(long, default_value_t = 80.0)]
    pub threshold: f64,
}

#[derive(Debug, Args, Clone)]
pub struct FilterArgs {
    /// Target Bloom filter false-positive rate.
    #[arg(long = "p", default_value_t = 0.01)]
    pub p: f64,
    /// Edge filter method (bloom, exact).
    #[arg(long, default_value = "bloom")]
    pub method: String,
}

#[derive(Debug, Args, Clone)]
pub struct BuildStamp {
    /// Snapshot build time, Unix seconds; defaults to SOURCE_DATE_EPOCH or now.
    #[arg(long)]
    pub built_at: Option<i64>,
}

#[derive(Debug, Args, Clone)]
pub struct QueryGenArgs {
    /// Query pattern (population, hotspot).
    #[arg(long, default_value = "population")]
    pub mode: String,
    #[arg(short = 'n', long = "n", default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Query box edge in cell lengths of the query level.
    #[arg(long, default_value_t = 40.0)]
    pub box_cells: f64,
}

#[derive(Debug, Args, Clone)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
    #[arg(long, default_value_t = 50_000)]
    pub max_response_elems: usize,
    /// Reject queries whose size estimate exceeds this.
    #[arg(long, default_value_t = 500_000)]
    pub hard_cap: usize,
    /// Queries estimated above this run on low-priority threads.
    #[arg(long, default_value_t = 20_000)]
    pub bulk_threshold: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse raw events into movements.
    Ingest {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        ingest: IngestArgs,
    },
    /// Build a balanced partition scheme from a movement sample.
    Partition {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        partition: PartitionArgs,
    },
    /// Aggregate movements into per-level node and edge records.
    Aggregate {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        parts: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        aggregate: AggregateArgs,
        #[command(flatten)]
        exec: ExecArgs,
        /// Also write the stage report (with per-partition loads) here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Keep locally significant nodes.
    Summarize {
        input: PathBuf,
        #[arg(long)]
        parts: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        summary: SummaryArgs,
        #[command(flatten)]
        exec: ExecArgs,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Keep edges whose endpoints both survived summarization.
    FilterEdges {
        aggregate: PathBuf,
        summary: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        filter: FilterArgs,
        #[command(flatten)]
        exec: ExecArgs,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write the snapshot file.
    Pack {
        summary: PathBuf,
        edges: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        stamp: BuildStamp,
    },
    /// Print a snapshot's header and row counts.
    Inspect { snapshot: PathBuf },
    /// Run every stage from raw events to a snapshot.
    RunAll {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Intermediate outputs; defaults to `<output>.work`.
        #[arg(long)]
        work_dir: Option<PathBuf>,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        ingest: IngestArgs,
        #[command(flatten)]
        partition: PartitionArgs,
        #[command(flatten)]
        aggregate: AggregateArgs,
        #[command(flatten)]
        summary: SummaryArgs,
        #[command(flatten)]
        filter: FilterArgs,
        #[command(flatten)]
        exec: ExecArgs,
        #[command(flatten)]
        stamp: BuildStamp,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Serve a snapshot over HTTP.
    Serve {
        #[arg(value_name = "SNAPSHOT")]
        snapshot: Option<PathBuf>,
        /// Same as the positional argument. Without either, every data
        /// endpoint answers 503.
        #[arg(long = "snapshot", value_name = "FILE", conflicts_with = "snapshot")]
        snapshot_flag: Option<PathBuf>,
        #[command(flatten)]
        serve: ServeArgs,
    },
    /// Generate synthetic events.
    Synth {
        #[arg(long, default_value_t = 1000)]
        users: u64,
        #[arg(long, default_value_t = 20)]
        events_per_user: u64,
        /// Fraction of users living in dense clusters.
        #[arg(long, default_value_t = 0.8)]
        skew: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        clusters: u32,
        /// Region w,s,e,n; defaults to the grid region.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        region: Option<Vec<f64>>,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Write a stress-test query script for a snapshot.
    Querygen {
        snapshot: PathBuf,
        #[command(flatten)]
        gen: QueryGenArgs,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Replay a query script against a snapshot and report latencies.
    Stress {
        snapshot: PathBuf,
        #[command(flatten)]
        gen: QueryGenArgs,
        /// Queries per second.
        #[arg(long, default_value_t = 40.0)]
        rate: f64,
        /// Replay this script instead of generating one.
        #[arg(long)]
        script: Option<PathBuf>,
        /// Target a running server instead of an in-process one.
        #[arg(long)]
        url: Option<String>,
        #[command(flatten)]
        serve: ServeArgs,
        #[arg(short, long)]
        output: PathBuf,
    },
}
