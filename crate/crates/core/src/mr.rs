//! Embedded map-shuffle-reduce executor.
//!
//! Mappers run over byte-range splits of newline-delimited input files, in
//! parallel on `workers` threads. Emissions are routed by the job's
//! partition function, sorted per partition by encoded key then encoded
//! value, spilled to disk when the shuffle memory budget is exceeded, and
//! merged for the reducers. Output is one `part-NNNNN` file per partition
//! and is byte-identical for any worker count.
//!
//! Side data a job needs everywhere (partition scheme, Bloom filters) lives
//! in the job value itself, which every worker borrows immutably.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use bincode::Options;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub const DEFAULT_SHUFFLE_MEM_MB: usize = 256;
pub const DEFAULT_SPLIT_BYTES: u64 = 8 << 20;

fn codec() -> impl Options {
    // big-endian fixed-width ints: byte order equals numeric order for the
    // unsigned keys used by the pipeline
    bincode::DefaultOptions::new().with_big_endian().with_fixint_encoding()
}

pub fn encode<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    Ok(codec().serialize(value)?)
}

pub fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    Ok(codec().deserialize(bytes)?)
}

/// A byte range of one input file. The split owns every line whose first
/// byte lies in `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputSplit {
    pub path: PathBuf,
    pub start: u64,
    pub end: u64,
}

/// Cut each file into splits of roughly `split_bytes`.
pub fn plan_splits(paths: &[PathBuf], split_bytes: u64) -> Result<Vec<InputSplit>> {
    let split_bytes = split_bytes.max(1);
    let mut splits = Vec::new();
    for path in paths {
        let len = fs::metadata(path).ctx(|| format!("stat {}", path.display()))?.len();
        let mut start = 0;
        while start < len {
            let end = (start + split_bytes).min(len);
            splits.push(InputSplit { path: path.clone(), start, end });
            start = end;
        }
    }
    Ok(splits)
}

/// Every regular file in `dir` named `part-*`, sorted by name.
pub fn part_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).ctx(|| format!("listing {}", dir.display()))? {
        let entry = entry.ctx(|| format!("listing {}", dir.display()))?;
        let name = entry.file_name();
        if name.to_string_lossy().starts_with("part-") && entry.path().is_file() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

fn for_each_line(split: &InputSplit, mut f: impl FnMut(&str) -> Result<()>) -> Result<()> {
    let ctx = || format!("reading {}", split.path.display());
    let mut file = File::open(&split.path).ctx(ctx)?;
    let mut pos = split.start;
    if split.start > 0 {
        file.seek(SeekFrom::Start(split.start - 1)).ctx(ctx)?;
    }
    let mut reader = BufReader::with_capacity(1 << 16, file);
    let mut line = Vec::new();
    if split.start > 0 {
        // skip the tail of a line owned by the previous split
        let n = reader.read_until(b'\n', &mut line).ctx(ctx)?;
        pos = split.start - 1 + n as u64;
        line.clear();
    }
    while pos < split.end {
        let n = reader.read_until(b'\n', &mut line).ctx(ctx)?;
        if n == 0 {
            break;
        }
        pos += n as u64;
        let text = std::str::from_utf8(&line)
            .map_err(|_| Error::parse(split.path.display().to_string(), "invalid UTF-8"))?;
        f(text.trim_end_matches(['\n', '\r']))?;
        line.clear();
    }
    Ok(())
}

/// A map-shuffle-reduce job. Implementations must be deterministic and free
/// of shared mutable state.
pub trait Job: Sync {
    type Input;
    type Key: Serialize + DeserializeOwned;
    type Value: Serialize + DeserializeOwned;
    type MapState: Send;
    type ReduceState;

    /// Parse one input line; `Ok(None)` skips it.
    fn parse(&self, line: &str) -> Result<Option<Self::Input>>;

    fn map_setup(&self) -> Self::MapState;

    fn map(&self, state: &mut Self::MapState, input: Self::Input, out: &mut Emitter<'_, Self>) -> Result<()>;

    /// Runs exactly once per mapper after its last record.
    fn map_cleanup(&self, _state: Self::MapState, _out: &mut Emitter<'_, Self>) -> Result<()> {
        Ok(())
    }

    fn partition(&self, key: &Self::Key, partitions: usize) -> usize;

    fn reduce_setup(&self, partition: usize) -> Self::ReduceState;

    /// Called once per distinct key, in key order, with values in
    /// encoded-value order.
    fn reduce(
        &self,
        state: &mut Self::ReduceState,
        key: Self::Key,
        values: Vec<Self::Value>,
        out: &mut RecordWriter,
    ) -> Result<()>;

    fn reduce_cleanup(&self, _state: Self::ReduceState, _out: &mut RecordWriter) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct JobSpec {
    pub splits: Vec<InputSplit>,
    pub workers: usize,
    pub partitions: usize,
    pub output_dir: PathBuf,
    pub shuffle_mem_bytes: usize,
}

impl JobSpec {
    pub fn new(splits: Vec<InputSplit>, partitions: usize, output_dir: impl Into<PathBuf>) -> Self {
        JobSpec {
            splits,
            workers: 1,
            partitions,
            output_dir: output_dir.into(),
            shuffle_mem_bytes: DEFAULT_SHUFFLE_MEM_MB << 20,
        }
    }

    pub fn workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    pub fn shuffle_mem_bytes(mut self, bytes: usize) -> Self {
        self.shuffle_mem_bytes = bytes;
        self
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LoadStats {
    pub avg: f64,
    pub std: f64,
    pub min: u64,
    pub max: u64,
}

impl LoadStats {
    pub fn of(counts: &[u64]) -> Self {
        if counts.is_empty() {
            return LoadStats::default();
        }
        let n = counts.len() as f64;
        let avg = counts.iter().sum::<u64>() as f64 / n;
        let var = counts.iter().map(|&c| (c as f64 - avg).powi(2)).sum::<f64>() / n;
        LoadStats {
            avg,
            std: var.sqrt(),
            min: *counts.iter().min().unwrap(),
            max: *counts.iter().max().unwrap(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct JobReport {
    pub map_tasks: usize,
    pub input_records: u64,
    /// Mapper emissions routed to each partition (reducer load).
    pub map_output: Vec<u64>,
    pub reduce_output: Vec<u64>,
    pub spilled_runs: u64,
    pub map_ms: f64,
    pub reduce_ms: f64,
    pub outputs: Vec<PathBuf>,
}

impl JobReport {
    pub fn load(&self) -> LoadStats {
        LoadStats::of(&self.map_output)
    }

    pub fn total_map_output(&self) -> u64 {
        self.map_output.iter().sum()
    }
}

type Pair = (Vec<u8>, Vec<u8>);

enum Run {
    Mem(Vec<Pair>),
    File(PathBuf),
}

struct Shuffle {
    runs: Vec<Mutex<Vec<Run>>>,
    counts: Vec<AtomicU64>,
    in_memory: AtomicUsize,
    spilled: AtomicU64,
    spill_seq: AtomicU64,
    spill_dir: PathBuf,
    budget: usize,
    per_mapper_budget: usize,
}

impl Shuffle {
    fn spill(&self, partition: usize, pairs: &[Pair]) -> Result<PathBuf> {
        let seq = self.spill_seq.fetch_add(1, Ordering::Relaxed);
        let path = self.spill_dir.join(format!("spill-{partition:05}-{seq:08}"));
        let ctx = || format!("writing spill {}", path.display());
        let mut w = BufWriter::new(File::create(&path).ctx(ctx)?);
        for (k, v) in pairs {
            w.write_all(&(k.len() as u32).to_le_bytes()).ctx(ctx)?;
            w.write_all(k).ctx(ctx)?;
            w.write_all(&(v.len() as u32).to_le_bytes()).ctx(ctx)?;
            w.write_all(v).ctx(ctx)?;
        }
        w.flush().ctx(ctx)?;
        self.spilled.fetch_add(1, Ordering::Relaxed);
        Ok(path)
    }
}

/// Collects one mapper's emissions, partitioned and size-accounted.
pub struct Emitter<'a, J: Job + ?Sized> {
    job: &'a J,
    shuffle: &'a Shuffle,
    buffers: Vec<Vec<Pair>>,
    buffered: usize,
}

impl<'a, J: Job + ?Sized> Emitter<'a, J> {
    fn new(job: &'a J, shuffle: &'a Shuffle) -> Self {
        Emitter {
            job,
            shuffle,
            buffers: (0..shuffle.runs.len()).map(|_| Vec::new()).collect(),
            buffered: 0,
        }
    }

    pub fn emit(&mut self, key: &J::Key, value: &J::Value) -> Result<()> {
        let p = self.job.partition(key, self.buffers.len());
        if p >= self.buffers.len() {
            return Err(Error::InvalidArgument(format!(
                "partition function returned {p} for {} partitions",
                self.buffers.len()
            )));
        }
        self.emit_to(p, key, value)
    }

    /// Emit to an explicit partition, bypassing the partition function.
    pub fn emit_to(&mut self, partition: usize, key: &J::Key, value: &J::Value) -> Result<()> {
        let (k, v) = (encode(key)?, encode(value)?);
        self.buffered += k.len() + v.len() + 48;
        self.buffers[partition].push((k, v));
        self.shuffle.counts[partition].fetch_add(1, Ordering::Relaxed);
        if self.buffered > self.shuffle.per_mapper_budget {
            self.spill_all()?;
        }
        Ok(())
    }

    fn spill_all(&mut self) -> Result<()> {
        for (p, buf) in self.buffers.iter_mut().enumerate() {
            if buf.is_empty() {
                continue;
            }
            buf.sort_unstable();
            let path = self.shuffle.spill(p, buf)?;
            self.shuffle.runs[p].lock().unwrap().push(Run::File(path));
            buf.clear();
        }
        self.buffered = 0;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        let global = self.shuffle.in_memory.load(Ordering::Relaxed);
        if global + self.buffered > self.shuffle.budget {
            return self.spill_all();
        }
        self.shuffle.in_memory.fetch_add(self.buffered, Ordering::Relaxed);
        for (p, mut buf) in std::mem::take(&mut self.buffers).into_iter().enumerate() {
            if !buf.is_empty() {
                buf.sort_unstable();
                self.shuffle.runs[p].lock().unwrap().push(Run::Mem(buf));
            }
        }
        Ok(())
    }
}

/// Line-oriented output for one partition.
pub struct RecordWriter {
    inner: BufWriter<File>,
    path: PathBuf,
    records: u64,
}

impl RecordWriter {
    pub fn write_line(&mut self, line: &str) -> Result<()> {
        let ctx = || format!("writing {}", self.path.display());
        self.inner.write_all(line.as_bytes()).ctx(ctx)?;
        self.inner.write_all(b"\n").ctx(ctx)?;
        self.records += 1;
        Ok(())
    }

    pub fn records(&self) -> u64 {
        self.records
    }
}

enum RunReader {
    Mem(std::vec::IntoIter<Pair>),
    File(BufReader<File>, PathBuf),
}

impl RunReader {
    fn next(&mut self) -> Result<Option<Pair>> {
        match self {
            RunReader::Mem(it) => Ok(it.next()),
            RunReader::File(r, path) => {
                let ctx = || format!("reading spill {}", path.display());
                let mut len = [0u8; 4];
                match r.read_exact(&mut len) {
                    Ok(()) => {}
                    Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
                    Err(e) => return Err(Error::io(ctx(), e)),
                }
                let mut k = vec![0u8; u32::from_le_bytes(len) as usize];
                r.read_exact(&mut k).ctx(ctx)?;
                r.read_exact(&mut len).ctx(ctx)?;
                let mut v = vec![0u8; u32::from_le_bytes(len) as usize];
                r.read_exact(&mut v).ctx(ctx)?;
                Ok(Some((k, v)))
            }
        }
    }
}

struct MergedRuns {
    readers: Vec<RunReader>,
    heap: BinaryHeap<Reverse<(Vec<u8>, Vec<u8>, usize)>>,
}

impl MergedRuns {
    fn new(runs: Vec<Run>) -> Result<Self> {
        let mut readers = Vec::with_capacity(runs.len());
        for run in runs {
            readers.push(match run {
                Run::Mem(v) => RunReader::Mem(v.into_iter()),
                Run::File(path) => {
                    let f = File::open(&path).ctx(|| format!("opening spill {}", path.display()))?;
                    RunReader::File(BufReader::new(f), path)
                }
            });
        }
        let mut heap = BinaryHeap::with_capacity(readers.len());
        for (i, r) in readers.iter_mut().enumerate() {
            if let Some((k, v)) = r.next()? {
                heap.push(Reverse((k, v, i)));
            }
        }
        Ok(MergedRuns { readers, heap })
    }

    fn next(&mut self) -> Result<Option<Pair>> {
        let Some(Reverse((k, v, i))) = self.heap.pop() else { return Ok(None) };
        if let Some((nk, nv)) = self.readers[i].next()? {
            self.heap.push(Reverse((nk, nv, i)));
        }
        Ok(Some((k, v)))
    }
}

fn part_path(dir: &Path, partition: usize) -> PathBuf {
    dir.join(format!("part-{partition:05}"))
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    payload
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| payload.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

/// Run `f(i)` for every `i < tasks` on `workers` threads. The first error
/// or panic stops further scheduling and is returned.
fn run_parallel(workers: usize, tasks: usize, f: impl Fn(usize) -> Result<()> + Sync) -> Result<()> {
    let next = AtomicUsize::new(0);
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..workers.max(1).min(tasks.max(1)) {
            scope.spawn(|| loop {
                if failure.lock().unwrap().is_some() {
                    return;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= tasks {
                    return;
                }
                let outcome = panic::catch_unwind(AssertUnwindSafe(|| f(i)))
                    .unwrap_or_else(|p| Err(Error::WorkerPanic(panic_message(p))));
                if let Err(e) = outcome {
                    failure.lock().unwrap().get_or_insert(e);
                    return;
                }
            });
        }
    });
    match failure.into_inner().unwrap() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Execute `job`. On failure every output and spill file is removed.
pub fn run_job<J: Job>(job: &J, spec: &JobSpec) -> Result<JobReport> {
    if spec.partitions == 0 || spec.workers == 0 {
        return Err(Error::InvalidArgument("workers and partitions must be >= 1".into()));
    }
    fs::create_dir_all(&spec.output_dir).ctx(|| format!("creating {}", spec.output_dir.display()))?;
    let spill_dir = spec.output_dir.join("_shuffle");
    fs::create_dir_all(&spill_dir).ctx(|| format!("creating {}", spill_dir.display()))?;
    let result = execute(job, spec, &spill_dir);
    let _ = fs::remove_dir_all(&spill_dir);
    if result.is_err() {
        for p in 0..spec.partitions {
            let _ = fs::remove_file(part_path(&spec.output_dir, p));
            let _ = fs::remove_file(spec.output_dir.join(format!(".part-{p:05}.tmp")));
        }
    }
    result
}

fn execute<J: Job>(job: &J, spec: &JobSpec, spill_dir: &Path) -> Result<JobReport> {
    let shuffle = Shuffle {
        runs: (0..spec.partitions).map(|_| Mutex::new(Vec::new())).collect(),
        counts: (0..spec.partitions).map(|_| AtomicU64::new(0)).collect(),
        in_memory: AtomicUsize::new(0),
        spilled: AtomicU64::new(0),
        spill_seq: AtomicU64::new(0),
        spill_dir: spill_dir.to_path_buf(),
        budget: spec.shuffle_mem_bytes,
        per_mapper_budget: (spec.shuffle_mem_bytes / spec.workers).max(1),
    };
    let input_records = AtomicU64::new(0);

    let started = Instant::now();
    run_parallel(spec.workers, spec.splits.len(), |i| {
        let split = &spec.splits[i];
        let mut state = job.map_setup();
        let mut out = Emitter::new(job, &shuffle);
        let mut n = 0u64;
        for_each_line(split, |line| {
            if let Some(rec) = job.parse(line)? {
                n += 1;
                job.map(&mut state, rec, &mut out)?;
            }
            Ok(())
        })?;
        job.map_cleanup(state, &mut out)?;
        input_records.fetch_add(n, Ordering::Relaxed);
        out.finish()
    })?;
    let map_ms = started.elapsed().as_secs_f64() * 1e3;

    let started = Instant::now();
    let runs: Vec<Mutex<Option<Vec<Run>>>> = shuffle
        .runs
        .into_iter()
        .map(|m| Mutex::new(Some(m.into_inner().unwrap())))
        .collect();
    let reduce_counts: Vec<AtomicU64> = (0..spec.partitions).map(|_| AtomicU64::new(0)).collect();
    run_parallel(spec.workers.min(spec.partitions), spec.partitions, |p| {
        let tmp = spec.output_dir.join(format!(".part-{p:05}.tmp"));
        let file = File::create(&tmp).ctx(|| format!("creating {}", tmp.display()))?;
        let mut out = RecordWriter {
            inner: BufWriter::with_capacity(1 << 16, file),
            path: tmp.clone(),
            records: 0,
        };
        let mut state = job.reduce_setup(p);
        let mut merged = MergedRuns::new(runs[p].lock().unwrap().take().unwrap_or_default())?;
        let mut current: Option<(Vec<u8>, Vec<J::Value>)> = None;
        while let Some((k, v)) = merged.next()? {
            let value: J::Value = decode(&v)?;
            match &mut current {
                Some((ck, vals)) if *ck == k => vals.push(value),
                _ => {
                    if let Some((ck, vals)) = current.take() {
                        job.reduce(&mut state, decode(&ck)?, vals, &mut out)?;
                    }
                    current = Some((k, vec![value]));
                }
            }
        }
        if let Some((ck, vals)) = current.take() {
            job.reduce(&mut state, decode(&ck)?, vals, &mut out)?;
        }
        job.reduce_cleanup(state, &mut out)?;
        out.inner.flush().ctx(|| format!("writing {}", tmp.display()))?;
        reduce_counts[p].store(out.records, Ordering::Relaxed);
        drop(out);
        let dest = part_path(&spec.output_dir, p);
        fs::rename(&tmp, &dest).ctx(|| format!("renaming to {}", dest.display()))
    })?;
    let reduce_ms = started.elapsed().as_secs_f64() * 1e3;

    Ok(JobReport {
        map_tasks: spec.splits.len(),
        input_records: input_records.into_inner(),
        map_output: shuffle.counts.iter().map(|c| c.load(Ordering::Relaxed)).collect(),
        reduce_output: reduce_counts.iter().map(|c| c.load(Ordering::Relaxed)).collect(),
        spilled_runs: shuffle.spilled.into_inner(),
        map_ms,
        reduce_ms,
        outputs: (0..spec.partitions).map(|p| part_path(&spec.output_dir, p)).collect(),
    })
}
