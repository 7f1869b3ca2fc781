//! Edge filtering against the summarized node set.
//!
//! The default method builds one Bloom filter per level over the kept
//! `(level, cell)` keys; an edge survives when both endpoints pass. The
//! filter admits false positives but never drops an edge between two kept
//! nodes. The exact semi-join is available as an alternate method.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::error::{Error, IoContext, Result};
use crate::model::CellId;
use crate::mr::{Emitter, Job, RecordWriter};
use crate::records::{EdgeRecord, Record};
use crate::registry::Registry;
use crate::routing::CellRouter;

pub const DEFAULT_FP_RATE: f64 = 0.01;
const MAGIC: &[u8; 4] = b"BLM1";
const SECOND_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

/// Bloom filter over grid cells of one level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BloomFilter {
    level: u32,
    m: u64,
    k: u32,
    n: u64,
    bits: Vec<u8>,
}

/// Optimal `(m, k)` for `n` keys at false-positive rate `p`.
pub fn optimal_params(n: u64, p: f64) -> (u64, u32) {
    let ln2 = std::f64::consts::LN_2;
    let m = (-(n as f64) * p.ln() / (ln2 * ln2)).ceil() as u64;
    let k = ((m as f64 / n as f64) * ln2).round().max(1.0) as u32;
    (m, k)
}

fn key_bytes(cell: u64, level: u32) -> [u8; 12] {
    let mut b = [0u8; 12];
    b[..4].copy_from_slice(&level.to_le_bytes());
    b[4..].copy_from_slice(&cell.to_le_bytes());
    b
}

impl BloomFilter {
    /// Filter sized for `n_estimate` keys at rate `p`. Zero keys yields an
    /// always-false filter.
    pub fn new(level: u32, n_estimate: u64, p: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::InvalidArgument(format!("false-positive rate must be in (0, 1), got {p}")));
        }
        let (m, k) = if n_estimate == 0 { (8, 1) } else { optimal_params(n_estimate, p) };
        Ok(BloomFilter {
            level,
            m,
            k,
            n: 0,
            bits: vec![0; m.div_ceil(8) as usize],
        })
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn m(&self) -> u64 {
        self.m
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn inserted(&self) -> u64 {
        self.n
    }

    fn positions(&self, cell: u64) -> impl Iterator<Item = u64> {
        let bytes = key_bytes(cell, self.level);
        let h1 = xxh3_64_with_seed(&bytes, 0) as u128;
        let h2 = xxh3_64_with_seed(&bytes, SECOND_SEED) as u128;
        let m = self.m as u128;
        (0..self.k as u128).map(move |i| ((h1 + i * h2) % m) as u64)
    }

    pub fn insert(&mut self, cell: u64) {
        let positions: Vec<u64> = self.positions(cell).collect();
        for bit in positions {
            self.bits[(bit / 8) as usize] |= 1 << (bit % 8);
        }
        self.n += 1;
    }

    pub fn contains(&self, cell: u64) -> bool {
        self.positions(cell).all(|bit| self.bits[(bit / 8) as usize] & (1 << (bit % 8)) != 0)
    }

    /// `BLM1`, u32 level, u64 m, u32 k, u64 n, then the bit array; all
    /// integers little-endian, bit `i` at byte `i / 8`, bit `i % 8`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + self.bits.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.level.to_le_bytes());
        out.extend_from_slice(&self.m.to_le_bytes());
        out.extend_from_slice(&self.k.to_le_bytes());
        out.extend_from_slice(&self.n.to_le_bytes());
        out.extend_from_slice(&self.bits);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 28 || &bytes[..4] != MAGIC {
            return Err("missing BLM1 header".into());
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
        let (level, m, k, n) = (u32_at(4), u64_at(8), u32_at(16), u64_at(20));
        if m == 0 || k == 0 {
            return Err("m and k must be positive".into());
        }
        let bits = &bytes[28..];
        if bits.len() as u64 != m.div_ceil(8) {
            return Err(format!("bit array holds {} bytes, expected {}", bits.len(), m.div_ceil(8)));
        }
        Ok(BloomFilter { level, m, k, n, bits: bits.to_vec() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).ctx(|| format!("writing filter {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).ctx(|| format!("reading filter {}", path.display()))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::Format { path: path.to_path_buf(), reason })
    }
}

/// One filter per level in `1..=levels`, each sized for its key count.
pub fn bloom_build(keys: &[CellId], levels: u32, p: f64) -> Result<BTreeMap<u32, BloomFilter>> {
    let mut per_level: BTreeMap<u32, Vec<u64>> = (1..=levels).map(|l| (l, Vec::new())).collect();
    for key in keys {
        per_level
            .get_mut(&key.level)
            .ok_or(Error::LevelOutOfRange { level: key.level, levels })?
            .push(key.index);
    }
    per_level
        .into_iter()
        .map(|(level, cells)| {
            let mut f = BloomFilter::new(level, cells.len() as u64, p)?;
            for c in cells {
                f.insert(c);
            }
            Ok((level, f))
        })
        .collect()
}

pub fn filter_file_name(level: u32) -> String {
    format!("level-{level:02}.blm")
}

pub fn save_filters(filters: &BTreeMap<u32, BloomFilter>, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
    filters
        .iter()
        .map(|(level, f)| {
            let path = dir.join(filter_file_name(*level));
            f.save(&path)?;
            Ok(path)
        })
        .collect()
}

/// Load `level-NN.blm` for each level in `1..=levels`.
pub fn load_filters(dir: &Path, levels: u32) -> Result<BTreeMap<u32, BloomFilter>> {
    let mut out = BTreeMap::new();
    for level in 1..=levels {
        let path = dir.join(filter_file_name(level));
        if !path.exists() {
            return Err(Error::MissingFilter(level));
        }
        let f = BloomFilter::load(&path)?;
        if f.level() != level {
            return Err(Error::Format { path, reason: format!("filter is for level {}", f.level()) });
        }
        out.insert(level, f);
    }
    Ok(out)
}

/// Membership test deciding whether an edge survives.
pub trait EdgeMembership: Send + Sync {
    fn keep(&self, level: u32, src: u64, dst: u64) -> Result<bool>;
}

pub struct BloomMembership {
    filters: BTreeMap<u32, BloomFilter>,
}

impl BloomMembership {
    pub fn new(filters: BTreeMap<u32, BloomFilter>) -> Self {
        BloomMembership { filters }
    }
}

impl EdgeMembership for BloomMembership {
    fn keep(&self, level: u32, src: u64, dst: u64) -> Result<bool> {
        let f = self.filters.get(&level).ok_or(Error::MissingFilter(level))?;
        Ok(f.contains(src) && f.contains(dst))
    }
}

pub struct ExactMembership {
    keys: HashSet<CellId>,
}

impl ExactMembership {
    pub fn new(keys: &[CellId]) -> Self {
        ExactMembership { keys: keys.iter().copied().collect() }
    }
}

impl EdgeMembership for ExactMembership {
    fn keep(&self, level: u32, src: u64, dst: u64) -> Result<bool> {
        Ok(self.keys.contains(&CellId::new(level, src)) && self.keys.contains(&CellId::new(level, dst)))
    }
}

/// Inputs available when constructing a membership test.
pub struct FilterInputs<'a> {
    pub summary: &'a [CellId],
    pub levels: u32,
    pub fp_rate: f64,
    /// Where a method may persist side files (the Bloom filters).
    pub side_dir: Option<&'a Path>,
}

pub trait EdgeFilterMethod: Send + Sync {
    fn name(&self) -> &'static str;

    fn prepare(&self, inputs: &FilterInputs<'_>) -> Result<Box<dyn EdgeMembership>>;
}

pub struct BloomMethod;

impl EdgeFilterMethod for BloomMethod {
    fn name(&self) -> &'static str {
        "bloom"
    }

    fn prepare(&self, inputs: &FilterInputs<'_>) -> Result<Box<dyn EdgeMembership>> {
        let filters = bloom_build(inputs.summary, inputs.levels, inputs.fp_rate)?;
        let filters = match inputs.side_dir {
            // ship through files, as mappers on other machines would receive them
            Some(dir) => {
                save_filters(&filters, dir)?;
                load_filters(dir, inputs.levels)?
            }
            None => filters,
        };
        Ok(Box::new(BloomMembership::new(filters)))
    }
}

pub struct ExactJoinMethod;

impl EdgeFilterMethod for ExactJoinMethod {
    fn name(&self) -> &'static str {
        "exact"
    }

    fn prepare(&self, inputs: &FilterInputs<'_>) -> Result<Box<dyn EdgeMembership>> {
        Ok(Box::new(ExactMembership::new(inputs.summary)))
    }
}

pub static EDGE_FILTERS: Registry<dyn EdgeFilterMethod> = Registry::new(
    "edge-filter",
    &[("bloom", |_| Box::new(BloomMethod)), ("exact", |_| Box::new(ExactJoinMethod))],
);

/// Exact semi-join: edges whose both endpoints are summary nodes.
pub fn exact_join(edges: &[EdgeRecord], summary: &[CellId]) -> Vec<EdgeRecord> {
    let keys: HashSet<CellId> = summary.iter().copied().collect();
    edges
        .iter()
        .filter(|e| keys.contains(&CellId::new(e.level, e.src)) && keys.contains(&CellId::new(e.level, e.dst)))
        .cloned()
        .collect()
}

/// Map-side edge filter; reducers only write the surviving lines back out
/// in key order.
pub struct FilterJob {
    membership: Box<dyn EdgeMembership>,
    router: Arc<dyn CellRouter>,
}

impl FilterJob {
    pub fn new(membership: Box<dyn EdgeMembership>, router: Arc<dyn CellRouter>) -> Self {
        FilterJob { membership, router }
    }
}

impl Job for FilterJob {
    type Input = (EdgeRecord, String);
    type Key = (u32, u64, u64);
    type Value = String;
    type MapState = ();
    type ReduceState = ();

    fn parse(&self, line: &str) -> Result<Option<(EdgeRecord, String)>> {
        if line.is_empty() || !line.starts_with(r#"{"t":"e""#) {
            return Ok(None);
        }
        match Record::parse(line)? {
            Record::Edge(e) => Ok(Some((e, line.to_string()))),
            Record::Node(_) => Ok(None),
        }
    }

    fn map_setup(&self) {}

    fn map(&self, _: &mut (), (e, line): (EdgeRecord, String), out: &mut Emitter<'_, Self>) -> Result<()> {
        if self.membership.keep(e.level, e.src, e.dst)? {
            out.emit(&(e.level, e.src, e.dst), &line)?;
        }
        Ok(())
    }

    fn partition(&self, key: &(u32, u64, u64), _partitions: usize) -> usize {
        self.router.route(CellId::new(key.0, key.1))
    }

    fn reduce_setup(&self, _partition: usize) {}

    fn reduce(&self, _: &mut (), _key: (u32, u64, u64), values: Vec<String>, out: &mut RecordWriter) -> Result<()> {
        for line in values {
            out.write_line(&line)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sizing_formula() {
        assert_eq!(optimal_params(1000, 0.01), (9586, 7));
        let f = BloomFilter::new(1, 1000, 0.01).unwrap();
        assert_eq!((f.m(), f.k()), (9586, 7));
        assert!(BloomFilter::new(1, 10, 1.0).is_err());
    }

    #[test]
    fn inserted_keys_are_members() {
        let mut f = BloomFilter::new(2, 2, 0.01).unwrap();
        f.insert(17);
        f.insert(4_000_000_000);
        assert!(f.contains(17) && f.contains(4_000_000_000));
    }

    #[test]
    fn empty_filter_rejects_everything() {
        let f = BloomFilter::new(3, 0, 0.01).unwrap();
        assert!((0..10_000).all(|c| !f.contains(c)));
    }

    #[test]
    fn false_positive_rate_at_design_load() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 10_000u64;
        let keys: HashSet<u64> = (0..n).map(|_| rng.gen::<u64>() >> 8).collect();
        let mut f = BloomFilter::new(5, keys.len() as u64, 0.01).unwrap();
        keys.iter().for_each(|&k| f.insert(k));
        let mut fp = 0;
        let mut probes = 0;
        while probes < 100_000 {
            let k = rng.gen::<u64>() >> 8;
            if keys.contains(&k) {
                continue;
            }
            probes += 1;
            fp += f.contains(k) as u32;
        }
        let rate = fp as f64 / probes as f64;
        assert!(rate <= 0.02, "{rate}");
    }

    #[test]
    fn bytes_round_trip_and_layout() {
        let mut f = BloomFilter::new(7, 50, 0.05).unwrap();
        (0..50).for_each(|c| f.insert(c * 31));
        let bytes = f.to_bytes();
        assert_eq!(&bytes[..4], b"BLM1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 7);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), f.m());
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 50);
        let back = BloomFilter::from_bytes(&bytes).unwrap();
        assert_eq!(back, f);
        assert!((0..10_000).all(|c| back.contains(c) == f.contains(c)));
        assert!(BloomFilter::from_bytes(&bytes[..30]).is_err());
    }

    #[test]
    fn missing_filter_is_an_error() {
        let filters = bloom_build(&[CellId::new(1, 3)], 1, 0.01).unwrap();
        let m = BloomMembership::new(filters);
        assert!(m.keep(1, 3, 3).unwrap());
        assert!(matches!(m.keep(2, 3, 3), Err(Error::MissingFilter(2))));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_filters(dir.path(), 1), Err(Error::MissingFilter(1))));
    }

    fn edge(level: u32, src: u64, dst: u64) -> EdgeRecord {
        EdgeRecord { level, src, dst, count: 1, tt_sum: 0, max_km: 0.0, tbuckets: vec![] }
    }

    #[test]
    fn exact_join_edge_cases() {
        let edges = vec![edge(1, 1, 2), edge(1, 2, 3), edge(2, 1, 1)];
        assert!(exact_join(&edges, &[]).is_empty());
        let all = [CellId::new(1, 1), CellId::new(1, 2), CellId::new(1, 3), CellId::new(2, 1)];
        assert_eq!(exact_join(&edges, &all), edges);
        assert_eq!(exact_join(&edges, &all[..2]), vec![edge(1, 1, 2)]);
    }

    #[test]
    fn bloom_keeps_superset_of_exact_join() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let summary: Vec<CellId> = (0..2000).map(|_| CellId::new(rng.gen_range(1..=3), rng.gen_range(0..20_000))).collect();
        let edges: Vec<EdgeRecord> = (0..50_000)
            .map(|_| edge(rng.gen_range(1..=3), rng.gen_range(0..20_000), rng.gen_range(0..20_000)))
            .collect();
        let exact = exact_join(&edges, &summary);
        let bloom = BloomMethod
            .prepare(&FilterInputs { summary: &summary, levels: 3, fp_rate: 0.01, side_dir: None })
            .unwrap();
        let kept: Vec<&EdgeRecord> = edges.iter().filter(|e| bloom.keep(e.level, e.src, e.dst).unwrap()).collect();
        let kept_set: HashSet<(u32, u64, u64)> = kept.iter().map(|e| (e.level, e.src, e.dst)).collect();
        assert!(exact.iter().all(|e| kept_set.contains(&(e.level, e.src, e.dst))));
        let surplus = kept.len() - exact.len();
        let non_significant = edges.len() - exact.len();
        assert!((surplus as f64) / (non_significant as f64) <= 0.02, "{surplus}/{non_significant}");
    }
}
