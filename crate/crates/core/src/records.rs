//! NDJSON line formats exchanged between pipeline stages.
//!
//! ```text
//! {"t":"n","l":3,"id":812,"lon":-88.2,"lat":40.1,"c":14,"so":7,"u":5,"tt":5400,"tb":[[16283,14]]}
//! {"t":"e","l":3,"s":812,"d":813,"c":4,"tt":1800,"dm":2.7,"tb":[[16283,4]]}
//! ```
//!
//! `c` counts movement endpoints for nodes and movements for edges, `so`
//! counts endpoints that were movement sources, `tt` sums travel time of
//! those source movements, `dm` is the largest source-target distance among
//! an edge's movements, and `tb` is a sparse `[bucket, count]` histogram.
//! Summary nodes additionally carry `rank`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CellId, GeoPoint};

pub type Histogram = Vec<[u64; 2]>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    #[serde(rename = "l")]
    pub level: u32,
    #[serde(rename = "id")]
    pub cell: u64,
    pub lon: f64,
    pub lat: f64,
    #[serde(rename = "c")]
    pub count: u64,
    #[serde(rename = "so")]
    pub source_count: u64,
    #[serde(rename = "u")]
    pub users: Option<u64>,
    #[serde(rename = "tt")]
    pub tt_sum: i64,
    #[serde(rename = "tb")]
    pub tbuckets: Histogram,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<f64>,
}

impl NodeRecord {
    pub fn cell_id(&self) -> CellId {
        CellId::new(self.level, self.cell)
    }

    pub fn centroid(&self) -> GeoPoint {
        GeoPoint { lon: self.lon, lat: self.lat }
    }

    pub fn avg_travel_time(&self) -> Option<f64> {
        (self.source_count > 0).then(|| self.tt_sum as f64 / self.source_count as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    #[serde(rename = "l")]
    pub level: u32,
    #[serde(rename = "s")]
    pub src: u64,
    #[serde(rename = "d")]
    pub dst: u64,
    #[serde(rename = "c")]
    pub count: u64,
    #[serde(rename = "tt")]
    pub tt_sum: i64,
    #[serde(rename = "dm")]
    pub max_km: f64,
    #[serde(rename = "tb")]
    pub tbuckets: Histogram,
}

impl EdgeRecord {
    pub fn avg_travel_time(&self) -> Option<f64> {
        (self.count > 0).then(|| self.tt_sum as f64 / self.count as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "t")]
pub enum Record {
    #[serde(rename = "n")]
    Node(NodeRecord),
    #[serde(rename = "e")]
    Edge(EdgeRecord),
}

impl Record {
    pub fn parse(line: &str) -> Result<Record> {
        serde_json::from_str(line).map_err(|e| Error::parse("graph record", format!("{e}: `{line}`")))
    }

    pub fn to_line(&self) -> String {
        // serialization of these plain structs cannot fail
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Sum of a sparse histogram over buckets `from..=to`.
pub fn window_sum(hist: &[[u64; 2]], from: u64, to: u64) -> u64 {
    hist.iter().filter(|[b, _]| *b >= from && *b <= to).map(|[_, c]| c).sum()
}
