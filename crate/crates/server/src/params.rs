//! Query-string parsing for `/api/graph`.

use chrono::{DateTime, NaiveDate};
use flowcube_core::aggregate::TimeBucketing;
use flowcube_core::Region;

use crate::error::ApiError;

/// Raw query parameters; unknown ones are ignored.
#[derive(Debug, Default, serde::Deserialize)]
pub struct GraphParams {
    pub level: Option<String>,
    pub bbox: Option<String>,
    pub from: Option<String>,
    pub to: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphQuery {
    pub level: u32,
    pub bbox: Region,
    pub from: u64,
    pub to: u64,
}

#[derive(Clone, Copy)]
enum Edge {
    From,
    To,
}

pub fn parse_bbox(s: &str) -> Result<Region, ApiError> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| ApiError::BadRequest(format!("bbox must be four numbers w,s,e,n: `{s}`")))?;
    let [w, so, e, n] = parts[..] else {
        return Err(ApiError::BadRequest(format!("bbox must be four numbers w,s,e,n: `{s}`")));
    };
    Region::new(w, so, e, n).map_err(|e| ApiError::BadRequest(e.to_string()))
}

fn parse_time(s: &str, bucketing: &TimeBucketing, edge: Edge) -> Result<u64, ApiError> {
    let s = s.trim();
    if let Ok(b) = s.parse::<u64>() {
        return Ok(b);
    }
    let seconds = if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        let start = d.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp();
        match edge {
            Edge::From => start,
            // a date upper bound covers the whole day
            Edge::To => start + 86_399,
        }
    } else if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        t.timestamp()
    } else {
        return Err(ApiError::BadRequest(format!("time `{s}` is neither a bucket index nor an ISO-8601 date")));
    };
    Ok(bucketing.bucket(seconds).unwrap_or(0))
}

impl GraphParams {
    pub fn resolve(&self, bucketing: &TimeBucketing, last_bucket: u64) -> Result<GraphQuery, ApiError> {
        let level = self
            .level
            .as_deref()
            .ok_or_else(|| ApiError::BadRequest("missing `level`".into()))?
            .trim()
            .parse::<u32>()
            .map_err(|_| ApiError::BadRequest("`level` must be a positive integer".into()))?;
        let bbox = parse_bbox(self.bbox.as_deref().ok_or_else(|| ApiError::BadRequest("missing `bbox`".into()))?)?;
        let from = match &self.from {
            Some(s) => parse_time(s, bucketing, Edge::From)?,
            None => 0,
        };
        let to = match &self.to {
            Some(s) => parse_time(s, bucketing, Edge::To)?,
            None => last_bucket,
        };
        if from > to {
            return Err(ApiError::BadRequest(format!("empty window: from {from} > to {to}")));
        }
        Ok(GraphQuery { level, bbox, from, to })
    }
}
