//! Open-loop query replay: request `i` is issued at `i / rate` seconds
//! regardless of how earlier requests are doing.

use std::time::{Duration, Instant};

use flowcube_core::querygen::QuerySpec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LatencySummary {
    pub count: usize,
    pub avg_ms: f64,
    pub median_ms: f64,
    pub p90_ms: f64,
    pub max_ms: f64,
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn summarize(samples: &[f64]) -> LatencySummary {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    LatencySummary {
        count: s.len(),
        avg_ms: if s.is_empty() { 0.0 } else { s.iter().sum::<f64>() / s.len() as f64 },
        median_ms: percentile(&s, 50.0),
        p90_ms: percentile(&s, 90.0),
        max_ms: s.last().copied().unwrap_or(0.0),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StressReport {
    pub pattern: String,
    pub rate_qps: f64,
    #[serde(flatten)]
    pub latency: LatencySummary,
    /// Responses with a non-2xx status or a transport failure.
    pub errors: usize,
    pub status_counts: std::collections::BTreeMap<u16, usize>,
    pub samples_ms: Vec<f64>,
}

pub fn graph_url(base: &str, q: &QuerySpec) -> String {
    let [w, s, e, n] = q.bbox;
    let mut url = format!("{base}/api/graph?level={}&bbox={w},{s},{e},{n}", q.level);
    if let Some([from, to]) = q.window {
        url.push_str(&format!("&from={from}&to={to}"));
    }
    url
}

/// Replay `queries` against `base` (e.g. `http://127.0.0.1:8080`) at
/// `rate` queries per second.
pub async fn replay(base: &str, pattern: &str, queries: &[QuerySpec], rate: f64) -> StressReport {
    let client = reqwest::Client::new();
    let start = Instant::now();
    let tasks: Vec<_> = queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let client = client.clone();
            let url = graph_url(base, q);
            let due = start + Duration::from_secs_f64(i as f64 / rate);
            tokio::spawn(async move {
                tokio::time::sleep_until(due.into()).await;
                let t = Instant::now();
                let status = match client.get(&url).send().await {
                    Ok(resp) => {
                        let status = resp.status().as_u16();
                        match resp.bytes().await {
                            Ok(_) => status,
                            Err(_) => 0,
                        }
                    }
                    Err(_) => 0,
                };
                (t.elapsed().as_secs_f64() * 1e3, status)
            })
        })
        .collect();
    let mut samples = Vec::with_capacity(tasks.len());
    let mut status_counts = std::collections::BTreeMap::new();
    for t in tasks {
        let (ms, status) = t.await.unwrap_or((f64::NAN, 0));
        samples.push(ms);
        *status_counts.entry(status).or_insert(0) += 1;
    }
    let errors = status_counts.iter().filter(|(s, _)| !(200..300).contains(*s)).map(|(_, c)| c).sum();
    StressReport {
        pattern: pattern.to_string(),
        rate_qps: rate,
        latency: summarize(&samples),
        errors,
        status_counts,
        samples_ms: samples,
    }
}
