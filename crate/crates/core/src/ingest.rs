//! Event parsing and trajectory construction.
//!
//! Raw input is `user_id,epoch_seconds,lon,lat` CSV. Events are grouped per
//! user, time-sorted, and consecutive distinct positions become
//! [`MovementRecord`]s in the canonical movement CSV.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};

use crate::error::{Error, IoContext, Result};
use crate::model::{GeoPoint, MovementRecord, Region};

pub const MOVEMENT_HEADER: &str = "user_id,t_src,t_dst,lon_s,lat_s,lon_d,lat_d";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoEvent {
    pub user: u64,
    pub t: i64,
    pub point: GeoPoint,
}

#[derive(Debug, Clone, Copy)]
pub struct ParseOptions {
    /// Fraction of malformed lines above which parsing fails.
    pub max_malformed_fraction: f64,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            max_malformed_fraction: 0.10,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseStats {
    pub lines: u64,
    pub header_skipped: bool,
    pub malformed: u64,
}

fn parse_event_fields(fields: &[&str]) -> std::result::Result<GeoEvent, String> {
    if fields.len() != 4 {
        return Err(format!("expected 4 fields, found {}", fields.len()));
    }
    let user = fields[0].trim().parse::<u64>().map_err(|e| format!("user_id: {e}"))?;
    let t = fields[1].trim().parse::<i64>().map_err(|e| format!("epoch_seconds: {e}"))?;
    if t < 0 {
        return Err("negative timestamp".into());
    }
    let lon = fields[2].trim().parse::<f64>().map_err(|e| format!("lon: {e}"))?;
    let lat = fields[3].trim().parse::<f64>().map_err(|e| format!("lat: {e}"))?;
    let point = GeoPoint::new(lon, lat).map_err(|e| e.to_string())?;
    Ok(GeoEvent { user, t, point })
}

/// Parse event CSV. Malformed lines are skipped and counted; the call fails
/// if they exceed `opts.max_malformed_fraction` of all data lines.
pub fn parse_events<R: Read>(input: R, opts: &ParseOptions) -> Result<(Vec<GeoEvent>, ParseStats)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut events = Vec::new();
    let mut stats = ParseStats::default();
    let mut first_bad: Option<(u64, String)> = None;
    let mut record = csv::StringRecord::new();
    let mut line_no = 0u64;
    loop {
        line_no += 1;
        let more = match reader.read_record(&mut record) {
            Ok(more) => more,
            Err(e) => match e.kind() {
                csv::ErrorKind::Io(_) => {
                    let csv::ErrorKind::Io(io) = e.into_kind() else { unreachable!() };
                    return Err(Error::io("reading event stream", io));
                }
                _ => {
                    stats.lines += 1;
                    stats.malformed += 1;
                    first_bad.get_or_insert((line_no, e.to_string()));
                    continue;
                }
            },
        };
        if !more {
            break;
        }
        let fields: Vec<&str> = record.iter().collect();
        if line_no == 1 && fields.first().is_some_and(|f| f.trim().parse::<f64>().is_err()) {
            stats.header_skipped = true;
            continue;
        }
        if fields.len() == 1 && fields[0].trim().is_empty() {
            continue;
        }
        stats.lines += 1;
        match parse_event_fields(&fields) {
            Ok(ev) => events.push(ev),
            Err(reason) => {
                stats.malformed += 1;
                first_bad.get_or_insert((line_no, reason));
            }
        }
    }
    if stats.lines > 0 && stats.malformed as f64 > opts.max_malformed_fraction * stats.lines as f64 {
        let (first_line, first_reason) = first_bad.unwrap_or_default();
        return Err(Error::TooManyMalformed {
            malformed: stats.malformed,
            total: stats.lines,
            limit: opts.max_malformed_fraction * 100.0,
            first_line,
            first_reason,
        });
    }
    Ok((events, stats))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrajectoryOptions {
    /// Consecutive events further apart than this start a new trajectory.
    pub max_gap_seconds: Option<i64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrajectoryStats {
    pub users: u64,
    pub dropped_out_of_region: u64,
    pub collapsed_stationary: u64,
    pub gap_breaks: u64,
}

/// Build movements from unsorted events. Output is ordered by
/// `(user, t_src)`.
pub fn build_movements(
    events: &[GeoEvent],
    region: &Region,
    opts: &TrajectoryOptions,
) -> (Vec<MovementRecord>, TrajectoryStats) {
    let mut stats = TrajectoryStats::default();
    let mut by_user: BTreeMap<u64, Vec<(i64, GeoPoint)>> = BTreeMap::new();
    for ev in events {
        if !region.contains(ev.point) {
            stats.dropped_out_of_region += 1;
            continue;
        }
        by_user.entry(ev.user).or_default().push((ev.t, ev.point));
    }
    stats.users = by_user.len() as u64;

    let mut out = Vec::new();
    for (user, mut track) in by_user {
        // stable: equal timestamps keep input order
        track.sort_by_key(|&(t, _)| t);
        let mut iter = track.into_iter();
        let Some((mut t_cur, mut p_cur)) = iter.next() else { continue };
        for (t, p) in iter {
            if p == p_cur {
                stats.collapsed_stationary += 1;
                t_cur = t;
                continue;
            }
            let broken = opts.max_gap_seconds.is_some_and(|gap| t - t_cur > gap);
            if broken {
                stats.gap_breaks += 1;
            } else {
                out.push(MovementRecord {
                    user,
                    src: p_cur,
                    dst: p,
                    t_src: t_cur,
                    t_dst: t,
                });
            }
            t_cur = t;
            p_cur = p;
        }
    }
    (out, stats)
}

pub fn format_movement(m: &MovementRecord) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        m.user, m.t_src, m.t_dst, m.src.lon, m.src.lat, m.dst.lon, m.dst.lat
    )
}

pub fn write_movements<W: Write>(mut out: W, movements: &[MovementRecord]) -> Result<()> {
    let mut buf = String::with_capacity(64 * (movements.len() + 1));
    buf.push_str(MOVEMENT_HEADER);
    buf.push('\n');
    for m in movements {
        buf.push_str(&format_movement(m));
        buf.push('\n');
    }
    out.write_all(buf.as_bytes()).ctx(|| "writing movements".into())
}

/// Parse one movement CSV line. Returns `Ok(None)` for the header and blank
/// lines.
pub fn parse_movement_line(line: &str) -> Result<Option<MovementRecord>> {
    let line = line.trim_end_matches(['\r', '\n']);
    if line.is_empty() || line.starts_with("user_id") {
        return Ok(None);
    }
    let bad = |why: &str| Error::parse("movement CSV", format!("{why}: `{line}`"));
    let mut it = line.split(',');
    let mut next = |name: &str| it.next().ok_or_else(|| bad(&format!("missing {name}")));
    let user = next("user_id")?.parse::<u64>().map_err(|_| bad("user_id"))?;
    let t_src = next("t_src")?.parse::<i64>().map_err(|_| bad("t_src"))?;
    let t_dst = next("t_dst")?.parse::<i64>().map_err(|_| bad("t_dst"))?;
    let mut coord = |name: &str| -> Result<f64> { next(name)?.parse::<f64>().map_err(|_| bad(name)) };
    let (lon_s, lat_s, lon_d, lat_d) = (coord("lon_s")?, coord("lat_s")?, coord("lon_d")?, coord("lat_d")?);
    if it.next().is_some() {
        return Err(bad("too many fields"));
    }
    if t_src > t_dst {
        return Err(bad("t_src after t_dst"));
    }
    Ok(Some(MovementRecord {
        user,
        src: GeoPoint::new(lon_s, lat_s).map_err(|_| bad("source point"))?,
        dst: GeoPoint::new(lon_d, lat_d).map_err(|_| bad("target point"))?,
        t_src,
        t_dst,
    }))
}

pub fn read_movements<R: BufRead>(input: R) -> Result<Vec<MovementRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line.ctx(|| "reading movements".into())?;
        if let Some(m) = parse_movement_line(&line)? {
            out.push(m);
        }
    }
    Ok(out)
}
