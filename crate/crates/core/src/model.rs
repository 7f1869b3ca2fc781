//! Geodesic and grid arithmetic shared by every pipeline stage.
//!
//! Levels are numbered from 1 (coarsest) to `L` (finest). Cell edges grow
//! by an integer factor per level, starting from a base length in
//! arc-seconds at the finest level.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Length of one degree of meridian on the sphere.
pub const KM_PER_DEGREE: f64 = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;

// Cell counts are computed with ceil(); this keeps 6.0 / 1.5 at 4 columns
// even when the quotient comes out a few ulps high.
const CEIL_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
}

impl GeoPoint {
    pub fn new(lon: f64, lat: f64) -> Result<Self> {
        if !lon.is_finite() || !lat.is_finite() || lon.abs() > 180.0 || lat.abs() > 90.0 {
            return Err(Error::InvalidPoint { lon, lat });
        }
        Ok(GeoPoint { lon, lat })
    }
}

/// Great-circle distance in kilometres (haversine on a sphere of radius
/// [`EARTH_RADIUS_KM`]).
pub fn great_circle_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Axis-aligned lon/lat rectangle. Never crosses the antimeridian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct Region {
    pub lon_min: f64,
    pub lat_min: f64,
    pub lon_max: f64,
    pub lat_max: f64,
}

impl Region {
    pub fn new(lon_min: f64, lat_min: f64, lon_max: f64, lat_max: f64) -> Result<Self> {
        let all = [lon_min, lat_min, lon_max, lat_max];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidRegion("non-finite bound".into()));
        }
        if !(lon_min < lon_max && lat_min < lat_max) {
            return Err(Error::InvalidRegion(format!(
                "[{lon_min}, {lat_min}, {lon_max}, {lat_max}] must satisfy min < max on both axes"
            )));
        }
        if lon_min < -180.0 || lon_max > 180.0 || lat_min < -90.0 || lat_max > 90.0 {
            return Err(Error::InvalidRegion(format!(
                "[{lon_min}, {lat_min}, {lon_max}, {lat_max}] exceeds world bounds"
            )));
        }
        Ok(Region {
            lon_min,
            lat_min,
            lon_max,
            lat_max,
        })
    }

    /// Unchecked constructor for rectangles derived from a valid region.
    pub(crate) fn from_bounds(lon_min: f64, lat_min: f64, lon_max: f64, lat_max: f64) -> Self {
        Region {
            lon_min,
            lat_min,
            lon_max,
            lat_max,
        }
    }

    pub fn width(&self) -> f64 {
        self.lon_max - self.lon_min
    }

    pub fn height(&self) -> f64 {
        self.lat_max - self.lat_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Closed containment.
    pub fn contains(&self, p: GeoPoint) -> bool {
        p.lon >= self.lon_min && p.lon <= self.lon_max && p.lat >= self.lat_min && p.lat <= self.lat_max
    }

    /// Closed-rectangle intersection test.
    pub fn intersects(&self, other: &Region) -> bool {
        self.lon_min <= other.lon_max
            && other.lon_min <= self.lon_max
            && self.lat_min <= other.lat_max
            && other.lat_min <= self.lat_max
    }

    pub fn center(&self) -> GeoPoint {
        GeoPoint {
            lon: (self.lon_min + self.lon_max) / 2.0,
            lat: (self.lat_min + self.lat_max) / 2.0,
        }
    }

    pub fn max_abs_lat(&self) -> f64 {
        self.lat_min.abs().max(self.lat_max.abs())
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.lon_min, self.lat_min, self.lon_max, self.lat_max]
    }
}

impl From<Region> for [f64; 4] {
    fn from(r: Region) -> Self {
        r.to_array()
    }
}

impl TryFrom<[f64; 4]> for Region {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Region::new(v[0], v[1], v[2], v[3])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellId {
    pub level: u32,
    pub index: u64,
}

impl CellId {
    pub fn new(level: u32, index: u64) -> Self {
        CellId { level, index }
    }
}

/// On-disk grid configuration, shared by every stage and the query service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub region: Region,
    pub levels: u32,
    pub base_cell_arcsec: f64,
    #[serde(default = "default_growth")]
    pub growth: u32,
}

fn default_growth() -> u32 {
    2
}

impl GridConfig {
    /// North America at ten levels of 30 arc-second base cells.
    pub fn north_america() -> Self {
        GridConfig {
            region: Region::from_bounds(-170.0, 10.0, -50.0, 75.0),
            levels: 10,
            base_cell_arcsec: 30.0,
            growth: 2,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).ctx(|| format!("reading grid config {}", path.display()))?;
        let cfg: GridConfig = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").ctx(|| format!("writing grid config {}", path.display()))
    }
}

#[derive(Debug, Clone, Copy)]
struct LevelShape {
    cell_deg: f64,
    cols: u64,
    rows: u64,
}

/// Region plus `L` levels of uniform cells. Owns all cell-id arithmetic.
#[derive(Debug, Clone)]
pub struct GridHierarchy {
    config: GridConfig,
    shapes: Vec<LevelShape>,
}

impl GridHierarchy {
    pub fn new(config: GridConfig) -> Result<Self> {
        let r = config.region;
        Region::new(r.lon_min, r.lat_min, r.lon_max, r.lat_max)?;
        if config.levels == 0 || config.levels > 32 {
            return Err(Error::InvalidGrid(format!("levels must be in 1..=32, got {}", config.levels)));
        }
        if !(config.base_cell_arcsec.is_finite() && config.base_cell_arcsec > 0.0) {
            return Err(Error::InvalidGrid("base_cell_arcsec must be positive".into()));
        }
        if config.growth < 1 {
            return Err(Error::InvalidGrid("growth must be >= 1".into()));
        }
        let mut shapes = Vec::with_capacity(config.levels as usize);
        for level in 1..=config.levels {
            let factor = (config.growth as f64).powi((config.levels - level) as i32);
            let cell_deg = config.base_cell_arcsec * factor / 3600.0;
            let cols = ((r.width() / cell_deg) - CEIL_SLACK).ceil().max(1.0) as u64;
            let rows = ((r.height() / cell_deg) - CEIL_SLACK).ceil().max(1.0) as u64;
            if cols.checked_mul(rows).is_none() {
                return Err(Error::InvalidGrid(format!("level {level} has too many cells")));
            }
            shapes.push(LevelShape { cell_deg, cols, rows });
        }
        Ok(GridHierarchy { config, shapes })
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn region(&self) -> Region {
        self.config.region
    }

    pub fn levels(&self) -> u32 {
        self.config.levels
    }

    fn shape(&self, level: u32) -> Result<&LevelShape> {
        if level == 0 || level > self.config.levels {
            return Err(Error::LevelOutOfRange {
                level,
                levels: self.config.levels,
            });
        }
        Ok(&self.shapes[(level - 1) as usize])
    }

    pub fn check_level(&self, level: u32) -> Result<()> {
        self.shape(level).map(|_| ())
    }

    pub fn cell_len_deg(&self, level: u32) -> Result<f64> {
        Ok(self.shape(level)?.cell_deg)
    }

    /// Nominal cell edge length in km: the arc-second length measured along
    /// a meridian.
    pub fn cell_len_km(&self, level: u32) -> Result<f64> {
        Ok(self.shape(level)?.cell_deg * KM_PER_DEGREE)
    }

    /// (cols, rows) at a level.
    pub fn dims(&self, level: u32) -> Result<(u64, u64)> {
        let s = self.shape(level)?;
        Ok((s.cols, s.rows))
    }

    pub fn cell_count(&self, level: u32) -> Result<u64> {
        let (c, r) = self.dims(level)?;
        Ok(c * r)
    }

    /// Row-major cell containing `p`. Points on the region's max edges are
    /// clamped into the last row/column.
    pub fn cell_id(&self, p: GeoPoint, level: u32) -> Result<CellId> {
        let s = self.shape(level)?;
        let r = &self.config.region;
        if !r.contains(p) {
            return Err(Error::OutOfRegion(p));
        }
        let col = (((p.lon - r.lon_min) / s.cell_deg).floor() as u64).min(s.cols - 1);
        let row = (((p.lat - r.lat_min) / s.cell_deg).floor() as u64).min(s.rows - 1);
        Ok(CellId::new(level, row * s.cols + col))
    }

    /// Cell rectangle (clipped to the region) and its center.
    pub fn cell_centroid_bounds(&self, cell: CellId) -> Result<(GeoPoint, Region)> {
        let s = self.shape(cell.level)?;
        if cell.index >= s.cols * s.rows {
            return Err(Error::CellOutOfRange(cell));
        }
        let r = &self.config.region;
        let (row, col) = (cell.index / s.cols, cell.index % s.cols);
        let lon0 = r.lon_min + col as f64 * s.cell_deg;
        let lat0 = r.lat_min + row as f64 * s.cell_deg;
        let lon1 = if col + 1 == s.cols { r.lon_max } else { (r.lon_min + (col + 1) as f64 * s.cell_deg).min(r.lon_max) };
        let lat1 = if row + 1 == s.rows { r.lat_max } else { (r.lat_min + (row + 1) as f64 * s.cell_deg).min(r.lat_max) };
        let bounds = Region::from_bounds(lon0, lat0, lon1, lat1);
        Ok((bounds.center(), bounds))
    }

    pub fn cell_center(&self, cell: CellId) -> Result<GeoPoint> {
        self.cell_centroid_bounds(cell).map(|(c, _)| c)
    }

    /// Degree half-widths `(lon, lat)` of a window that contains every point
    /// within `radius_km` of any point in the region.
    pub fn window_for_radius(&self, radius_km: f64) -> (f64, f64) {
        let angular = radius_km / EARTH_RADIUS_KM;
        let lat_off = angular.to_degrees();
        let max_lat = self.config.region.max_abs_lat().to_radians();
        let ratio = angular.sin() / max_lat.cos();
        let lon_off = if angular >= std::f64::consts::FRAC_PI_2 || ratio >= 1.0 {
            360.0
        } else {
            ratio.asin().to_degrees()
        };
        // a few ulps of headroom so boundary neighbours survive rounding
        (lon_off * (1.0 + 1e-9) + 1e-12, lat_off * (1.0 + 1e-9) + 1e-12)
    }
}

/// One directed trip of one user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MovementRecord {
    pub user: u64,
    pub src: GeoPoint,
    pub dst: GeoPoint,
    pub t_src: i64,
    pub t_dst: i64,
}

impl MovementRecord {
    pub fn travel_time(&self) -> i64 {
        self.t_dst - self.t_src
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn six_degree_grid() -> GridHierarchy {
        GridHierarchy::new(GridConfig {
            region: Region::new(0.0, 0.0, 6.0, 6.0).unwrap(),
            levels: 1,
            base_cell_arcsec: 1.5 * 3600.0,
            growth: 2,
        })
        .unwrap()
    }

    fn pt(lon: f64, lat: f64) -> GeoPoint {
        GeoPoint::new(lon, lat).unwrap()
    }

    #[test]
    fn cell_id_examples() {
        let g = six_degree_grid();
        assert_eq!(g.dims(1).unwrap(), (4, 4));
        assert_eq!(g.cell_id(pt(0.1, 0.1), 1).unwrap().index, 0);
        assert_eq!(g.cell_id(pt(5.9, 5.9), 1).unwrap().index, 15);
        assert_eq!(g.cell_id(pt(6.0, 3.0), 1).unwrap().index, 11);
    }

    #[test]
    fn cell_id_rejects_outside_points_and_bad_levels() {
        let g = six_degree_grid();
        assert!(matches!(g.cell_id(pt(6.01, 3.0), 1), Err(Error::OutOfRegion(_))));
        assert!(matches!(g.cell_id(pt(3.0, 3.0), 2), Err(Error::LevelOutOfRange { .. })));
        assert!(matches!(g.cell_id(pt(3.0, 3.0), 0), Err(Error::LevelOutOfRange { .. })));
    }

    #[test]
    fn centroid_examples() {
        let g = six_degree_grid();
        let (c0, b0) = g.cell_centroid_bounds(CellId::new(1, 0)).unwrap();
        assert_eq!((c0.lon, c0.lat), (0.75, 0.75));
        assert_eq!(b0.to_array(), [0.0, 0.0, 1.5, 1.5]);
        let (c15, _) = g.cell_centroid_bounds(CellId::new(1, 15)).unwrap();
        assert_eq!((c15.lon, c15.lat), (5.25, 5.25));
        assert!(matches!(
            g.cell_centroid_bounds(CellId::new(1, 16)),
            Err(Error::CellOutOfRange(_))
        ));
    }

    #[test]
    fn partial_edge_cells_are_clipped() {
        let g = GridHierarchy::new(GridConfig {
            region: Region::new(0.0, 0.0, 5.0, 1.0).unwrap(),
            levels: 1,
            base_cell_arcsec: 2.0 * 3600.0,
            growth: 2,
        })
        .unwrap();
        assert_eq!(g.dims(1).unwrap(), (3, 1));
        let (c, b) = g.cell_centroid_bounds(CellId::new(1, 2)).unwrap();
        assert_eq!(b.to_array(), [4.0, 0.0, 5.0, 1.0]);
        assert_eq!(g.cell_id(c, 1).unwrap().index, 2);
    }

    #[test]
    fn haversine_examples() {
        assert_eq!(great_circle_km(pt(0.0, 0.0), pt(0.0, 0.0)), 0.0);
        assert!((great_circle_km(pt(0.0, 0.0), pt(0.0, 1.0)) - 111.195).abs() < 1e-3);
        // independent spherical law-of-cosines route for a mid-latitude pair
        let (a, b) = (pt(-88.0, 40.0), pt(-87.0, 41.0));
        let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
        let dl = (b.lon - a.lon).to_radians();
        let central = (p1.sin() * p2.sin() + p1.cos() * p2.cos() * dl.cos()).acos();
        let expected = EARTH_RADIUS_KM * central;
        let got = great_circle_km(a, b);
        assert!(((got - expected) / expected).abs() < 1e-6, "{got} vs {expected}");
    }

    #[test]
    fn cell_lengths_follow_the_arcsecond_base() {
        let g = GridHierarchy::new(GridConfig::north_america()).unwrap();
        let finest = g.cell_len_km(10).unwrap();
        assert!((finest - 0.9266).abs() < 1e-3, "{finest}");
        let coarsest = g.cell_len_km(1).unwrap();
        assert!((coarsest - 474.47).abs() < 0.1, "{coarsest}");
        for l in 1..10 {
            let ratio = g.cell_len_km(l).unwrap() / g.cell_len_km(l + 1).unwrap();
            assert!((ratio - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_config_json_shape() {
        let cfg: GridConfig =
            serde_json::from_str(r#"{"region":[-10,-5,10,5],"levels":3,"base_cell_arcsec":30,"growth":2}"#).unwrap();
        assert_eq!(cfg.region.to_array(), [-10.0, -5.0, 10.0, 5.0]);
        let back = serde_json::to_value(&cfg).unwrap();
        assert_eq!(back["region"], serde_json::json!([-10.0, -5.0, 10.0, 5.0]));
        assert!(serde_json::from_str::<GridConfig>(r#"{"region":[1,0,0,5],"levels":3,"base_cell_arcsec":30}"#).is_err());
    }

    #[test]
    fn radius_window_contains_disc() {
        let g = GridHierarchy::new(GridConfig::north_america()).unwrap();
        let radius = 300.0;
        let (dlon, dlat) = g.window_for_radius(radius);
        // walk the circle around a high-latitude center and check the window
        let c = pt(-100.0, 74.0);
        for i in 0..360 {
            let bearing = (i as f64).to_radians();
            let d = radius / EARTH_RADIUS_KM * 0.999_999;
            let lat1 = c.lat.to_radians();
            let lat2 = (lat1.sin() * d.cos() + lat1.cos() * d.sin() * bearing.cos()).asin();
            let lon2 = c.lon.to_radians()
                + (bearing.sin() * d.sin() * lat1.cos()).atan2(d.cos() - lat1.sin() * lat2.sin());
            let q = GeoPoint { lon: lon2.to_degrees(), lat: lat2.to_degrees() };
            assert!((q.lon - c.lon).abs() <= dlon, "bearing {i}");
            assert!((q.lat - c.lat).abs() <= dlat, "bearing {i}");
        }
    }

    proptest! {
        #[test]
        fn centroid_round_trip(lon in -170.0f64..=-50.0, lat in 10.0f64..=75.0, level in 1u32..=10) {
            let g = GridHierarchy::new(GridConfig::north_america()).unwrap();
            let p = pt(lon, lat);
            let c = g.cell_id(p, level).unwrap();
            let (center, bounds) = g.cell_centroid_bounds(c).unwrap();
            prop_assert_eq!(g.cell_id(center, level).unwrap(), c);
            prop_assert!(bounds.contains(p));
        }

        #[test]
        fn cells_nest_across_levels(lon in -170.0f64..=-50.0, lat in 10.0f64..=75.0, level in 1u32..10) {
            let g = GridHierarchy::new(GridConfig::north_america()).unwrap();
            let p = pt(lon, lat);
            let (_, outer) = g.cell_centroid_bounds(g.cell_id(p, level).unwrap()).unwrap();
            let (_, inner) = g.cell_centroid_bounds(g.cell_id(p, level + 1).unwrap()).unwrap();
            let eps = 1e-9;
            prop_assert!(inner.lon_min >= outer.lon_min - eps && inner.lon_max <= outer.lon_max + eps);
            prop_assert!(inner.lat_min >= outer.lat_min - eps && inner.lat_max <= outer.lat_max + eps);
        }

        #[test]
        fn haversine_metric(a in (-180.0f64..180.0, -90.0f64..90.0),
                            b in (-180.0f64..180.0, -90.0f64..90.0),
                            c in (-180.0f64..180.0, -90.0f64..90.0)) {
            let (a, b, c) = (pt(a.0, a.1), pt(b.0, b.1), pt(c.0, c.1));
            let ab = great_circle_km(a, b);
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - great_circle_km(b, a)).abs() < 1e-9);
            prop_assert!(great_circle_km(a, c) <= ab + great_circle_km(b, c) + 1e-9);
        }
    }
}
