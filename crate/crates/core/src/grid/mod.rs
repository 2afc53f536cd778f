//! Grid tessellation, demand rasterization, region adjacency and calendar features.
//!
//! Cells are indexed row-major: row 0 sits on the minimum-latitude edge, column 0 on the
//! minimum-longitude edge. Cell intervals are half-open `[lo, hi)` except along the global
//! maximum edges, which close onto the last row/column.

mod calendar;
mod graph;
pub mod io;
mod scale;

pub use calendar::{temporal_key, temporal_keys, DayType, DayTypeScheme, HolidayCalendar, TemporalKey, DAYS_PER_WEEK};
pub use graph::{build_graph, GridDims, RegionGraph};
pub use scale::{fit_scale, node_features, ScalePolicy};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogKind {
    Pickup,
    Dropoff,
}

impl LogKind {
    pub fn code(self) -> u32 {
        match self {
            LogKind::Pickup => 0,
            LogKind::Dropoff => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(LogKind::Pickup),
            1 => Some(LogKind::Dropoff),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LogKind::Pickup => "pickup",
            LogKind::Dropoff => "dropoff",
        }
    }
}

impl std::str::FromStr for LogKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "pickup" => Ok(LogKind::Pickup),
            "dropoff" => Ok(LogKind::Dropoff),
            other => Err(Error::Data(format!("unknown log kind {other:?}"))),
        }
    }
}

/// One demand record: when and where a pick-up or drop-off happened.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemandLog {
    /// UTC seconds since the epoch.
    pub timestamp: i64,
    pub lat: f64,
    pub lon: f64,
    pub kind: LogKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_lat: f64,
    pub max_lat: f64,
    pub min_lon: f64,
    pub max_lon: f64,
}

fn default_interval_len() -> i64 {
    1800
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub bbox: BoundingBox,
    pub rows: usize,
    pub cols: usize,
    #[serde(default = "default_interval_len")]
    pub interval_len: i64,
    pub period_start: DateTime<Utc>,
    pub period_end: DateTime<Utc>,
    /// Fixed offset added to UTC to obtain local wall-clock time. No DST.
    #[serde(default)]
    pub utc_offset: i64,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidSpec(format!(
                "grid must have at least one row and column, got {}x{}",
                self.rows, self.cols
            )));
        }
        if self.interval_len <= 0 {
            return Err(Error::InvalidSpec(format!("interval_len must be positive, got {}", self.interval_len)));
        }
        if self.period_end <= self.period_start {
            return Err(Error::InvalidSpec("period_end must be after period_start".into()));
        }
        let b = &self.bbox;
        let finite = [b.min_lat, b.max_lat, b.min_lon, b.max_lon].iter().all(|v| v.is_finite());
        if !finite || b.min_lat < -90.0 || b.max_lat > 90.0 || b.min_lon < -180.0 || b.max_lon > 180.0 {
            return Err(Error::InvalidSpec(format!("bounding box out of range: {b:?}")));
        }
        if !(b.max_lat > b.min_lat && b.max_lon > b.min_lon) {
            return Err(Error::InvalidSpec(format!("bounding box has zero area: {b:?}")));
        }
        if self.n_intervals() == 0 {
            return Err(Error::InvalidSpec("period shorter than one interval".into()));
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.rows * self.cols
    }

    pub fn dims(&self) -> GridDims {
        GridDims::new(self.rows, self.cols)
    }

    pub fn n_intervals(&self) -> usize {
        let span = self.period_end.timestamp() - self.period_start.timestamp();
        if span <= 0 || self.interval_len <= 0 {
            0
        } else {
            (span / self.interval_len) as usize
        }
    }

    pub fn interval_start(&self, t: usize) -> i64 {
        self.period_start.timestamp() + t as i64 * self.interval_len
    }

    pub fn interval_of(&self, timestamp: i64) -> Option<usize> {
        let offset = timestamp - self.period_start.timestamp();
        if offset < 0 {
            return None;
        }
        let t = (offset / self.interval_len) as usize;
        (t < self.n_intervals()).then_some(t)
    }

    pub fn lat_edge(&self, r: usize) -> f64 {
        let b = &self.bbox;
        if r >= self.rows {
            b.max_lat
        } else {
            b.min_lat + (b.max_lat - b.min_lat) * r as f64 / self.rows as f64
        }
    }

    pub fn lon_edge(&self, c: usize) -> f64 {
        let b = &self.bbox;
        if c >= self.cols {
            b.max_lon
        } else {
            b.min_lon + (b.max_lon - b.min_lon) * c as f64 / self.cols as f64
        }
    }

    pub fn row_of(&self, lat: f64) -> Option<usize> {
        locate(lat, self.bbox.min_lat, self.bbox.max_lat, self.rows, |r| self.lat_edge(r))
    }

    pub fn col_of(&self, lon: f64) -> Option<usize> {
        locate(lon, self.bbox.min_lon, self.bbox.max_lon, self.cols, |c| self.lon_edge(c))
    }

    pub fn cell_of(&self, lat: f64, lon: f64) -> Option<usize> {
        Some(self.row_of(lat)? * self.cols + self.col_of(lon)?)
    }
}

/// Finds the bin `k` with `edge(k) <= x < edge(k + 1)`, closing the last bin at `hi`.
fn locate(x: f64, lo: f64, hi: f64, bins: usize, edge: impl Fn(usize) -> f64) -> Option<usize> {
    if !(x >= lo && x <= hi) {
        return None;
    }
    if x == hi {
        return Some(bins - 1);
    }
    let guess = ((x - lo) / (hi - lo) * bins as f64).floor();
    let mut k = (guess.max(0.0) as usize).min(bins - 1);
    while k > 0 && x < edge(k) {
        k -= 1;
    }
    while k + 1 < bins && x >= edge(k + 1) {
        k += 1;
    }
    Some(k)
}

/// Interval-by-region event counts, row-major by time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DemandTensor {
    kind: LogKind,
    periods: usize,
    nodes: usize,
    values: Vec<u32>,
}

impl DemandTensor {
    pub fn zeros(kind: LogKind, periods: usize, nodes: usize) -> Self {
        Self {
            kind,
            periods,
            nodes,
            values: vec![0; periods * nodes],
        }
    }

    pub fn from_vec(kind: LogKind, periods: usize, nodes: usize, values: Vec<u32>) -> Result<Self> {
        if values.len() != periods * nodes {
            return Err(Error::shape(
                "DemandTensor::from_vec",
                format!("{} values for {periods}x{nodes}", values.len()),
            ));
        }
        Ok(Self {
            kind,
            periods,
            nodes,
            values,
        })
    }

    pub fn kind(&self) -> LogKind {
        self.kind
    }

    pub fn periods(&self) -> usize {
        self.periods
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    #[inline]
    pub fn get(&self, t: usize, node: usize) -> u32 {
        self.values[t * self.nodes + node]
    }

    #[inline]
    pub fn set(&mut self, t: usize, node: usize, v: u32) {
        self.values[t * self.nodes + node] = v;
    }

    pub fn row(&self, t: usize) -> &[u32] {
        &self.values[t * self.nodes..(t + 1) * self.nodes]
    }

    pub fn total(&self) -> u64 {
        self.values.iter().map(|&v| v as u64).sum()
    }
}

#[derive(Debug, Clone)]
pub struct Rasterized {
    pub tensor: DemandTensor,
    /// Logs of the requested kind that fell outside the bounding box or period.
    pub dropped: usize,
}

/// Counts logs of `kind` per (interval, cell).
pub fn rasterize(logs: &[DemandLog], spec: &GridSpec, kind: LogKind) -> Result<Rasterized> {
    spec.validate()?;
    let mut tensor = DemandTensor::zeros(kind, spec.n_intervals(), spec.n_nodes());
    let mut dropped = 0;
    for log in logs.iter().filter(|l| l.kind == kind) {
        match (spec.interval_of(log.timestamp), spec.cell_of(log.lat, log.lon)) {
            (Some(t), Some(cell)) => tensor.values[t * tensor.nodes + cell] += 1,
            _ => dropped += 1,
        }
    }
    Ok(Rasterized { tensor, dropped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn spec(rows: usize, cols: usize, intervals: i64) -> GridSpec {
        let start = Utc.with_ymd_and_hms(2015, 1, 5, 0, 0, 0).unwrap();
        GridSpec {
            bbox: BoundingBox {
                min_lat: 40.0,
                max_lat: 41.0,
                min_lon: -74.0,
                max_lon: -73.0,
            },
            rows,
            cols,
            interval_len: 1800,
            period_start: start,
            period_end: start + chrono::Duration::seconds(1800 * intervals),
            utc_offset: 0,
        }
    }

    fn log(ts: i64, lat: f64, lon: f64) -> DemandLog {
        DemandLog {
            timestamp: ts,
            lat,
            lon,
            kind: LogKind::Pickup,
        }
    }

    #[test]
    fn single_cell_identity() {
        let s = spec(1, 1, 1);
        let t0 = s.period_start.timestamp();
        let r = rasterize(&[log(t0 + 10, 40.5, -73.5)], &s, LogKind::Pickup).unwrap();
        assert_eq!(r.tensor.values(), &[1]);
        assert_eq!(r.dropped, 0);
    }

    #[test]
    fn empty_logs_give_zero_tensor() {
        let s = spec(3, 4, 5);
        let r = rasterize(&[], &s, LogKind::Pickup).unwrap();
        assert_eq!(r.tensor.periods(), 5);
        assert_eq!(r.tensor.nodes(), 12);
        assert!(r.tensor.values().iter().all(|&v| v == 0));
    }

    #[test]
    fn zero_area_bbox_is_rejected() {
        let mut s = spec(2, 2, 2);
        s.bbox.max_lat = s.bbox.min_lat;
        assert!(matches!(rasterize(&[], &s, LogKind::Pickup), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn boundary_points_follow_half_open_rule() {
        let s = spec(2, 2, 1);
        // interior edge belongs to the next cell
        assert_eq!(s.row_of(40.5), Some(1));
        assert_eq!(s.col_of(-73.5), Some(1));
        // global max edges close onto the last cell
        assert_eq!(s.cell_of(41.0, -73.0), Some(3));
        assert_eq!(s.cell_of(40.0, -74.0), Some(0));
        assert_eq!(s.cell_of(41.000001, -73.5), None);
    }

    #[test]
    fn out_of_period_and_bounds_are_dropped() {
        let s = spec(2, 2, 2);
        let t0 = s.period_start.timestamp();
        let logs = [
            log(t0 - 1, 40.2, -73.8),
            log(t0 + 3600, 40.2, -73.8),
            log(t0, 39.0, -73.8),
            log(t0 + 3599, 40.2, -73.8),
            DemandLog {
                kind: LogKind::Dropoff,
                ..log(t0, 40.2, -73.8)
            },
        ];
        let r = rasterize(&logs, &s, LogKind::Pickup).unwrap();
        assert_eq!(r.dropped, 3);
        assert_eq!(r.tensor.total(), 1);
        assert_eq!(r.tensor.get(1, 0), 1);
    }

    #[test]
    fn scattered_logs_match_brute_force_classification() {
        let s = spec(2, 2, 2);
        let t0 = s.period_start.timestamp();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logs: Vec<_> = (0..10)
            .map(|_| log(t0 + rng.random_range(0..3600), rng.random_range(40.0..41.0), rng.random_range(-74.0..-73.0)))
            .collect();
        let r = rasterize(&logs, &s, LogKind::Pickup).unwrap();

        // Oracle: test each log against every cell's explicit bounds.
        let mut expected = vec![0u32; 2 * 4];
        for l in &logs {
            let t = ((l.timestamp - t0) / 1800) as usize;
            for row in 0..2 {
                let (lo, hi) = (40.0 + 0.5 * row as f64, 40.5 + 0.5 * row as f64);
                for col in 0..2 {
                    let (wlo, whi) = (-74.0 + 0.5 * col as f64, -73.5 + 0.5 * col as f64);
                    if l.lat >= lo && l.lat < hi && l.lon >= wlo && l.lon < whi {
                        expected[t * 4 + row * 2 + col] += 1;
                    }
                }
            }
        }
        assert_eq!(r.tensor.values(), &expected[..]);
        assert_eq!(r.tensor.total(), 10);
    }

    proptest::proptest! {
        #[test]
        fn rasterize_conserves_counts(seed in 0u64..10_000, rows in 1usize..6, cols in 1usize..6) {
            let s = spec(rows, cols, 4);
            let t0 = s.period_start.timestamp();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logs: Vec<_> = (0..200)
                .map(|_| log(t0 + rng.random_range(-1000..8200), rng.random_range(39.9..41.1), rng.random_range(-74.1..-72.9)))
                .collect();
            let r = rasterize(&logs, &s, LogKind::Pickup).unwrap();
            proptest::prop_assert_eq!(r.tensor.total() as usize + r.dropped, logs.len());
        }
    }
}
