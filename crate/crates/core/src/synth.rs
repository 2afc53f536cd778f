//! Seeded synthetic demand with known calendar structure, spatial hotspots and labelled
//! surge events whose drop-offs arrive ahead of the pick-ups.

use std::path::Path;

use chrono::{Duration, NaiveDate, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    temporal_keys, BoundingBox, DayType, DayTypeScheme, DemandLog, DemandTensor, GridSpec, HolidayCalendar, LogKind,
    TemporalKey, SECONDS_PER_DAY,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hotspot {
    pub row: usize,
    pub col: usize,
    /// Gaussian radius in cells.
    pub radius: f64,
    /// Peak multiplicative boost: the centre cell's rate is scaled by `1 + intensity`.
    pub intensity: f64,
}

/// A surge of `magnitude` extra pick-ups per interval at `node` during
/// `start .. start + duration`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub node: usize,
    pub start: usize,
    pub duration: usize,
    pub magnitude: f64,
}

/// Events drawn at generation time in addition to the listed ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomEvents {
    /// Expected number of events per day over the whole grid.
    pub per_day: f64,
    pub min_magnitude: f64,
    pub max_magnitude: f64,
    pub min_duration: usize,
    pub max_duration: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Noise {
    /// Counts are Poisson draws around the rate.
    #[default]
    Poisson,
    /// Counts are the rounded rates.
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub rows: usize,
    pub cols: usize,
    pub n_days: usize,
    pub interval_len: i64,
    /// Local calendar date of the first interval.
    pub start_date: NaiveDate,
    pub utc_offset: i64,
    pub holidays: Vec<NaiveDate>,
    pub bbox: BoundingBox,
    /// Per-region base rate; empty means `base_rate` everywhere.
    pub base_rates: Vec<f64>,
    pub base_rate: f64,
    /// Time-of-day shape, one entry per slot. Empty means flat.
    pub daily_profile: Vec<f64>,
    /// Shape used on weekends and holidays; `None` reuses `daily_profile`.
    pub weekend_profile: Option<Vec<f64>>,
    pub workday_multiplier: f64,
    pub weekend_multiplier: f64,
    pub holiday_multiplier: f64,
    pub hotspots: Vec<Hotspot>,
    pub events: Vec<Event>,
    pub random_events: Option<RandomEvents>,
    /// Drop-off rate as a fraction of the pick-up background rate.
    pub dropoff_ratio: f64,
    /// Intervals by which event drop-offs precede the pick-up surge.
    pub dropoff_lag: usize,
    /// Drop-off surge as a fraction of the event magnitude.
    pub dropoff_coupling: f64,
    pub noise: Noise,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            rows: 4,
            cols: 4,
            n_days: 14,
            interval_len: 1800,
            start_date: NaiveDate::from_ymd_opt(2016, 1, 4).expect("valid date"),
            utc_offset: 0,
            holidays: Vec::new(),
            bbox: BoundingBox {
                min_lat: 40.70,
                max_lat: 40.80,
                min_lon: -74.02,
                max_lon: -73.93,
            },
            base_rates: Vec::new(),
            base_rate: 10.0,
            daily_profile: Vec::new(),
            weekend_profile: None,
            workday_multiplier: 1.0,
            weekend_multiplier: 1.0,
            holiday_multiplier: 1.0,
            hotspots: Vec::new(),
            events: Vec::new(),
            random_events: None,
            dropoff_ratio: 1.0,
            dropoff_lag: 2,
            dropoff_coupling: 0.0,
            noise: Noise::Poisson,
            seed: 0,
        }
    }
}

/// Named presets accepted on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    NycTaxiLike,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nyc-taxi-like" => Ok(Preset::NycTaxiLike),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

/// Target mean pick-ups per region and interval for the taxi-like preset.
pub const NYC_LIKE_MEAN: f64 = 38.8;

/// Two-peak weekday shape and a late, single-peak weekend shape over `slots` slots.
pub fn commuter_profiles(slots: usize) -> (Vec<f64>, Vec<f64>) {
    let bump = |h: f64, centre: f64, width: f64| (-(h - centre).powi(2) / (2.0 * width * width)).exp();
    let hour = |s: usize| 24.0 * s as f64 / slots as f64;
    let workday = (0..slots)
        .map(|s| {
            let h = hour(s);
            0.15 + 1.1 * bump(h, 8.5, 1.2) + 1.3 * bump(h, 18.5, 1.8) + 0.6 * bump(h, 13.0, 3.0)
        })
        .collect();
    let weekend = (0..slots)
        .map(|s| {
            let h = hour(s);
            0.25 + 0.9 * bump(h, 14.0, 3.5) + 0.5 * bump(h, 0.5, 1.5) + 0.5 * bump(h, 23.5, 1.5)
        })
        .collect();
    (workday, weekend)
}

impl SynthConfig {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        match preset {
            Preset::NycTaxiLike => Self::nyc_taxi_like(seed),
        }
    }

    /// 10x20 grid over the first 60 days of 2016 with US federal holidays, heavy-tailed
    /// spatial rates and occasional surges, normalised to a mean of [`NYC_LIKE_MEAN`].
    pub fn nyc_taxi_like(seed: u64) -> Self {
        let (rows, cols) = (10, 20);
        let (workday, weekend) = commuter_profiles(48);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_c17e);
        let base_rates: Vec<f64> = (0..rows * cols).map(|_| (rng.random_range(-1.5f64..1.5)).exp()).collect();
        let date = |m, d| NaiveDate::from_ymd_opt(2016, m, d).expect("valid date");
        let mut cfg = Self {
            rows,
            cols,
            n_days: 60,
            start_date: date(1, 1),
            utc_offset: -5 * 3600,
            holidays: vec![date(1, 1), date(1, 18), date(2, 15)],
            base_rates,
            daily_profile: workday,
            weekend_profile: Some(weekend),
            workday_multiplier: 1.0,
            weekend_multiplier: 0.85,
            holiday_multiplier: 0.8,
            hotspots: vec![
                Hotspot {
                    row: 4,
                    col: 9,
                    radius: 1.5,
                    intensity: 12.0,
                },
                Hotspot {
                    row: 6,
                    col: 14,
                    radius: 1.0,
                    intensity: 6.0,
                },
                Hotspot {
                    row: 2,
                    col: 4,
                    radius: 2.0,
                    intensity: 3.0,
                },
            ],
            random_events: Some(RandomEvents {
                per_day: 1.0,
                min_magnitude: 40.0,
                max_magnitude: 200.0,
                min_duration: 2,
                max_duration: 6,
            }),
            dropoff_ratio: 0.95,
            dropoff_lag: 2,
            dropoff_coupling: 0.6,
            seed,
            ..Self::default()
        };
        let mean = cfg.background_mean().unwrap_or(1.0);
        let event_mass = cfg.expected_event_mean();
        let factor = (NYC_LIKE_MEAN - event_mass).max(0.0) / mean;
        cfg.base_rates.iter_mut().for_each(|b| *b *= factor);
        cfg
    }

    pub fn n_nodes(&self) -> usize {
        self.rows * self.cols
    }

    pub fn slots_per_day(&self) -> usize {
        (SECONDS_PER_DAY / self.interval_len.max(1)) as usize
    }

    pub fn n_intervals(&self) -> usize {
        self.n_days * self.slots_per_day()
    }

    pub fn grid_spec(&self) -> GridSpec {
        let midnight = self.start_date.and_hms_opt(0, 0, 0).expect("midnight exists");
        let start = Utc.from_utc_datetime(&midnight) - Duration::seconds(self.utc_offset);
        GridSpec {
            bbox: self.bbox,
            rows: self.rows,
            cols: self.cols,
            interval_len: self.interval_len,
            period_start: start,
            period_end: start + Duration::seconds(self.n_intervals() as i64 * self.interval_len),
            utc_offset: self.utc_offset,
        }
    }

    pub fn calendar(&self) -> HolidayCalendar {
        HolidayCalendar::new(self.holidays.iter().copied())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.rows == 0 || self.cols == 0 || self.n_days == 0 {
            return fail("grid and period must be non-empty".into());
        }
        if self.interval_len <= 0 || SECONDS_PER_DAY % self.interval_len != 0 {
            return fail(format!("interval_len {} must divide a day", self.interval_len));
        }
        let slots = self.slots_per_day();
        if !self.base_rates.is_empty() && self.base_rates.len() != self.n_nodes() {
            return fail(format!("{} base rates for {} regions", self.base_rates.len(), self.n_nodes()));
        }
        for (name, p) in [("daily_profile", Some(&self.daily_profile)), ("weekend_profile", self.weekend_profile.as_ref())] {
            if let Some(p) = p {
                if !p.is_empty() && p.len() != slots {
                    return fail(format!("{name} has {} entries for {slots} slots", p.len()));
                }
            }
        }
        let scalars = [
            self.base_rate,
            self.workday_multiplier,
            self.weekend_multiplier,
            self.holiday_multiplier,
            self.dropoff_ratio,
            self.dropoff_coupling,
        ];
        let mut rates = self
            .base_rates
            .iter()
            .chain(&self.daily_profile)
            .chain(self.weekend_profile.iter().flatten())
            .chain(&scalars);
        if rates.any(|r| !r.is_finite() || *r < 0.0) {
            return fail("rates, profiles and multipliers must be finite and non-negative".into());
        }
        for h in &self.hotspots {
            if h.row >= self.rows || h.col >= self.cols || !(h.radius > 0.0) || h.intensity < 0.0 {
                return fail(format!("invalid hotspot {h:?}"));
            }
        }
        for e in &self.events {
            if e.node >= self.n_nodes() || e.start >= self.n_intervals() || e.magnitude < 0.0 || !e.magnitude.is_finite() {
                return fail(format!("event outside grid or period: {e:?}"));
            }
        }
        if let Some(r) = &self.random_events {
            if r.per_day < 0.0
                || r.min_magnitude < 0.0
                || r.max_magnitude < r.min_magnitude
                || r.min_duration == 0
                || r.max_duration < r.min_duration
            {
                return fail(format!("invalid random event settings {r:?}"));
            }
        }
        self.grid_spec().validate()
    }

    fn base(&self, node: usize) -> f64 {
        if self.base_rates.is_empty() {
            self.base_rate
        } else {
            self.base_rates[node]
        }
    }

    fn hotspot_factor(&self, node: usize) -> f64 {
        let (r, c) = ((node / self.cols) as f64, (node % self.cols) as f64);
        1.0 + self
            .hotspots
            .iter()
            .map(|h| {
                let d2 = (r - h.row as f64).powi(2) + (c - h.col as f64).powi(2);
                h.intensity * (-d2 / (2.0 * h.radius * h.radius)).exp()
            })
            .sum::<f64>()
    }

    /// Background rate for a calendar context, before hotspots and events.
    pub fn context_rate(&self, node: usize, key: &TemporalKey) -> f64 {
        let day_type = key.day_type(DayTypeScheme::ThreeWay);
        let profile = match (day_type, &self.weekend_profile) {
            (DayType::Workday, _) | (_, None) => &self.daily_profile,
            (_, Some(w)) => w,
        };
        let shape = profile.get(key.slot).copied().unwrap_or(1.0);
        let mult = match day_type {
            DayType::Workday => self.workday_multiplier,
            DayType::Weekend => self.weekend_multiplier,
            DayType::Holiday => self.holiday_multiplier,
        };
        self.base(node) * shape * mult * self.hotspot_factor(node)
    }

    fn background_mean(&self) -> Result<f64> {
        let keys = temporal_keys(&self.grid_spec(), &self.calendar())?;
        let n = self.n_nodes();
        let total: f64 = keys.iter().flat_map(|k| (0..n).map(move |i| (i, k))).map(|(i, k)| self.context_rate(i, k)).sum();
        Ok(total / (keys.len() * n) as f64)
    }

    fn expected_event_mean(&self) -> f64 {
        let per_event = |m: f64, d: f64| m * d;
        let listed: f64 = self.events.iter().map(|e| per_event(e.magnitude, e.duration as f64)).sum();
        let random = self.random_events.map_or(0.0, |r| {
            r.per_day
                * self.n_days as f64
                * per_event(
                    0.5 * (r.min_magnitude + r.max_magnitude),
                    0.5 * (r.min_duration + r.max_duration) as f64,
                )
        });
        (listed + random) / (self.n_intervals() * self.n_nodes()) as f64
    }

    /// Listed events plus the seeded random draws, in start order.
    pub fn resolved_events(&self) -> Vec<Event> {
        let mut events = self.events.clone();
        if let Some(r) = self.random_events {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(u64::MAX);
            let p = self.n_intervals();
            let expected = r.per_day * self.n_days as f64;
            let count = if expected > 0.0 {
                Poisson::new(expected).map(|d| d.sample(&mut rng) as usize).unwrap_or(0)
            } else {
                0
            };
            for _ in 0..count {
                events.push(Event {
                    node: rng.random_range(0..self.n_nodes()),
                    start: rng.random_range(0..p),
                    duration: rng.random_range(r.min_duration..=r.max_duration),
                    magnitude: rng.random_range(r.min_magnitude..=r.max_magnitude),
                });
            }
        }
        events.sort_by_key(|e| (e.start, e.node));
        events
    }
}

/// Ground truth accompanying a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthLabels {
    /// `[P * N]`, set where an event is active on the pick-up side.
    pub event_mask: Vec<bool>,
    /// Per interval, `slot * 3 + day type` with workday 0, weekend 1, holiday 2.
    pub contexts: Vec<u32>,
    /// `[P * N]` expected pick-ups.
    pub pickup_rate: Vec<f64>,
    /// `[P * N]` expected drop-offs.
    pub dropoff_rate: Vec<f64>,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub spec: GridSpec,
    pub calendar: HolidayCalendar,
    pub keys: Vec<TemporalKey>,
    pub pickup: DemandTensor,
    pub dropoff: DemandTensor,
    pub labels: SynthLabels,
}

fn context_id(key: &TemporalKey) -> u32 {
    let dt = match key.day_type(DayTypeScheme::ThreeWay) {
        DayType::Workday => 0,
        DayType::Weekend => 1,
        DayType::Holiday => 2,
    };
    (key.slot * 3 + dt) as u32
}

fn draw(rate: f64, noise: Noise, rng: &mut ChaCha8Rng) -> u32 {
    match noise {
        Noise::Deterministic => rate.round() as u32,
        Noise::Poisson if rate > 0.0 => Poisson::new(rate).map(|d| d.sample(rng) as u32).unwrap_or(0),
        Noise::Poisson => 0,
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let spec = cfg.grid_spec();
    let calendar = cfg.calendar();
    let keys = temporal_keys(&spec, &calendar)?;
    let (p, n) = (keys.len(), cfg.n_nodes());
    let events = cfg.resolved_events();

    let mut boost = vec![0.0; p * n];
    let mut event_mask = vec![false; p * n];
    for e in &events {
        for t in e.start..(e.start + e.duration).min(p) {
            boost[t * n + e.node] += e.magnitude;
            event_mask[t * n + e.node] = true;
        }
    }
    let mut pickup_rate = vec![0.0; p * n];
    let mut dropoff_rate = vec![0.0; p * n];
    for (t, key) in keys.iter().enumerate() {
        for i in 0..n {
            let bg = cfg.context_rate(i, key);
            pickup_rate[t * n + i] = bg + boost[t * n + i];
            let lead = boost.get((t + cfg.dropoff_lag) * n + i).copied().unwrap_or(0.0);
            dropoff_rate[t * n + i] = cfg.dropoff_ratio * bg + cfg.dropoff_coupling * lead;
        }
    }

    let mut pickup = DemandTensor::zeros(LogKind::Pickup, p, n);
    let mut dropoff = DemandTensor::zeros(LogKind::Dropoff, p, n);
    for i in 0..n {
        for (kind, rates, tensor) in [(0u64, &pickup_rate, &mut pickup), (1, &dropoff_rate, &mut dropoff)] {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(2 * i as u64 + kind);
            for t in 0..p {
                tensor.set(t, i, draw(rates[t * n + i], cfg.noise, &mut rng));
            }
        }
    }
    Ok(SynthOutput {
        spec,
        calendar,
        labels: SynthLabels {
            event_mask,
            contexts: keys.iter().map(context_id).collect(),
            pickup_rate,
            dropoff_rate,
            events,
        },
        keys,
        pickup,
        dropoff,
    })
}

/// One log per counted unit, uniform within its interval and cell. Rasterising the result
/// with `spec` reproduces `tensor` exactly.
pub fn export_logs(tensor: &DemandTensor, spec: &GridSpec, seed: u64) -> Result<Vec<DemandLog>> {
    spec.validate()?;
    if tensor.periods() != spec.n_intervals() || tensor.nodes() != spec.n_nodes() {
        return Err(Error::Data(format!(
            "tensor {}x{} does not match spec {}x{}",
            tensor.periods(),
            tensor.nodes(),
            spec.n_intervals(),
            spec.n_nodes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tensor.kind().code() as u64);
    let mut logs = Vec::with_capacity(tensor.total() as usize);
    for t in 0..tensor.periods() {
        let start = spec.interval_start(t);
        for (node, &count) in tensor.row(t).iter().enumerate() {
            let (r, c) = (node / spec.cols, node % spec.cols);
            let (lat0, lat1) = (spec.lat_edge(r), spec.lat_edge(r + 1));
            let (lon0, lon1) = (spec.lon_edge(c), spec.lon_edge(c + 1));
            for _ in 0..count {
                // floating-point edges can round a draw into the next cell; redraw until it lands
                let (lat, lon) = loop {
                    let lat = rng.random_range(lat0..lat1);
                    let lon = rng.random_range(lon0..lon1);
                    if spec.cell_of(lat, lon) == Some(node) {
                        break (lat, lon);
                    }
                };
                logs.push(DemandLog {
                    timestamp: start + rng.random_range(0..spec.interval_len),
                    lat,
                    lon,
                    kind: tensor.kind(),
                });
            }
        }
    }
    Ok(logs)
}

pub fn read_config(path: &Path) -> Result<SynthConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
