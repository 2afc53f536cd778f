use std::collections::BTreeSet;

use chrono::{DateTime, Datelike, Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use super::{GridSpec, SECONDS_PER_DAY};
use crate::error::{Error, Result};

pub const DAYS_PER_WEEK: usize = 7;

/// Local dates treated as holidays.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HolidayCalendar {
    dates: BTreeSet<NaiveDate>,
}

impl HolidayCalendar {
    pub fn new(dates: impl IntoIterator<Item = NaiveDate>) -> Self {
        Self {
            dates: dates.into_iter().collect(),
        }
    }

    /// Parses one ISO date per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut dates = BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let date = NaiveDate::parse_from_str(line, "%Y-%m-%d")
                .map_err(|e| Error::Data(format!("holiday file line {}: {line:?}: {e}", lineno + 1)))?;
            if !dates.insert(date) {
                return Err(Error::Data(format!("holiday file line {}: duplicate date {date}", lineno + 1)));
            }
        }
        Ok(Self { dates })
    }

    pub fn to_text(&self) -> String {
        self.dates.iter().map(|d| format!("{d}\n")).collect()
    }

    pub fn is_holiday(&self, date: NaiveDate) -> bool {
        self.dates.contains(&date)
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn dates(&self) -> impl Iterator<Item = &NaiveDate> {
        self.dates.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DayType {
    Workday,
    Weekend,
    Holiday,
}

/// How calendar days are bucketed into day types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DayTypeScheme {
    /// Workday vs. weekend-or-holiday.
    #[default]
    TwoWay,
    /// Workday, weekend and holiday kept apart.
    ThreeWay,
}

impl DayTypeScheme {
    pub fn n_types(self) -> usize {
        match self {
            DayTypeScheme::TwoWay => 2,
            DayTypeScheme::ThreeWay => 3,
        }
    }
}

/// Calendar context of one interval: one-hot time-of-day and day-of-week blocks plus the
/// holiday and day-before-holiday flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TemporalKey {
    pub slot: usize,
    pub slots_per_day: usize,
    /// 0 = Monday .. 6 = Sunday.
    pub weekday: usize,
    pub holiday: bool,
    pub before_holiday: bool,
}

impl TemporalKey {
    pub fn new(slot: usize, slots_per_day: usize, weekday: usize, holiday: bool, before_holiday: bool) -> Result<Self> {
        if slot >= slots_per_day || weekday >= DAYS_PER_WEEK {
            return Err(Error::Data(format!(
                "temporal key out of range: slot {slot}/{slots_per_day}, weekday {weekday}"
            )));
        }
        Ok(Self {
            slot,
            slots_per_day,
            weekday,
            holiday,
            before_holiday,
        })
    }

    pub fn dim(slots_per_day: usize) -> usize {
        slots_per_day + DAYS_PER_WEEK + 2
    }

    pub fn len(&self) -> usize {
        Self::dim(self.slots_per_day)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bits(&self) -> Vec<u8> {
        let mut bits = vec![0u8; self.len()];
        bits[self.slot] = 1;
        bits[self.slots_per_day + self.weekday] = 1;
        bits[self.slots_per_day + DAYS_PER_WEEK] = self.holiday as u8;
        bits[self.slots_per_day + DAYS_PER_WEEK + 1] = self.before_holiday as u8;
        bits
    }

    /// Inverse of [`TemporalKey::bits`]; rejects vectors whose one-hot blocks are malformed.
    pub fn from_bits(bits: &[u8], slots_per_day: usize) -> Result<Self> {
        if bits.len() != Self::dim(slots_per_day) || bits.iter().any(|&b| b > 1) {
            return Err(Error::Data(format!("malformed temporal key of length {}", bits.len())));
        }
        let one_hot = |block: &[u8]| -> Result<usize> {
            let hot: Vec<usize> = block.iter().enumerate().filter(|(_, &b)| b == 1).map(|(i, _)| i).collect();
            match hot[..] {
                [i] => Ok(i),
                _ => Err(Error::Data(format!("one-hot block has {} active bits", hot.len()))),
            }
        };
        let slot = one_hot(&bits[..slots_per_day])?;
        let weekday = one_hot(&bits[slots_per_day..slots_per_day + DAYS_PER_WEEK])?;
        let tail = slots_per_day + DAYS_PER_WEEK;
        Self::new(slot, slots_per_day, weekday, bits[tail] == 1, bits[tail + 1] == 1)
    }

    pub fn day_type(&self, scheme: DayTypeScheme) -> DayType {
        let weekend = self.weekday >= 5;
        match (scheme, self.holiday, weekend) {
            (DayTypeScheme::ThreeWay, true, _) => DayType::Holiday,
            (_, true, _) | (_, false, true) => DayType::Weekend,
            _ => DayType::Workday,
        }
    }

    pub fn is_workday(&self) -> bool {
        self.day_type(DayTypeScheme::TwoWay) == DayType::Workday
    }

    /// Short human-readable tag such as `Mon 08:30` or `Sat 23:00 hol`.
    pub fn label(&self, interval_len: i64) -> String {
        const NAMES: [&str; 7] = ["Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"];
        let secs = self.slot as i64 * interval_len;
        let mut s = format!("{} {:02}:{:02}", NAMES[self.weekday], secs / 3600, (secs % 3600) / 60);
        if self.holiday {
            s.push_str(" hol");
        }
        if self.before_holiday {
            s.push_str(" pre");
        }
        s
    }
}

fn slots_per_day(spec: &GridSpec) -> Result<usize> {
    if spec.interval_len <= 0 || SECONDS_PER_DAY % spec.interval_len != 0 {
        return Err(Error::InvalidSpec(format!(
            "interval_len {} does not divide a day into whole slots",
            spec.interval_len
        )));
    }
    Ok((SECONDS_PER_DAY / spec.interval_len) as usize)
}

/// Calendar key for the start of interval `t`, in the grid's fixed local offset.
pub fn temporal_key(t: usize, spec: &GridSpec, calendar: &HolidayCalendar) -> Result<TemporalKey> {
    let slots = slots_per_day(spec)?;
    if t >= spec.n_intervals() {
        return Err(Error::Data(format!("interval {t} outside period of {} intervals", spec.n_intervals())));
    }
    let local = spec.interval_start(t) + spec.utc_offset;
    let dt = DateTime::from_timestamp(local, 0).ok_or_else(|| Error::Data(format!("timestamp {local} out of range")))?;
    let date = dt.date_naive();
    let seconds_of_day = local.rem_euclid(SECONDS_PER_DAY);
    TemporalKey::new(
        (seconds_of_day / spec.interval_len) as usize,
        slots,
        date.weekday().num_days_from_monday() as usize,
        calendar.is_holiday(date),
        calendar.is_holiday(date + Duration::days(1)),
    )
}

pub fn temporal_keys(spec: &GridSpec, calendar: &HolidayCalendar) -> Result<Vec<TemporalKey>> {
    (0..spec.n_intervals()).map(|t| temporal_key(t, spec, calendar)).collect()
}
