use std::io::Write;

use crate::error::Result;
use crate::grid::{DayType, DayTypeScheme, TemporalKey, DAYS_PER_WEEK};

/// One exported embedding vector with the key it was computed for.
#[derive(Debug, Clone, PartialEq)]
pub struct TgeRow {
    pub label: String,
    pub key: TemporalKey,
    pub vector: Vec<f64>,
}

/// Every slot on every weekday, first without and then with the holiday flag.
pub fn default_tge_keys(slots_per_day: usize) -> Vec<TemporalKey> {
    let mut keys = Vec::with_capacity(2 * DAYS_PER_WEEK * slots_per_day);
    for holiday in [false, true] {
        for weekday in 0..DAYS_PER_WEEK {
            for slot in 0..slots_per_day {
                keys.push(TemporalKey {
                    slot,
                    slots_per_day,
                    weekday,
                    holiday,
                    before_holiday: false,
                });
            }
        }
    }
    keys
}

/// CSV with columns `label,slot,weekday,holiday,before_holiday,day_type,e0..`.
pub fn write_tge_csv<W: Write>(writer: W, rows: &[TgeRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let dim = rows.first().map_or(0, |r| r.vector.len());
    let mut header: Vec<String> = ["label", "slot", "weekday", "holiday", "before_holiday", "day_type"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..dim).map(|i| format!("e{i}")));
    w.write_record(&header)?;
    for r in rows {
        let day_type = match r.key.day_type(DayTypeScheme::ThreeWay) {
            DayType::Workday => "workday",
            DayType::Weekend => "weekend",
            DayType::Holiday => "holiday",
        };
        let mut rec = vec![
            r.label.clone(),
            r.key.slot.to_string(),
            r.key.weekday.to_string(),
            (r.key.holiday as u8).to_string(),
            (r.key.before_holiday as u8).to_string(),
            day_type.to_string(),
        ];
        rec.extend(r.vector.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
