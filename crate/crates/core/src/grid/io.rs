//! On-disk formats: demand-log CSV, holiday lists and the binary tensor file.
//!
//! Tensor file layout: magic `STGD1`, then little-endian `u32` periods, `u32` nodes,
//! `u32` kind (0 pickup, 1 dropoff), then `periods * nodes` little-endian `u32` counts,
//! row-major by time.

use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, SecondsFormat, Utc};

use super::{DemandLog, DemandTensor, HolidayCalendar, LogKind};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 5] = b"STGD1";

pub fn parse_timestamp(s: &str) -> Result<i64> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(dt.timestamp());
    }
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .map(|dt| dt.and_utc().timestamp())
        .map_err(|_| Error::Data(format!("bad ISO-8601 timestamp {s:?}")))
}

pub fn format_timestamp(ts: i64) -> String {
    DateTime::<Utc>::from_timestamp(ts, 0)
        .map(|dt| dt.to_rfc3339_opts(SecondsFormat::Secs, true))
        .unwrap_or_else(|| ts.to_string())
}

/// Reads `timestamp,lat,lon,kind` records.
pub fn read_logs<R: Read>(reader: R) -> Result<Vec<DemandLog>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["timestamp", "lat", "lon", "kind"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Data(format!("log CSV header must be {}, got {:?}", expected.join(","), headers)));
    }
    let mut logs = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let field = |k: usize| record.get(k).unwrap_or("");
        let num = |k: usize| -> Result<f64> {
            field(k)
                .parse::<f64>()
                .map_err(|_| Error::Data(format!("line {line}: bad number {:?}", field(k))))
        };
        let log = DemandLog {
            timestamp: parse_timestamp(field(0)).map_err(|e| Error::Data(format!("line {line}: {e}")))?,
            lat: num(1)?,
            lon: num(2)?,
            kind: field(3).parse()?,
        };
        if !(-90.0..=90.0).contains(&log.lat) || !(-180.0..=180.0).contains(&log.lon) {
            return Err(Error::Data(format!("line {line}: coordinates out of range ({}, {})", log.lat, log.lon)));
        }
        logs.push(log);
    }
    Ok(logs)
}

pub fn write_logs<W: Write>(writer: W, logs: &[DemandLog]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["timestamp", "lat", "lon", "kind"])?;
    for log in logs {
        wtr.write_record([
            format_timestamp(log.timestamp),
            log.lat.to_string(),
            log.lon.to_string(),
            log.kind.as_str().to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_logs_file(path: &Path) -> Result<Vec<DemandLog>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_logs(std::io::BufReader::new(file))
}

pub fn write_logs_file(path: &Path, logs: &[DemandLog]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_logs(std::io::BufWriter::new(file), logs)
}

pub fn read_holidays_file(path: &Path) -> Result<HolidayCalendar> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    HolidayCalendar::parse(&text)
}

pub fn encode_tensor(tensor: &DemandTensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(17 + 4 * tensor.values().len());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&(tensor.periods() as u32).to_le_bytes());
    buf.extend_from_slice(&(tensor.nodes() as u32).to_le_bytes());
    buf.extend_from_slice(&tensor.kind().code().to_le_bytes());
    for v in tensor.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_tensor(bytes: &[u8]) -> Result<DemandTensor> {
    if bytes.len() < 17 || &bytes[..5] != TENSOR_MAGIC {
        return Err(Error::Format("not a demand tensor file (bad magic)".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap());
    let (periods, nodes) = (word(0) as usize, word(1) as usize);
    let kind = LogKind::from_code(word(2)).ok_or_else(|| Error::Format(format!("unknown tensor kind {}", word(2))))?;
    let body = &bytes[17..];
    if body.len() != 4 * periods * nodes {
        return Err(Error::Format(format!(
            "tensor body has {} bytes, expected {}",
            body.len(),
            4 * periods * nodes
        )));
    }
    let values = body.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
    DemandTensor::from_vec(kind, periods, nodes, values)
}

pub fn write_tensor_file(path: &Path, tensor: &DemandTensor) -> Result<()> {
    std::fs::write(path, encode_tensor(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<DemandTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_header_layout() {
        let t = DemandTensor::from_vec(LogKind::Dropoff, 2, 3, vec![1, 2, 3, 4, 5, 258]).unwrap();
        let bytes = encode_tensor(&t);
        assert_eq!(&bytes[..5], b"STGD1");
        assert_eq!(&bytes[5..9], &[2, 0, 0, 0]);
        assert_eq!(&bytes[9..13], &[3, 0, 0, 0]);
        assert_eq!(&bytes[13..17], &[1, 0, 0, 0]);
        assert_eq!(&bytes[bytes.len() - 4..], &[2, 1, 0, 0]);
        assert_eq!(decode_tensor(&bytes).unwrap(), t);
    }

    #[test]
    fn truncated_tensor_is_rejected() {
        let t = DemandTensor::zeros(LogKind::Pickup, 2, 2);
        let bytes = encode_tensor(&t);
        assert!(decode_tensor(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_tensor(b"XXXXX").is_err());
    }

    #[test]
    fn log_csv_roundtrip() {
        let logs = vec![
            DemandLog {
                timestamp: 1_420_070_400,
                lat: 40.712_345_678_9,
                lon: -73.987_654_321,
                kind: LogKind::Pickup,
            },
            DemandLog {
                timestamp: 1_420_070_999,
                lat: 40.1,
                lon: -73.2,
                kind: LogKind::Dropoff,
            },
        ];
        let mut buf = Vec::new();
        write_logs(&mut buf, &logs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("timestamp,lat,lon,kind\n2015-01-01T00:00:00Z,"));
        assert_eq!(read_logs(&buf[..]).unwrap(), logs);
    }

    #[test]
    fn bad_log_rows_are_data_errors() {
        let bad_kind = "timestamp,lat,lon,kind\n2015-01-01T00:00:00Z,40,-73,taxi\n";
        assert!(matches!(read_logs(bad_kind.as_bytes()), Err(Error::Data(_))));
        let bad_lat = "timestamp,lat,lon,kind\n2015-01-01T00:00:00Z,95,-73,pickup\n";
        assert!(matches!(read_logs(bad_lat.as_bytes()), Err(Error::Data(_))));
        let bad_header = "time,lat,lon,kind\n";
        assert!(matches!(read_logs(bad_header.as_bytes()), Err(Error::Data(_))));
    }
}
