//! The universal output row of every model: one forecast per
//! (model, level, region, year).

use std::io::{BufRead, Write};

use thiserror::Error;

use crate::hierarchy::{RegionId, RegionLevel};

/// Variant tag used by models without a trend/no-trend distinction.
pub const VARIANT_NONE: &str = "-";

pub const FORECASTS_HEADER: &str = "model,variant,level,region_id,year,yield_hat,fraction_hat,area_hat";

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRecord {
    pub model: String,
    /// `trend`, `no_trend`, or [`VARIANT_NONE`].
    pub variant: String,
    pub level: RegionLevel,
    pub region_id: RegionId,
    pub year: i32,
    /// t/ha.
    pub yield_hat: f64,
    /// Crop area / land area; absent for models that do not predict area.
    pub fraction_hat: Option<f64>,
    /// Hectares; absent for models that do not predict area.
    pub area_hat: Option<f64>,
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("forecasts.csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn opt_f64(s: &str, what: &str, lineno: usize) -> Result<Option<f64>, RecordError> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| RecordError::Csv(format!("bad {what} {s:?} (line {lineno})")))
}

/// Write records after an already-written comment header.
pub fn write_forecasts<W: Write>(mut w: W, records: &[ForecastRecord]) -> Result<(), RecordError> {
    writeln!(w, "{FORECASTS_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.model,
            r.variant,
            r.level.as_str(),
            r.region_id,
            r.year,
            r.yield_hat,
            r.fraction_hat.map(|v| v.to_string()).unwrap_or_default(),
            r.area_hat.map(|v| v.to_string()).unwrap_or_default(),
        )?;
    }
    Ok(())
}

pub fn read_forecasts<R: BufRead>(r: R) -> Result<Vec<ForecastRecord>, RecordError> {
    let mut out = Vec::new();
    let mut header_seen = false;
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !header_seen {
            if line != FORECASTS_HEADER {
                return Err(RecordError::Csv(format!("unexpected header {line:?}")));
            }
            header_seen = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(RecordError::Csv(format!("expected 8 fields, got {} (line {})", f.len(), lineno + 1)));
        }
        let level = RegionLevel::parse(f[2])
            .ok_or_else(|| RecordError::Csv(format!("unknown level {:?} (line {})", f[2], lineno + 1)))?;
        out.push(ForecastRecord {
            model: f[0].to_string(),
            variant: f[1].to_string(),
            level,
            region_id: f[3].to_string(),
            year: f[4]
                .parse()
                .map_err(|_| RecordError::Csv(format!("bad year {:?} (line {})", f[4], lineno + 1)))?,
            yield_hat: f[5]
                .parse()
                .map_err(|_| RecordError::Csv(format!("bad yield_hat {:?} (line {})", f[5], lineno + 1)))?,
            fraction_hat: opt_f64(f[6], "fraction_hat", lineno + 1)?,
            area_hat: opt_f64(f[7], "area_hat", lineno + 1)?,
        });
    }
    if !header_seen {
        return Err(RecordError::Csv("missing header row".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_records() {
        let records = vec![
            ForecastRecord {
                model: "ws_lstm".into(),
                variant: "trend".into(),
                level: RegionLevel::Child,
                region_id: "C1P01C02".into(),
                year: 2015,
                yield_hat: 5.123456789012345,
                fraction_hat: Some(0.25),
                area_hat: Some(250.0),
            },
            ForecastRecord {
                model: "naive_trend".into(),
                variant: VARIANT_NONE.into(),
                level: RegionLevel::Parent,
                region_id: "C1P01".into(),
                year: 2015,
                yield_hat: 4.75,
                fraction_hat: None,
                area_hat: None,
            },
        ];
        let mut buf = Vec::new();
        write_forecasts(&mut buf, &records).unwrap();
        let back = read_forecasts(&buf[..]).unwrap();
        assert_eq!(records, back);
    }
}
