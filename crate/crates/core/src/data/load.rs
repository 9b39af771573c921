use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{SectorPanel, MIN_HISTORY};
use crate::error::{Error, Result};

/// Column names of the delimited input file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColumnSchema {
    pub date: String,
    pub sector_id: String,
    pub close: String,
    pub cap_share: String,
    pub delimiter: char,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            date: "date".into(),
            sector_id: "sector_id".into(),
            close: "close".into(),
            cap_share: "cap_share".into(),
            delimiter: ',',
        }
    }
}

/// What ingestion had to do to make the panel rectangular.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub rows: usize,
    pub sectors: usize,
    pub days: usize,
    /// Dates outside the intersection of all sector ranges.
    pub dropped_dates: usize,
    /// (sector, date) pairs forward-filled from the previous observation.
    pub filled: Vec<(String, NaiveDate)>,
}

impl fmt::Display for LoadReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "load.rows={}", self.rows)?;
        writeln!(f, "load.sectors={}", self.sectors)?;
        writeln!(f, "load.days={}", self.days)?;
        writeln!(f, "load.dropped_dates={}", self.dropped_dates)?;
        writeln!(f, "load.filled={}", self.filled.len())?;
        for (s, d) in &self.filled {
            writeln!(f, "load.filled.entry={s},{d}")?;
        }
        Ok(())
    }
}

struct Columns {
    date: usize,
    sector: usize,
    close: usize,
    share: usize,
}

/// Read a long-format panel file and align it into a [`SectorPanel`].
///
/// Sectors keep their order of first appearance. Days missing for a sector
/// inside the common date range are forward-filled and listed in the report.
pub fn load_panel(path: &Path, schema: &ColumnSchema) -> Result<(SectorPanel, LoadReport)> {
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .delimiter(schema.delimiter as u8)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::from(e),
            _ => parse_err(1, e.to_string()),
        })?;
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(1, format!("missing column `{name}`")))
    };
    let cols = Columns {
        date: find(&schema.date)?,
        sector: find(&schema.sector_id)?,
        close: find(&schema.close)?,
        share: find(&schema.cap_share)?,
    };

    let mut sector_order: Vec<String> = Vec::new();
    let mut sector_index: HashMap<String, usize> = HashMap::new();
    let mut series: Vec<BTreeMap<NaiveDate, (f64, f64)>> = Vec::new();
    let mut rows = 0usize;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize, what: &str| {
            rec.get(i)
                .ok_or_else(|| parse_err(line, format!("missing field `{what}`")))
        };
        let date_s = field(cols.date, "date")?;
        let date = NaiveDate::parse_from_str(date_s, "%Y-%m-%d")
            .map_err(|e| parse_err(line, format!("bad date `{date_s}`: {e}")))?;
        let sector = field(cols.sector, "sector_id")?.to_string();
        let num = |i: usize, what: &str| -> Result<f64> {
            let s = field(i, what)?;
            s.parse::<f64>()
                .map_err(|e| parse_err(line, format!("bad {what} `{s}`: {e}")))
        };
        let close = num(cols.close, "close")?;
        let share = num(cols.share, "cap_share")?;
        if !(close > 0.0 && close.is_finite()) {
            return Err(Error::Validation(format!(
                "line {line}: non-positive price {close} for sector {sector} on {date}"
            )));
        }
        if !(0.0..=1.0).contains(&share) {
            return Err(Error::Validation(format!(
                "line {line}: cap_share {share} outside [0, 1] for sector {sector} on {date}"
            )));
        }
        let idx = *sector_index.entry(sector.clone()).or_insert_with(|| {
            sector_order.push(sector.clone());
            series.push(BTreeMap::new());
            series.len() - 1
        });
        if series[idx].insert(date, (close, share)).is_some() {
            return Err(Error::DuplicateKey {
                date: date.to_string(),
                sector,
                line,
            });
        }
        rows += 1;
    }
    if series.is_empty() {
        return Err(Error::InsufficientHistory {
            found: 0,
            required: MIN_HISTORY,
        });
    }

    let first = series
        .iter()
        .map(|m| *m.keys().next().expect("non-empty"))
        .max()
        .expect("non-empty");
    let last = series
        .iter()
        .map(|m| *m.keys().next_back().expect("non-empty"))
        .min()
        .expect("non-empty");
    let all: BTreeSet<NaiveDate> = series.iter().flat_map(|m| m.keys().copied()).collect();
    let dates: Vec<NaiveDate> = all
        .iter()
        .copied()
        .filter(|d| *d >= first && *d <= last)
        .collect();
    let dropped_dates = all.len() - dates.len();
    if dates.len() < MIN_HISTORY {
        return Err(Error::InsufficientHistory {
            found: dates.len(),
            required: MIN_HISTORY,
        });
    }

    let t = dates.len();
    let mut close = Vec::with_capacity(series.len() * t);
    let mut share = Vec::with_capacity(series.len() * t);
    let mut filled = Vec::new();
    for (s, m) in series.iter().enumerate() {
        for d in &dates {
            let (c, w) = match m.get(d) {
                Some(v) => *v,
                None => {
                    // Latest observation strictly before `d`; exists because `d >= first`.
                    let (_, v) = m
                        .range(..*d)
                        .next_back()
                        .expect("sector starts before common range");
                    filled.push((sector_order[s].clone(), *d));
                    *v
                }
            };
            close.push(c);
            share.push(w);
        }
    }
    let report = LoadReport {
        rows,
        sectors: series.len(),
        days: t,
        dropped_dates,
        filled,
    };
    let panel = SectorPanel::new(dates, sector_order, close, share)?;
    Ok((panel, report))
}

/// Write a panel in the long format read by [`load_panel`] (default schema).
pub fn write_panel(panel: &SectorPanel, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["date", "sector_id", "close", "cap_share"])?;
    for (t, d) in panel.dates().iter().enumerate() {
        for (s, id) in panel.sector_ids().iter().enumerate() {
            w.write_record([
                d.to_string(),
                id.clone(),
                panel.close(s, t).to_string(),
                panel.cap_share(s, t).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
