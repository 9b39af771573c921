use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-day cap shares may sum slightly above one from rounding in the source.
pub const CAP_SHARE_SUM_TOLERANCE: f64 = 1e-6;

/// Aligned daily price and capital-share series for `S` sectors over `T` days.
///
/// Matrices are stored sector-major: the series of sector `s` is the
/// contiguous slice `[s * T, (s + 1) * T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SectorPanel {
    dates: Vec<NaiveDate>,
    sector_ids: Vec<String>,
    close: Vec<f64>,
    cap_share: Vec<f64>,
}

impl SectorPanel {
    pub fn new(
        dates: Vec<NaiveDate>,
        sector_ids: Vec<String>,
        close: Vec<f64>,
        cap_share: Vec<f64>,
    ) -> Result<Self> {
        let (s, t) = (sector_ids.len(), dates.len());
        if s == 0 || t == 0 {
            return Err(Error::Validation(
                "panel needs at least one sector and one date".into(),
            ));
        }
        if close.len() != s * t || cap_share.len() != s * t {
            return Err(Error::Validation(format!(
                "series length mismatch: expected {} values for {s} sectors x {t} days, got close={} cap_share={}",
                s * t,
                close.len(),
                cap_share.len()
            )));
        }
        if let Some(w) = dates.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Validation(format!(
                "dates not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
        for (i, &p) in close.iter().enumerate() {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::Validation(format!(
                    "non-positive price {p} for sector {} on {}",
                    sector_ids[i / t],
                    dates[i % t]
                )));
            }
        }
        for (i, &c) in cap_share.iter().enumerate() {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::Validation(format!(
                    "cap_share {c} outside [0, 1] for sector {} on {}",
                    sector_ids[i / t],
                    dates[i % t]
                )));
            }
        }
        for day in 0..t {
            let sum: f64 = (0..s).map(|k| cap_share[k * t + day]).sum();
            if sum > 1.0 + CAP_SHARE_SUM_TOLERANCE {
                return Err(Error::Validation(format!(
                    "cap_share sums to {sum} on {}",
                    dates[day]
                )));
            }
        }
        Ok(Self {
            dates,
            sector_ids,
            close,
            cap_share,
        })
    }

    pub fn n_sectors(&self) -> usize {
        self.sector_ids.len()
    }

    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn sector_ids(&self) -> &[String] {
        &self.sector_ids
    }

    pub fn close(&self, sector: usize, t: usize) -> f64 {
        self.close[sector * self.n_days() + t]
    }

    pub fn cap_share(&self, sector: usize, t: usize) -> f64 {
        self.cap_share[sector * self.n_days() + t]
    }

    pub fn close_series(&self, sector: usize) -> &[f64] {
        let t = self.n_days();
        &self.close[sector * t..(sector + 1) * t]
    }

    pub fn cap_share_series(&self, sector: usize) -> &[f64] {
        let t = self.n_days();
        &self.cap_share[sector * t..(sector + 1) * t]
    }

    /// Cap shares of every sector on day `t`.
    pub fn cap_share_column(&self, t: usize) -> Vec<f64> {
        (0..self.n_sectors())
            .map(|s| self.cap_share(s, t))
            .collect()
    }

    /// Panel restricted to the given sector order.
    pub fn select_sectors(&self, order: &[usize]) -> Result<Self> {
        let mut close = Vec::with_capacity(order.len() * self.n_days());
        let mut share = Vec::with_capacity(order.len() * self.n_days());
        let mut ids = Vec::with_capacity(order.len());
        for &s in order {
            if s >= self.n_sectors() {
                return Err(Error::OutOfRange(format!(
                    "sector {s} of {}",
                    self.n_sectors()
                )));
            }
            close.extend_from_slice(self.close_series(s));
            share.extend_from_slice(self.cap_share_series(s));
            ids.push(self.sector_ids[s].clone());
        }
        Self::new(self.dates.clone(), ids, close, share)
    }

    /// Copy of the panel with day `t` of one sector's price replaced.
    pub fn with_close(&self, sector: usize, t: usize, value: f64) -> Result<Self> {
        let mut close = self.close.clone();
        close[sector * self.n_days() + t] = value;
        Self::new(
            self.dates.clone(),
            self.sector_ids.clone(),
            close,
            self.cap_share.clone(),
        )
    }
}

/// Training and backtesting date ranges (inclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_start: NaiveDate,
    pub train_end: NaiveDate,
    pub test_start: NaiveDate,
    pub test_end: NaiveDate,
}

/// A [`SplitSpec`] resolved to inclusive day indices of a panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: (usize, usize),
    pub test: (usize, usize),
}

impl SplitSpec {
    /// Default split: train 2007-04-23..=2019-12-31, test 2020-01-01..=2025-06-13.
    pub fn default_dates() -> Self {
        let d = |y, m, day| NaiveDate::from_ymd_opt(y, m, day).expect("valid literal date");
        Self {
            train_start: d(2007, 4, 23),
            train_end: d(2019, 12, 31),
            test_start: d(2020, 1, 1),
            test_end: d(2025, 6, 13),
        }
    }

    /// Split a panel chronologically, the first `train_fraction` of days training.
    pub fn by_fraction(panel: &SectorPanel, train_fraction: f64) -> Result<Self> {
        let t = panel.n_days();
        if !(0.0 < train_fraction && train_fraction < 1.0) {
            return Err(Error::InvalidSpec(format!(
                "train_fraction {train_fraction} not in (0, 1)"
            )));
        }
        let cut = ((t as f64) * train_fraction).round() as usize;
        if cut < 1 || cut >= t {
            return Err(Error::InvalidSpec(format!(
                "train_fraction {train_fraction} leaves an empty range"
            )));
        }
        let dates = panel.dates();
        Ok(Self {
            train_start: dates[0],
            train_end: dates[cut - 1],
            test_start: dates[cut],
            test_end: dates[t - 1],
        })
    }

    pub fn resolve(&self, panel: &SectorPanel) -> Result<SplitIndices> {
        if self.train_end >= self.test_start {
            return Err(Error::InvalidSpec(format!(
                "train_end {} must precede test_start {}",
                self.train_end, self.test_start
            )));
        }
        let range = |a: NaiveDate, b: NaiveDate, what: &str| -> Result<(usize, usize)> {
            let dates = panel.dates();
            let lo = dates.partition_point(|d| *d < a);
            let hi = dates.partition_point(|d| *d <= b);
            if lo >= hi {
                return Err(Error::InvalidSpec(format!(
                    "{what} range {a}..={b} holds no panel dates"
                )));
            }
            Ok((lo, hi - 1))
        };
        Ok(SplitIndices {
            train: range(self.train_start, self.train_end, "training")?,
            test: range(self.test_start, self.test_end, "test")?,
        })
    }
}
