//! Technical indicators and the unified per-day feature matrix.
//!
//! Every indicator returns a series aligned with its input, holding
//! [`UNDEFINED`] (NaN) where the rolling window is not yet full.

use std::path::Path;

use crate::data::SectorPanel;
use crate::error::{Error, Result};
use crate::par::Execution;

pub const UNDEFINED: f64 = f64::NAN;

/// `k`-day simple moving average; defined for `t >= k - 1`.
pub fn sma(prices: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::InvalidSpec("SMA window must be at least 1".into()));
    }
    let mut out = vec![UNDEFINED; prices.len()];
    for t in (k - 1)..prices.len() {
        let window = &prices[t + 1 - k..=t];
        out[t] = window.iter().sum::<f64>() / k as f64;
    }
    Ok(out)
}

/// Price change over `k` days, `P_t - P_{t-k}`; defined for `t >= k`.
pub fn momentum(prices: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::InvalidSpec("momentum lag must be at least 1".into()));
    }
    let mut out = vec![UNDEFINED; prices.len()];
    for t in k..prices.len() {
        out[t] = prices[t] - prices[t - k];
    }
    Ok(out)
}

/// Sample standard deviation (divisor `k - 1`) of the last `k` log returns;
/// defined for `t >= k`.
pub fn volatility(prices: &[f64], k: usize) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(Error::InvalidSpec(
            "volatility window must be at least 2".into(),
        ));
    }
    if let Some(p) = prices.iter().find(|p| !(**p > 0.0)) {
        return Err(Error::Domain(format!(
            "log return of non-positive price {p}"
        )));
    }
    let mut returns = vec![UNDEFINED; prices.len()];
    for t in 1..prices.len() {
        returns[t] = (prices[t] / prices[t - 1]).ln();
    }
    let mut out = vec![UNDEFINED; prices.len()];
    for t in k..prices.len() {
        let w = &returns[t + 1 - k..=t];
        let mean = w.iter().sum::<f64>() / k as f64;
        let ss: f64 = w.iter().map(|r| (r - mean) * (r - mean)).sum();
        out[t] = (ss / (k - 1) as f64).sqrt();
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub sma_windows: Vec<usize>,
    pub momentum_lags: Vec<usize>,
    pub volatility_window: usize,
    /// Inclusive day range whose rows supply the z-score statistics
    /// (the training split). `None` uses every valid row.
    pub zscore_range: Option<(usize, usize)>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sma_windows: vec![10, 20, 50],
            momentum_lags: vec![5, 10],
            volatility_window: 20,
            zscore_range: None,
        }
    }
}

impl FeatureConfig {
    pub fn per_sector(&self) -> usize {
        self.sma_windows.len() + self.momentum_lags.len() + 1
    }

    /// First day on which every indicator is defined.
    pub fn valid_from(&self) -> usize {
        let sma = self
            .sma_windows
            .iter()
            .map(|k| k.saturating_sub(1))
            .max()
            .unwrap_or(0);
        let mom = self.momentum_lags.iter().copied().max().unwrap_or(0);
        sma.max(mom).max(self.volatility_window)
    }

    fn names(&self) -> Vec<String> {
        self.sma_windows
            .iter()
            .map(|k| format!("sma{k}"))
            .chain(self.momentum_lags.iter().map(|k| format!("mom{k}")))
            .chain(std::iter::once(format!("vol{}", self.volatility_window)))
            .collect()
    }
}

/// Row-major `T x d` matrix of normalized features, sector-major within a row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    values: Vec<f64>,
    names: Vec<String>,
    n_days: usize,
    valid_from: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl FeatureTensor {
    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn n_days(&self) -> usize {
        self.n_days
    }

    pub fn valid_from(&self) -> usize {
        self.valid_from
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let d = self.dim();
        &self.values[t * d..(t + 1) * d]
    }

    /// Rows `t - len + 1 ..= t` as one contiguous slice.
    pub fn window(&self, t: usize, len: usize) -> Result<&[f64]> {
        if len == 0 || t + 1 < len || t >= self.n_days || t + 1 - len < self.valid_from {
            return Err(Error::OutOfRange(format!(
                "window of {len} ending at {t} (valid rows {}..{})",
                self.valid_from, self.n_days
            )));
        }
        let d = self.dim();
        Ok(&self.values[(t + 1 - len) * d..(t + 1) * d])
    }

    /// z-score parameters applied to each column.
    pub fn normalization(&self) -> (&[f64], &[f64]) {
        (&self.mean, &self.scale)
    }

    /// Dump rows from `valid_from` onward as delimited text.
    pub fn write_csv(&self, panel: &SectorPanel, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["date".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for t in self.valid_from..self.n_days {
            let mut rec = vec![panel.dates()[t].to_string()];
            rec.extend(self.row(t).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Raw (un-normalized) indicator block of one sector, `T x F` row-major.
fn sector_block(prices: &[f64], config: &FeatureConfig) -> Result<Vec<f64>> {
    let t_n = prices.len();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(config.per_sector());
    for &k in &config.sma_windows {
        let s = sma(prices, k)?;
        cols.push(prices.iter().zip(&s).map(|(p, m)| p / m - 1.0).collect());
    }
    for &k in &config.momentum_lags {
        let m = momentum(prices, k)?;
        cols.push(
            (0..t_n)
                .map(|t| {
                    if t >= k {
                        m[t] / prices[t - k]
                    } else {
                        UNDEFINED
                    }
                })
                .collect(),
        );
    }
    cols.push(volatility(prices, config.volatility_window)?);
    let f = cols.len();
    let mut out = vec![0.0; t_n * f];
    for (j, c) in cols.iter().enumerate() {
        for t in 0..t_n {
            out[t * f + j] = c[t];
        }
    }
    Ok(out)
}

/// Compute, normalize and concatenate every sector's indicators.
pub fn build_features(panel: &SectorPanel, config: &FeatureConfig) -> Result<FeatureTensor> {
    build_features_with(panel, config, Execution::default())
}

pub fn build_features_with(
    panel: &SectorPanel,
    config: &FeatureConfig,
    exec: Execution,
) -> Result<FeatureTensor> {
    let (s_n, t_n) = (panel.n_sectors(), panel.n_days());
    let f = config.per_sector();
    let valid_from = config.valid_from();
    if valid_from >= t_n {
        return Err(Error::InsufficientHistory {
            found: t_n,
            required: valid_from + 1,
        });
    }
    let blocks = exec
        .map_range(s_n, |s| sector_block(panel.close_series(s), config))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let d = s_n * f;
    let mut values = vec![0.0; t_n * d];
    for (s, b) in blocks.iter().enumerate() {
        for t in 0..t_n {
            values[t * d + s * f..t * d + (s + 1) * f].copy_from_slice(&b[t * f..(t + 1) * f]);
        }
    }

    let (lo, hi) = config.zscore_range.unwrap_or((valid_from, t_n - 1));
    let lo = lo.max(valid_from);
    if hi >= t_n || lo > hi {
        return Err(Error::InvalidSpec(format!(
            "normalization range {lo}..={hi} holds no valid rows (valid from {valid_from}, {t_n} days)"
        )));
    }
    let n = (hi - lo + 1) as f64;
    let mut mean = vec![0.0; d];
    let mut scale = vec![1.0; d];
    for j in 0..d {
        let m = (lo..=hi).map(|t| values[t * d + j]).sum::<f64>() / n;
        let var = (lo..=hi)
            .map(|t| (values[t * d + j] - m).powi(2))
            .sum::<f64>()
            / n;
        mean[j] = m;
        if var.sqrt() > 1e-12 {
            scale[j] = var.sqrt();
        }
    }
    for t in 0..t_n {
        for j in 0..d {
            let v = &mut values[t * d + j];
            *v = (*v - mean[j]) / scale[j];
        }
    }
    for t in valid_from..t_n {
        if let Some(j) = (0..d).find(|&j| !values[t * d + j].is_finite()) {
            return Err(Error::NonFinite(format!("feature {j} on day {t}")));
        }
    }

    let base = config.names();
    let names = panel
        .sector_ids()
        .iter()
        .flat_map(|id| base.iter().map(move |b| format!("{id}.{b}")))
        .collect();
    Ok(FeatureTensor {
        values,
        names,
        n_days: t_n,
        valid_from,
        mean,
        scale,
    })
}
