//! Out-of-sample replay: greedy top-n allocation, the equity curve and its
//! summary metrics.

use std::fmt;
use std::path::Path;

use chrono::NaiveDate;

use crate::data::SectorPanel;
use crate::env::{ActionSpace, EnvConfig, Policy, SectorEnv};
use crate::error::{Error, Result};
use crate::features::FeatureTensor;
use crate::par::Execution;

pub const TRADING_DAYS: f64 = 252.0;

/// Metric keys in report order.
pub const METRIC_KEYS: [&str; 5] = [
    "cumulative_return",
    "annualized_return",
    "annualized_volatility",
    "sharpe_ratio",
    "max_drawdown",
];

/// Printed in place of a Sharpe ratio when volatility is zero.
pub const UNDEFINED: &str = "undefined";

/// Portfolio weights for one day.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    /// One weight per sector.
    pub weights: Vec<f64>,
    pub cash: f64,
    /// Selected targets, best first.
    pub picks: Vec<usize>,
}

/// The `n` most probable targets get `1 / n` each, ties to the lower index;
/// a selected dummy target is held as cash.
pub fn allocate(probs: &[f64], n: usize, space: ActionSpace) -> Result<Allocation> {
    if probs.len() != space.n_targets() {
        return Err(Error::Shape(format!(
            "{} probabilities for {} targets",
            probs.len(),
            space.n_targets()
        )));
    }
    if n == 0 || n > space.n_sectors() {
        return Err(Error::InvalidSpec(format!(
            "top_n {n} must lie in 1..={}",
            space.n_sectors()
        )));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(n);
    let w = 1.0 / n as f64;
    let mut weights = vec![0.0; space.n_sectors()];
    let mut cash = 0.0;
    for &a in &order {
        if space.is_dummy(a) {
            cash += w;
        } else {
            weights[a] = w;
        }
    }
    Ok(Allocation {
        weights,
        cash,
        picks: order,
    })
}

/// Portfolio value per day, starting at 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct EquityCurve {
    pub dates: Vec<NaiveDate>,
    pub values: Vec<f64>,
}

impl EquityCurve {
    pub fn daily_returns(&self) -> Vec<f64> {
        self.values.windows(2).map(|w| w[1] / w[0] - 1.0).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BacktestConfig {
    pub top_n: usize,
    pub window: usize,
    /// Proportional cost charged on turnover at each rebalance; 0 disables it.
    pub cost_rate: f64,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            top_n: 10,
            window: 10,
            cost_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backtest {
    pub curve: EquityCurve,
    /// Allocation held from each curve day to the next.
    pub allocations: Vec<Allocation>,
}

impl Backtest {
    /// Delimited equity curve: date, value, daily return and held sectors.
    pub fn write_curve(&self, panel: &SectorPanel, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["date", "value", "daily_return", "holdings"])?;
        let ids = panel.sector_ids();
        for (i, (d, v)) in self.curve.dates.iter().zip(&self.curve.values).enumerate() {
            let ret = if i == 0 {
                String::new()
            } else {
                (v / self.curve.values[i - 1] - 1.0).to_string()
            };
            let holdings = self.allocations.get(i).map_or(String::new(), |a| {
                a.picks
                    .iter()
                    .map(|&p| ids.get(p).map_or("cash", String::as_str))
                    .collect::<Vec<_>>()
                    .join(";")
            });
            w.write_record([d.to_string(), v.to_string(), ret, holdings])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Replay `policy` greedily over the inclusive test `days`, rebalancing daily.
pub fn run_backtest<P: Policy + Sync>(
    policy: &P,
    panel: &SectorPanel,
    features: &FeatureTensor,
    days: (usize, usize),
    config: &BacktestConfig,
    exec: Execution,
) -> Result<Backtest> {
    if !(config.cost_rate >= 0.0 && config.cost_rate < 1.0) {
        return Err(Error::InvalidSpec(format!(
            "cost rate {} not in [0, 1)",
            config.cost_rate
        )));
    }
    let env_cfg = EnvConfig {
        window: config.window,
        top_n: config.top_n,
        ..EnvConfig::default()
    };
    let env = SectorEnv::new(panel, features, days, env_cfg)?;
    let steps = crate::env::evaluate_episode(&env, policy, exec)?;
    let space = env.action_space();
    let first = env.first_day();
    let mut values = vec![1.0];
    let mut allocations = Vec::with_capacity(steps.len());
    let mut prev: Option<Vec<f64>> = None;
    for (i, step) in steps.iter().enumerate() {
        let t = first + i;
        let alloc = allocate(&step.probs, config.top_n, space)?;
        let gross: f64 = (0..panel.n_sectors())
            .map(|s| alloc.weights[s] * (panel.close(s, t + 1) / panel.close(s, t) - 1.0))
            .sum();
        let turnover = match &prev {
            Some(p) => p
                .iter()
                .zip(&alloc.weights)
                .map(|(a, b)| (a - b).abs())
                .sum(),
            None => alloc.weights.iter().sum::<f64>(),
        };
        let v = values[i] * (1.0 + gross) * (1.0 - config.cost_rate * turnover);
        values.push(v);
        prev = Some(alloc.weights.clone());
        allocations.push(alloc);
    }
    let dates = panel.dates()[first..first + values.len()].to_vec();
    Ok(Backtest {
        curve: EquityCurve { dates, values },
        allocations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub cumulative_return: f64,
    pub annualized_return: f64,
    pub annualized_volatility: f64,
    /// `None` when volatility is zero.
    pub sharpe_ratio: Option<f64>,
    pub max_drawdown: f64,
}

/// Sample standard deviation; zero for fewer than two values.
fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Most negative `value / running_max - 1`.
pub fn max_drawdown(values: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst = 0.0f64;
    for &v in values {
        peak = peak.max(v);
        worst = worst.min(v / peak - 1.0);
    }
    worst
}

pub fn compute_metrics(values: &[f64]) -> Result<MetricsReport> {
    if values.len() < 2 {
        return Err(Error::InvalidSpec(format!(
            "need at least 2 curve values, got {}",
            values.len()
        )));
    }
    if let Some(v) = values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::Domain(format!("curve value {v} is not positive")));
    }
    let returns: Vec<f64> = values.windows(2).map(|w| w[1] / w[0] - 1.0).collect();
    let n = returns.len() as f64;
    let cr = values[values.len() - 1] / values[0] - 1.0;
    let ar = (1.0 + cr).powf(TRADING_DAYS / n) - 1.0;
    let std = std_dev(&returns);
    let mean = returns.iter().sum::<f64>() / n;
    Ok(MetricsReport {
        cumulative_return: cr,
        annualized_return: ar,
        annualized_volatility: std * TRADING_DAYS.sqrt(),
        sharpe_ratio: (std > 0.0).then(|| mean / std * TRADING_DAYS.sqrt()),
        max_drawdown: max_drawdown(values),
    })
}

impl MetricsReport {
    fn values(&self) -> [Option<f64>; 5] {
        [
            Some(self.cumulative_return),
            Some(self.annualized_return),
            Some(self.annualized_volatility),
            self.sharpe_ratio,
            Some(self.max_drawdown),
        ]
    }

    /// One `key=value` line per metric, full precision.
    pub fn to_key_values(&self) -> String {
        METRIC_KEYS
            .iter()
            .zip(self.values())
            .map(|(k, v)| {
                format!(
                    "{k}={}\n",
                    v.map_or(UNDEFINED.to_string(), |x| x.to_string())
                )
            })
            .collect()
    }

    /// Inverse of [`MetricsReport::to_key_values`]; extra keys are ignored.
    pub fn parse_key_values(text: &str) -> Result<Self> {
        let mut found: [Option<Option<f64>>; 5] = [None; 5];
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("metrics line {}: expected key=value", i + 1))
            })?;
            if let Some(slot) = METRIC_KEYS.iter().position(|m| *m == k.trim()) {
                let v = v.trim();
                found[slot] = Some(if v == UNDEFINED {
                    None
                } else {
                    Some(v.parse().map_err(|_| {
                        Error::Config(format!("metrics line {}: bad number `{v}`", i + 1))
                    })?)
                });
            }
        }
        let get = |i: usize| {
            found[i].ok_or_else(|| Error::Config(format!("metrics missing `{}`", METRIC_KEYS[i])))
        };
        let need = |i: usize| {
            get(i)?
                .ok_or_else(|| Error::Config(format!("`{}` cannot be undefined", METRIC_KEYS[i])))
        };
        Ok(Self {
            cumulative_return: need(0)?,
            annualized_return: need(1)?,
            annualized_volatility: need(2)?,
            sharpe_ratio: get(3)?,
            max_drawdown: need(4)?,
        })
    }
}

impl fmt::Display for MetricsReport {
    /// Human-readable table with percentages.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |x: f64| format!("{:.2}%", 100.0 * x);
        writeln!(f, "{:<24}{:>12}", "metric", "value")?;
        writeln!(
            f,
            "{:<24}{:>12}",
            "cumulative return",
            pct(self.cumulative_return)
        )?;
        writeln!(
            f,
            "{:<24}{:>12}",
            "annualized return",
            pct(self.annualized_return)
        )?;
        writeln!(
            f,
            "{:<24}{:>12}",
            "annualized volatility",
            pct(self.annualized_volatility)
        )?;
        let sr = self
            .sharpe_ratio
            .map_or(UNDEFINED.to_string(), |s| format!("{s:.3}"));
        writeln!(f, "{:<24}{:>12}", "sharpe ratio", sr)?;
        write!(f, "{:<24}{:>12}", "max drawdown", pct(self.max_drawdown))
    }
}
