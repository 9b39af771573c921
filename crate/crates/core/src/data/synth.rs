use chrono::{Datelike, NaiveDate, Weekday};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{SectorPanel, MIN_HISTORY};
use crate::error::{Error, Result};
use crate::rng::SeedTree;

/// Lag of the momentum signal that determines the next-day leader.
pub const LEADER_LAG: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Geometric random-walk prices with Dirichlet-evolving cap shares.
    Gbm,
    /// The largest cap share on day `t + 1` is [`leader_rule`] applied at `t`.
    DeterministicLeader,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub sectors: usize,
    pub days: usize,
    pub seed: u64,
    pub regime: Regime,
}

/// Index of the sector with the largest trailing momentum on day `t`.
///
/// Momentum is `(P_t - P_{t-k}) / P_{t-k}` with `k = min(LEADER_LAG, t)`;
/// ties go to the lowest index, so on day 0 the leader is sector 0.
pub fn leader_rule(panel: &SectorPanel, t: usize) -> usize {
    let k = LEADER_LAG.min(t);
    let mut best = 0;
    let mut best_m = f64::NEG_INFINITY;
    for s in 0..panel.n_sectors() {
        let m = (panel.close(s, t) - panel.close(s, t - k)) / panel.close(s, t - k);
        if m > best_m {
            best_m = m;
            best = s;
        }
    }
    best
}

fn business_days(n: usize) -> Vec<NaiveDate> {
    let mut d = NaiveDate::from_ymd_opt(2007, 4, 23).expect("valid literal date");
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d.succ_opt().expect("date overflow");
    }
    out
}

/// Generate a deterministic synthetic panel.
pub fn synth_panel(spec: &SynthSpec) -> Result<SectorPanel> {
    if spec.sectors < 2 {
        return Err(Error::InvalidSpec(format!(
            "need at least 2 sectors, got {}",
            spec.sectors
        )));
    }
    if spec.days < MIN_HISTORY {
        return Err(Error::InvalidSpec(format!(
            "need at least {MIN_HISTORY} days, got {}",
            spec.days
        )));
    }
    let seeds = SeedTree::new(spec.seed).child("synth");
    let (close, share) = match spec.regime {
        Regime::Gbm => gbm(spec, &seeds),
        Regime::DeterministicLeader => leader(spec, &seeds),
    };
    let ids = (0..spec.sectors).map(|s| format!("S{s:02}")).collect();
    SectorPanel::new(business_days(spec.days), ids, close, share)
}

fn gbm(spec: &SynthSpec, seeds: &SeedTree) -> (Vec<f64>, Vec<f64>) {
    let (s_n, t_n) = (spec.sectors, spec.days);
    let mut rng = seeds.stream("gbm");
    let drift: Vec<f64> = (0..s_n)
        .map(|_| rng.random_range(-0.0002..0.0008))
        .collect();
    let vol: Vec<f64> = (0..s_n).map(|_| rng.random_range(0.008..0.022)).collect();
    let market_vol = 0.008;
    // Concentration of the Dirichlet step; larger is smoother.
    let kappa = 4000.0;

    let mut close = vec![0.0; s_n * t_n];
    let mut share = vec![0.0; s_n * t_n];
    let mut w: Vec<f64> = (0..s_n).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x *= 0.97 / total);
    for s in 0..s_n {
        close[s * t_n] = 100.0;
        share[s * t_n] = w[s];
    }
    for t in 1..t_n {
        let common: f64 = rng.sample::<f64, _>(StandardNormal) * market_vol;
        let mut prop = vec![0.0; s_n];
        for s in 0..s_n {
            let z: f64 = rng.sample(StandardNormal);
            let r = drift[s] - 0.5 * vol[s] * vol[s] + common + vol[s] * z;
            close[s * t_n + t] = close[s * t_n + t - 1] * r.exp();
            prop[s] = share[s * t_n + t - 1] * r.exp();
        }
        let sum: f64 = prop.iter().sum();
        let mut draws = vec![0.0; s_n];
        for s in 0..s_n {
            let p = 0.999 * prop[s] / sum + 0.001 / s_n as f64;
            let g = Gamma::new(kappa * p, 1.0).expect("positive shape");
            draws[s] = g.sample(&mut rng);
        }
        let dsum: f64 = draws.iter().sum();
        for s in 0..s_n {
            share[s * t_n + t] = 0.97 * draws[s] / dsum;
        }
    }
    (close, share)
}

fn leader(spec: &SynthSpec, seeds: &SeedTree) -> (Vec<f64>, Vec<f64>) {
    let (s_n, t_n) = (spec.sectors, spec.days);
    let mut rng = seeds.stream("leader");
    const BLOCK: usize = 40;
    const HOT_DRIFT: f64 = 0.01;
    const COLD_DRIFT: f64 = -0.002;
    const NOISE: f64 = 0.003;

    let mut close = vec![0.0; s_n * t_n];
    let mut hot = rng.random_range(0..s_n);
    for s in 0..s_n {
        close[s * t_n] = 100.0;
    }
    for t in 1..t_n {
        if t % BLOCK == 0 {
            let next = rng.random_range(0..s_n - 1);
            hot = if next >= hot { next + 1 } else { next };
        }
        for s in 0..s_n {
            let mu = if s == hot { HOT_DRIFT } else { COLD_DRIFT };
            let z: f64 = rng.sample(StandardNormal);
            close[s * t_n + t] = close[s * t_n + t - 1] * (mu + NOISE * z).exp();
        }
    }

    // Shares are assigned after prices so the leader of day t+1 follows the
    // rule evaluated on day t's prices.
    let view = SectorPanel::new(
        business_days(t_n),
        (0..s_n).map(|s| s.to_string()).collect(),
        close.clone(),
        vec![0.0; s_n * t_n],
    )
    .expect("generated prices are positive");
    let mut share = vec![0.0; s_n * t_n];
    for t in 0..t_n {
        let lead = if t == 0 { 0 } else { leader_rule(&view, t - 1) };
        let raw: Vec<f64> = (0..s_n)
            .map(|s| if s == lead { 2.0 } else { 1.0 } + rng.random_range(0.0..0.5))
            .collect();
        let sum: f64 = raw.iter().sum();
        for s in 0..s_n {
            share[s * t_n + t] = 0.95 * raw[s] / sum;
        }
    }
    (close, share)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        let spec = SynthSpec {
            sectors: 3,
            days: 100,
            seed: 7,
            regime: Regime::Gbm,
        };
        assert_eq!(synth_panel(&spec).unwrap(), synth_panel(&spec).unwrap());
        let other = SynthSpec { seed: 8, ..spec };
        assert_ne!(synth_panel(&spec).unwrap(), synth_panel(&other).unwrap());
        let spec = SynthSpec {
            regime: Regime::DeterministicLeader,
            ..spec
        };
        assert_eq!(synth_panel(&spec).unwrap(), synth_panel(&spec).unwrap());
    }

    #[test]
    fn leader_regime_follows_rule() {
        let spec = SynthSpec {
            sectors: 4,
            days: 300,
            seed: 3,
            regime: Regime::DeterministicLeader,
        };
        let p = synth_panel(&spec).unwrap();
        for t in 0..p.n_days() - 1 {
            let col = p.cap_share_column(t + 1);
            let top = (0..p.n_sectors())
                .max_by(|&a, &b| col[a].total_cmp(&col[b]))
                .unwrap();
            assert_eq!(top, leader_rule(&p, t), "day {t}");
        }
    }

    #[test]
    fn gbm_prices_positive() {
        let spec = SynthSpec {
            sectors: 47,
            days: 800,
            seed: 11,
            regime: Regime::Gbm,
        };
        let p = synth_panel(&spec).unwrap();
        assert!((0..47).all(|s| p.close_series(s).iter().all(|&c| c > 0.0)));
        for t in 0..p.n_days() {
            let sum: f64 = p.cap_share_column(t).iter().sum();
            assert!((sum - 0.97).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_dimensions() {
        let bad = SynthSpec {
            sectors: 1,
            days: 100,
            seed: 0,
            regime: Regime::Gbm,
        };
        assert!(matches!(synth_panel(&bad), Err(Error::InvalidSpec(_))));
        let bad = SynthSpec {
            sectors: 3,
            days: 59,
            seed: 0,
            regime: Regime::Gbm,
        };
        assert!(matches!(synth_panel(&bad), Err(Error::InvalidSpec(_))));
    }
}
