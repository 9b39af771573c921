//! Experiment configuration and the train / backtest / compare pipeline.
//!
//! A config is a TOML document:
//!
//! ```toml
//! seed = 1
//! top_n = 10
//!
//! [data]
//! path = "panel.csv"          # or a [data.synth] table
//!
//! [split]
//! train_fraction = 0.8        # or train_start/train_end/test_start/test_end
//!
//! [backbone]
//! kind = "qasa"               # other fields default per kind
//! critic_kind = "mlp"         # optional, defaults to `kind`
//!
//! [ppo]
//! epochs = 100
//! ```
//!
//! Unknown keys anywhere are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::backbones::{ActorCritic, BackboneConfig, BackboneKind};
use crate::backtest::{compute_metrics, run_backtest, Backtest, BacktestConfig, MetricsReport};
use crate::data::{
    load_panel, synth_panel, ColumnSchema, LoadReport, SectorPanel, SplitIndices, SplitSpec,
    SynthSpec,
};
use crate::env::{EnvConfig, RankBy, SectorEnv};
use crate::error::{Error, Result};
use crate::features::{build_features_with, FeatureConfig, FeatureTensor};
use crate::par::Execution;
use crate::ppo::{train, write_reward_curve, EpisodeLog, PpoConfig, TrainOutcome};
use crate::rng::SeedTree;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const REWARDS_FILE: &str = "rewards.csv";
pub const RESOLVED_FILE: &str = "resolved.cfg";
pub const METRICS_FILE: &str = "metrics.txt";
pub const EQUITY_FILE: &str = "equity.csv";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub schema: Option<ColumnSchema>,
    pub synth: Option<SynthSpec>,
}

/// Either explicit dates or a chronological training fraction.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train_fraction: Option<f64>,
    pub train_start: Option<NaiveDate>,
    pub train_end: Option<NaiveDate>,
    pub test_start: Option<NaiveDate>,
    pub test_end: Option<NaiveDate>,
}

/// Backbone fields left unset take the per-kind defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub kind: BackboneKind,
    pub critic_kind: Option<BackboneKind>,
    pub hidden: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub dropout: Option<f64>,
    pub n_qubits: Option<usize>,
    pub q_layers: Option<usize>,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Qasa,
            critic_kind: None,
            hidden: None,
            layers: None,
            heads: None,
            dropout: None,
            n_qubits: None,
            q_layers: None,
        }
    }
}

impl BackboneSection {
    fn resolve(&self, kind: BackboneKind) -> BackboneConfig {
        let d = BackboneConfig::for_kind(kind);
        BackboneConfig {
            kind,
            hidden: self.hidden.unwrap_or(d.hidden),
            layers: self.layers.unwrap_or(d.layers),
            heads: self.heads.unwrap_or(d.heads),
            dropout: self.dropout.unwrap_or(d.dropout),
            n_qubits: self.n_qubits.unwrap_or(d.n_qubits),
            q_layers: self.q_layers.unwrap_or(d.q_layers),
        }
    }

    pub fn actor(&self) -> BackboneConfig {
        self.resolve(self.kind)
    }

    pub fn critic(&self) -> BackboneConfig {
        self.resolve(self.critic_kind.unwrap_or(self.kind))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub window: usize,
    pub rank_by: RankBy,
}

impl Default for EnvSection {
    fn default() -> Self {
        let e = EnvConfig::default();
        Self {
            window: e.window,
            rank_by: e.rank_by,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestSection {
    pub cost_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub top_n: usize,
    pub data: DataSection,
    pub split: SplitSection,
    pub backbone: BackboneSection,
    pub ppo: PpoConfig,
    pub env: EnvSection,
    pub backtest: BacktestSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            top_n: 10,
            data: DataSection::default(),
            split: SplitSection::default(),
            backbone: BackboneSection::default(),
            ppo: PpoConfig::default(),
            env: EnvSection::default(),
            backtest: BacktestSection::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub model: Option<BackboneKind>,
    pub seed: Option<u64>,
    pub data: Option<PathBuf>,
    pub top_n: Option<usize>,
    pub epochs: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }

    /// Parse a config file; relative data paths resolve against its directory
    /// and are stored absolute, so a resolved copy works from anywhere.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let (Some(p), Some(dir)) = (cfg.data.path.as_mut(), path.parent()) {
            if p.is_relative() {
                *p = std::path::absolute(dir.join(&*p))?;
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config types serialize to TOML")
    }

    /// Apply `o`, returning one message per value that replaced a file value.
    pub fn apply(&mut self, o: &Overrides) -> Vec<String> {
        let mut log = Vec::new();
        let mut note = |key: &str, old: String, new: String| {
            if old != new {
                log.push(format!("flag --{key} = {new} overrides config value {old}"));
            }
        };
        if let Some(k) = o.model {
            note("model", self.backbone.kind.to_string(), k.to_string());
            self.backbone.kind = k;
        }
        if let Some(s) = o.seed {
            note("seed", self.seed.to_string(), s.to_string());
            self.seed = s;
        }
        if let Some(d) = &o.data {
            let old = self
                .data
                .path
                .as_ref()
                .map_or("<unset>".into(), |p| p.display().to_string());
            let d = std::path::absolute(d).unwrap_or_else(|_| d.clone());
            note("data", old, d.display().to_string());
            self.data.path = Some(d);
            self.data.synth = None;
        }
        if let Some(n) = o.top_n {
            note("top-n", self.top_n.to_string(), n.to_string());
            self.top_n = n;
        }
        if let Some(e) = o.epochs {
            note("epochs", self.ppo.epochs.to_string(), e.to_string());
            self.ppo.epochs = e;
        }
        log
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.path, &self.data.synth) {
            (None, None) => {
                return Err(Error::Config(
                    "data: set `path` or a [data.synth] table".into(),
                ))
            }
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "data: `path` and [data.synth] are exclusive".into(),
                ))
            }
            _ => {}
        }
        if self.top_n == 0 {
            return Err(Error::Config("top_n must be positive".into()));
        }
        if self.env.window == 0 {
            return Err(Error::Config("env.window must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.backtest.cost_rate) {
            return Err(Error::Config(format!(
                "backtest.cost_rate {} not in [0, 1)",
                self.backtest.cost_rate
            )));
        }
        let s = &self.split;
        let dates = [s.train_start, s.train_end, s.test_start, s.test_end];
        let n_dates = dates.iter().filter(|d| d.is_some()).count();
        if s.train_fraction.is_some() && n_dates > 0 {
            return Err(Error::Config(
                "split: give `train_fraction` or dates, not both".into(),
            ));
        }
        if n_dates != 0 && n_dates != 4 {
            return Err(Error::Config(
                "split: dates need all of train_start, train_end, test_start, test_end".into(),
            ));
        }
        self.backbone
            .actor()
            .validate()
            .map_err(|e| Error::Config(format!("backbone: {e}")))?;
        self.backbone
            .critic()
            .validate()
            .map_err(|e| Error::Config(format!("backbone (critic): {e}")))?;
        self.ppo.validate()
    }

    /// Explicit dates, a fraction, or the default experiment split.
    pub fn split_spec(&self, panel: &SectorPanel) -> Result<SplitSpec> {
        let s = &self.split;
        if let Some(f) = s.train_fraction {
            return SplitSpec::by_fraction(panel, f);
        }
        match (s.train_start, s.train_end, s.test_start, s.test_end) {
            (Some(a), Some(b), Some(c), Some(d)) => Ok(SplitSpec {
                train_start: a,
                train_end: b,
                test_start: c,
                test_end: d,
            }),
            _ => Ok(SplitSpec::default_dates()),
        }
    }
}

/// Panel, features normalized on the training range, and split indices.
pub struct Prepared {
    pub panel: SectorPanel,
    pub features: FeatureTensor,
    pub split: SplitIndices,
    pub load_report: Option<LoadReport>,
}

pub fn load_data(cfg: &DataSection) -> Result<(SectorPanel, Option<LoadReport>)> {
    match (&cfg.path, &cfg.synth) {
        (Some(p), _) => {
            if !p.exists() {
                return Err(Error::Config(format!(
                    "data file {} does not exist",
                    p.display()
                )));
            }
            let (panel, report) = load_panel(p, &cfg.schema.clone().unwrap_or_default())?;
            Ok((panel, Some(report)))
        }
        (None, Some(spec)) => Ok((synth_panel(spec)?, None)),
        (None, None) => Err(Error::Config(
            "data: set `path` or a [data.synth] table".into(),
        )),
    }
}

pub fn prepare(cfg: &ExperimentConfig, exec: Execution) -> Result<Prepared> {
    cfg.validate()?;
    let (panel, load_report) = load_data(&cfg.data)?;
    let split = cfg
        .split_spec(&panel)?
        .resolve(&panel)
        .map_err(|e| match e {
            Error::InvalidSpec(m) if cfg.split == SplitSection::default() => {
                Error::InvalidSpec(format!(
            "{m} (the default split uses fixed dates; set [split] train_fraction or explicit dates)"
        ))
            }
            other => other,
        })?;
    let fc = FeatureConfig {
        zscore_range: Some(split.train),
        ..FeatureConfig::default()
    };
    let features = build_features_with(&panel, &fc, exec)?;
    Ok(Prepared {
        panel,
        features,
        split,
        load_report,
    })
}

impl Prepared {
    pub fn env_config(&self, cfg: &ExperimentConfig) -> EnvConfig {
        EnvConfig {
            window: cfg.env.window,
            top_n: cfg.top_n,
            rank_by: cfg.env.rank_by,
        }
    }
}

/// Train per `cfg` on data from [`prepare`] and write the checkpoint, reward
/// curve and resolved config into `out`.
pub fn run_train(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    out: &Path,
    exec: Execution,
    on_episode: impl FnMut(&EpisodeLog),
) -> Result<TrainOutcome> {
    let env = SectorEnv::new(
        &prep.panel,
        &prep.features,
        prep.split.train,
        prep.env_config(cfg),
    )?;
    let seeds = SeedTree::new(cfg.seed);
    let model = ActorCritic::new(
        &cfg.backbone.actor(),
        &cfg.backbone.critic(),
        cfg.env.window,
        prep.features.dim(),
        env.action_space().n_targets(),
        &seeds,
    )?
    .with_execution(exec);
    let outcome = train(&env, model, &cfg.ppo, &seeds, exec, on_episode)?;
    std::fs::create_dir_all(out)?;
    let mut meta = BTreeMap::new();
    meta.insert("seed".to_string(), cfg.seed.to_string());
    meta.insert("episodes".to_string(), cfg.ppo.epochs.to_string());
    outcome
        .checkpoint(&meta)
        .write(&out.join(CHECKPOINT_FILE))?;
    write_reward_curve(&outcome.curve, &out.join(REWARDS_FILE))?;
    std::fs::write(out.join(RESOLVED_FILE), cfg.to_toml())?;
    Ok(outcome)
}

/// Backtest the checkpoint at `checkpoint` on the test split and write the
/// metrics and equity curve into `out`.
pub fn run_backtest_files(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    checkpoint: &Path,
    out: &Path,
    exec: Execution,
) -> Result<(Backtest, MetricsReport)> {
    let ckpt = crate::autodiff::Checkpoint::read(checkpoint)?;
    let model = ActorCritic::from_checkpoint(&ckpt, Some(cfg.backbone.kind))?.with_execution(exec);
    let bt_cfg = BacktestConfig {
        top_n: cfg.top_n,
        window: cfg.env.window,
        cost_rate: cfg.backtest.cost_rate,
    };
    let bt = run_backtest(
        &model,
        &prep.panel,
        &prep.features,
        prep.split.test,
        &bt_cfg,
        exec,
    )?;
    let metrics = compute_metrics(&bt.curve.values)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(METRICS_FILE), metrics.to_key_values())?;
    bt.write_curve(&prep.panel, &out.join(EQUITY_FILE))?;
    Ok((bt, metrics))
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub run: PathBuf,
    pub model: String,
    pub final_reward: Option<f64>,
    pub metrics: Option<MetricsReport>,
    /// Why the row is incomplete.
    pub missing: Vec<String>,
}

impl RunSummary {
    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }
}

/// Gather what a run directory holds; missing pieces are recorded, not errors.
pub fn summarize_run(dir: &Path) -> RunSummary {
    let mut missing = Vec::new();
    let model = match ExperimentConfig::read(&dir.join(RESOLVED_FILE)) {
        Ok(c) => c.backbone.kind.to_string(),
        Err(_) => {
            missing.push(RESOLVED_FILE.to_string());
            dir.file_name()
                .map_or("?".into(), |n| n.to_string_lossy().into_owned())
        }
    };
    let final_reward = read_final_reward(&dir.join(REWARDS_FILE));
    if final_reward.is_none() {
        missing.push(REWARDS_FILE.to_string());
    }
    let metrics = std::fs::read_to_string(dir.join(METRICS_FILE))
        .ok()
        .and_then(|t| MetricsReport::parse_key_values(&t).ok());
    if metrics.is_none() {
        missing.push(METRICS_FILE.to_string());
    }
    RunSummary {
        run: dir.to_path_buf(),
        model,
        final_reward,
        metrics,
        missing,
    }
}

fn read_final_reward(path: &Path) -> Option<f64> {
    let mut r = csv::Reader::from_path(path).ok()?;
    let col = r.headers().ok()?.iter().position(|h| h == "total_reward")?;
    let mut last = None;
    for rec in r.records() {
        last = Some(rec.ok()?.get(col)?.parse().ok()?);
    }
    last
}

/// Model, final reward and the five metrics, one row per run.
pub struct ComparisonTable(pub Vec<RunSummary>);

pub const COMPARE_COLUMNS: [&str; 7] = ["model", "final_reward", "CR", "AR", "AV", "SR", "MDD"];

impl fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:>13} {:>9} {:>9} {:>9} {:>9} {:>9}",
            COMPARE_COLUMNS[0],
            COMPARE_COLUMNS[1],
            COMPARE_COLUMNS[2],
            COMPARE_COLUMNS[3],
            COMPARE_COLUMNS[4],
            COMPARE_COLUMNS[5],
            COMPARE_COLUMNS[6]
        )?;
        let pct = |x: f64| format!("{:.2}%", 100.0 * x);
        let dash = || "-".to_string();
        for r in &self.0 {
            let reward = r.final_reward.map_or_else(dash, |x| format!("{x:.2}"));
            let (cr, ar, av, sr, mdd) = match &r.metrics {
                Some(m) => (
                    pct(m.cumulative_return),
                    pct(m.annualized_return),
                    pct(m.annualized_volatility),
                    m.sharpe_ratio.map_or("undef".into(), |s| format!("{s:.3}")),
                    pct(m.max_drawdown),
                ),
                None => (dash(), dash(), dash(), dash(), dash()),
            };
            write!(
                f,
                "{:<12} {reward:>13} {cr:>9} {ar:>9} {av:>9} {sr:>9} {mdd:>9}",
                r.model
            )?;
            if !r.is_complete() {
                write!(f, "  [incomplete: missing {}]", r.missing.join(", "))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Regime;

    fn synth_cfg() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.data.synth = Some(SynthSpec {
            sectors: 4,
            days: 160,
            seed: 3,
            regime: Regime::Gbm,
        });
        c.split.train_fraction = Some(0.75);
        c.top_n = 2;
        c.backbone = BackboneSection {
            kind: BackboneKind::Mlp,
            hidden: Some(8),
            layers: Some(1),
            ..Default::default()
        };
        c.ppo.epochs = 2;
        c.ppo.ppo_epochs = 1;
        c
    }

    #[test]
    fn defaults_follow_the_experiment_setup() {
        let c = ExperimentConfig::default();
        assert_eq!((c.top_n, c.env.window, c.ppo.epochs), (10, 10, 100));
        assert_eq!(
            c.backbone.actor(),
            BackboneConfig::for_kind(BackboneKind::Qasa)
        );
        let c = ExperimentConfig::from_toml("[backbone]\nkind = \"qrwkv\"\n").unwrap();
        assert_eq!(c.backbone.actor().layers, 4);
    }

    #[test]
    fn unknown_keys_are_rejected_with_field_names() {
        let e = ExperimentConfig::from_toml("[ppo]\ngama = 0.9\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("gama"), "{e}");
        assert!(ExperimentConfig::from_toml("bogus = 1\n").is_err());
        assert!(ExperimentConfig::from_toml("[backbone]\nkind = \"gru\"\n").is_err());
    }

    #[test]
    fn validation_messages() {
        let c = ExperimentConfig::default();
        assert!(c.validate().unwrap_err().to_string().contains("data"));
        let mut c = synth_cfg();
        c.split.test_end = NaiveDate::from_ymd_opt(2020, 1, 1);
        assert!(c.validate().is_err());
        let mut c = synth_cfg();
        c.backbone.heads = Some(3);
        c.backbone.kind = BackboneKind::Transformer;
        assert!(c.validate().unwrap_err().to_string().contains("backbone"));
    }

    #[test]
    fn flags_win_and_are_logged() {
        let mut c = synth_cfg();
        let log = c.apply(&Overrides {
            model: Some(BackboneKind::Qnn),
            seed: Some(9),
            epochs: Some(2),
            ..Default::default()
        });
        assert_eq!(c.backbone.kind, BackboneKind::Qnn);
        assert_eq!(c.seed, 9);
        assert_eq!(log.len(), 2, "{log:?}");
        assert!(log[0].contains("--model") && log[0].contains("mlp"));
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = synth_cfg();
        c.backbone.critic_kind = Some(BackboneKind::Lstm);
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.backbone.critic().kind, BackboneKind::Lstm);
    }

    #[test]
    fn train_backtest_compare_round() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = synth_cfg();
        let prep = prepare(&cfg, Execution::Sequential).unwrap();
        let out = run_train(&cfg, &prep, dir.path(), Execution::Sequential, |_| {}).unwrap();
        assert_eq!(out.curve.len(), 2);
        for f in [CHECKPOINT_FILE, REWARDS_FILE, RESOLVED_FILE] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let resolved = ExperimentConfig::read(&dir.path().join(RESOLVED_FILE)).unwrap();
        assert_eq!(resolved, cfg);
        let (bt, m) = run_backtest_files(
            &cfg,
            &prep,
            &dir.path().join(CHECKPOINT_FILE),
            dir.path(),
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(bt.curve.values.len(), 40);
        let s = summarize_run(dir.path());
        assert!(s.is_complete());
        assert_eq!(s.metrics, Some(m));
        assert_eq!(s.final_reward, Some(out.curve[1].total_reward));

        let mut wrong = cfg.clone();
        wrong.backbone.kind = BackboneKind::Lstm;
        let e = run_backtest_files(
            &wrong,
            &prep,
            &dir.path().join(CHECKPOINT_FILE),
            dir.path(),
            Execution::Sequential,
        );
        assert!(matches!(e, Err(Error::KindMismatch { .. })));

        let empty = tempfile::tempdir().unwrap();
        let table = ComparisonTable(vec![s, summarize_run(empty.path())]).to_string();
        assert_eq!(table.lines().count(), 3);
        assert!(table.lines().nth(2).unwrap().contains("incomplete"));
        assert!(!table.lines().nth(1).unwrap().contains("incomplete"));
    }
}
