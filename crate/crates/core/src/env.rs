//! The sector-rotation decision process.
//!
//! At day `t` the agent sees the last `L` feature rows and picks one of
//! `S + 1` targets (every sector plus a dummy "cash" class). It earns
//! [`REWARD_HIT`] when the chosen sector is among the top-N sectors by
//! cap share on day `t + 1`, and [`REWARD_MISS`] otherwise. Market dynamics do
//! not depend on the action, so a rollout can score every observation in one
//! batched policy pass before sampling actions in order.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::data::SectorPanel;
use crate::error::{Error, Result};
use crate::features::FeatureTensor;
use crate::par::Execution;
use crate::rng::SeedTree;

pub const REWARD_HIT: f64 = 1.0;
pub const REWARD_MISS: f64 = -0.1;

/// Tolerance on `sum(probs) = 1` for policy outputs.
pub const PROB_SUM_TOLERANCE: f64 = 1e-9;

/// Observations scored per policy call during a rollout.
const EVAL_CHUNK: usize = 64;

/// Targets `0..S` are sectors; `S` is the dummy class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionSpace {
    n_targets: usize,
}

impl ActionSpace {
    pub fn for_sectors(n_sectors: usize) -> Result<Self> {
        if n_sectors == 0 {
            return Err(Error::InvalidSpec(
                "action space needs at least one sector".into(),
            ));
        }
        Ok(Self {
            n_targets: n_sectors + 1,
        })
    }

    pub fn n_targets(&self) -> usize {
        self.n_targets
    }

    pub fn n_sectors(&self) -> usize {
        self.n_targets - 1
    }

    pub fn dummy(&self) -> usize {
        self.n_targets - 1
    }

    pub fn is_dummy(&self, action: usize) -> bool {
        action == self.dummy()
    }
}

/// Ranking signal for the reward's top-N set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankBy {
    /// Cap-share level on the ranking day.
    #[default]
    Level,
    /// Day-over-day change in cap share.
    ShareChange,
}

/// The `n` sectors with the largest cap share on day `t`, best first; ties go
/// to the lower sector index.
pub fn top_n_sectors(panel: &SectorPanel, t: usize, n: usize) -> Result<Vec<usize>> {
    top_n_by(panel, t, n, RankBy::Level)
}

pub fn top_n_by(panel: &SectorPanel, t: usize, n: usize, rank_by: RankBy) -> Result<Vec<usize>> {
    if t >= panel.n_days() {
        return Err(Error::OutOfRange(format!("day {t} of {}", panel.n_days())));
    }
    if n > panel.n_sectors() {
        return Err(Error::OutOfRange(format!(
            "top {n} of {} sectors",
            panel.n_sectors()
        )));
    }
    let key = |s: usize| match rank_by {
        RankBy::Level => panel.cap_share(s, t),
        RankBy::ShareChange if t == 0 => 0.0,
        RankBy::ShareChange => panel.cap_share(s, t) - panel.cap_share(s, t - 1),
    };
    let mut idx: Vec<usize> = (0..panel.n_sectors()).collect();
    idx.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    idx.truncate(n);
    Ok(idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    /// Observation window length `L`.
    pub window: usize,
    /// Size of the rewarded top-N set.
    pub top_n: usize,
    #[serde(default)]
    pub rank_by: RankBy,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            window: 10,
            top_n: 10,
            rank_by: RankBy::Level,
        }
    }
}

/// Feature rows `t - L + 1 ..= t`, row-major `L x d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation<'a> {
    pub t_index: usize,
    pub window: &'a [f64],
    pub len: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome<'a> {
    pub reward: f64,
    /// `None` once the episode has reached the end of its day range.
    pub next: Option<Observation<'a>>,
    /// The realized top-N set on day `t + 1`.
    pub top_n: Vec<usize>,
}

/// One pass over a contiguous day range of a panel.
#[derive(Debug, Clone)]
pub struct SectorEnv<'a> {
    panel: &'a SectorPanel,
    features: &'a FeatureTensor,
    config: EnvConfig,
    actions: ActionSpace,
    first: usize,
    last: usize,
}

impl<'a> SectorEnv<'a> {
    /// Episodes cover observation days `t` whose window is fully valid and
    /// whose reward day `t + 1` lies in the inclusive `days` range.
    pub fn new(
        panel: &'a SectorPanel,
        features: &'a FeatureTensor,
        days: (usize, usize),
        config: EnvConfig,
    ) -> Result<Self> {
        if features.n_days() != panel.n_days() {
            return Err(Error::Shape(format!(
                "features cover {} days, panel {}",
                features.n_days(),
                panel.n_days()
            )));
        }
        if config.window == 0 {
            return Err(Error::InvalidSpec(
                "observation window must be positive".into(),
            ));
        }
        if config.top_n == 0 || config.top_n > panel.n_sectors() {
            return Err(Error::InvalidSpec(format!(
                "top_n {} must lie in 1..={}",
                config.top_n,
                panel.n_sectors()
            )));
        }
        if days.1 >= panel.n_days() || days.0 > days.1 {
            return Err(Error::OutOfRange(format!(
                "day range {days:?} on a {}-day panel",
                panel.n_days()
            )));
        }
        let first = days.0.max(features.valid_from() + config.window - 1);
        if days.1 == 0 || first > days.1 - 1 {
            return Err(Error::InsufficientHistory {
                found: days.1 - days.0 + 1,
                required: first + 2 - days.0,
            });
        }
        Ok(Self {
            panel,
            features,
            config,
            actions: ActionSpace::for_sectors(panel.n_sectors())?,
            first,
            last: days.1 - 1,
        })
    }

    pub fn panel(&self) -> &'a SectorPanel {
        self.panel
    }

    pub fn features(&self) -> &'a FeatureTensor {
        self.features
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn action_space(&self) -> ActionSpace {
        self.actions
    }

    /// First observation day.
    pub fn first_day(&self) -> usize {
        self.first
    }

    /// Last observation day (its reward uses the final day of the range).
    pub fn last_day(&self) -> usize {
        self.last
    }

    pub fn n_steps(&self) -> usize {
        self.last - self.first + 1
    }

    pub fn observe(&self, t: usize) -> Result<Observation<'a>> {
        if t < self.first || t > self.last {
            return Err(Error::OutOfRange(format!(
                "day {t} outside episode days {}..={}",
                self.first, self.last
            )));
        }
        Ok(Observation {
            t_index: t,
            window: self.features.window(t, self.config.window)?,
            len: self.config.window,
            dim: self.features.dim(),
        })
    }

    pub fn reset(&self) -> Observation<'a> {
        self.observe(self.first)
            .expect("first day validated at construction")
    }

    /// Reward for choosing `action` on day `t` together with the top-N set it
    /// was scored against.
    pub fn reward(&self, t: usize, action: usize) -> Result<(f64, Vec<usize>)> {
        if action >= self.actions.n_targets() {
            return Err(Error::OutOfRange(format!(
                "action {action} of {}",
                self.actions.n_targets()
            )));
        }
        let top = top_n_by(self.panel, t + 1, self.config.top_n, self.config.rank_by)?;
        let hit = !self.actions.is_dummy(action) && top.contains(&action);
        Ok((if hit { REWARD_HIT } else { REWARD_MISS }, top))
    }

    pub fn step(&self, obs: &Observation<'a>, action: usize) -> Result<StepOutcome<'a>> {
        let t = obs.t_index;
        if t < self.first || t > self.last {
            return Err(Error::OutOfRange(format!("day {t} is not an episode day")));
        }
        let (reward, top_n) = self.reward(t, action)?;
        let next = if t == self.last {
            None
        } else {
            Some(self.observe(t + 1)?)
        };
        Ok(StepOutcome {
            reward,
            next,
            top_n,
        })
    }
}

/// Policy and value estimate for one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStep {
    pub probs: Vec<f64>,
    pub value: f64,
}

/// Anything that maps observation windows to a distribution over targets and
/// a state value.
pub trait Policy {
    fn n_targets(&self) -> usize;
    fn evaluate(&self, batch: &[Observation<'_>]) -> Result<Vec<PolicyStep>>;
}

/// Equal probability on every target, zero value.
#[derive(Debug, Clone, Copy)]
pub struct UniformPolicy {
    pub n_targets: usize,
}

impl Policy for UniformPolicy {
    fn n_targets(&self) -> usize {
        self.n_targets
    }

    fn evaluate(&self, batch: &[Observation<'_>]) -> Result<Vec<PolicyStep>> {
        let p = 1.0 / self.n_targets as f64;
        Ok(batch
            .iter()
            .map(|_| PolicyStep {
                probs: vec![p; self.n_targets],
                value: 0.0,
            })
            .collect())
    }
}

/// Reject anything that is not a finite probability vector of the right size.
pub fn check_distribution(probs: &[f64], n_targets: usize) -> Result<()> {
    if probs.len() != n_targets {
        return Err(Error::Contract(format!(
            "policy emitted {} probabilities for {n_targets} targets",
            probs.len()
        )));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Contract(format!(
            "policy emitted an invalid probability in {probs:?}"
        )));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
        return Err(Error::Contract(format!(
            "policy probabilities sum to {sum}"
        )));
    }
    Ok(())
}

/// A rollout; `advantages` and `returns` are filled in by the trainer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub t_index: Vec<usize>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub entropies: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn mean_reward(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.total_reward() / self.len() as f64
        }
    }

    pub fn mean_entropy(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.entropies.iter().sum::<f64>() / self.len() as f64
        }
    }

    /// One delimited row per step for debugging.
    pub fn write_trace(&self, panel: &SectorPanel, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t_index", "date", "action", "log_prob", "reward", "value"])?;
        for i in 0..self.len() {
            let t = self.t_index[i];
            w.write_record([
                t.to_string(),
                panel.dates()[t].to_string(),
                self.actions[i].to_string(),
                self.old_log_probs[i].to_string(),
                self.rewards[i].to_string(),
                self.values[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// Score every episode observation with `policy`, chunked over `exec`.
pub fn evaluate_episode<P: Policy + Sync>(
    env: &SectorEnv<'_>,
    policy: &P,
    exec: Execution,
) -> Result<Vec<PolicyStep>> {
    if policy.n_targets() != env.action_space().n_targets() {
        return Err(Error::Contract(format!(
            "policy has {} targets, environment {}",
            policy.n_targets(),
            env.action_space().n_targets()
        )));
    }
    let n = env.n_steps();
    let chunks = exec.map_range(n.div_ceil(EVAL_CHUNK), |c| {
        let lo = env.first_day() + c * EVAL_CHUNK;
        let hi = (lo + EVAL_CHUNK).min(env.last_day() + 1);
        let obs: Vec<Observation<'_>> = (lo..hi).map(|t| env.observe(t)).collect::<Result<_>>()?;
        policy.evaluate(&obs)
    });
    let mut out = Vec::with_capacity(n);
    for c in chunks {
        out.extend(c?);
    }
    if out.len() != n {
        return Err(Error::Contract(format!(
            "policy returned {} steps for {n} observations",
            out.len()
        )));
    }
    for step in &out {
        check_distribution(&step.probs, policy.n_targets())?;
    }
    Ok(out)
}

/// Roll one episode from the first to the last observation day, sampling each
/// action from the policy's categorical distribution. Deterministic in `seed`.
pub fn run_episode<P: Policy + Sync>(
    env: &SectorEnv<'_>,
    policy: &P,
    seed: u64,
    exec: Execution,
) -> Result<Trajectory> {
    let steps = evaluate_episode(env, policy, exec)?;
    let mut rng = SeedTree::new(seed).stream("episode-actions");
    let mut traj = Trajectory::default();
    let mut obs = Some(env.reset());
    for step in &steps {
        let o = obs
            .take()
            .ok_or_else(|| Error::Contract("episode ended early".into()))?;
        let dist = WeightedIndex::new(&step.probs)
            .map_err(|e| Error::Contract(format!("policy distribution cannot be sampled: {e}")))?;
        let a = dist.sample(&mut rng);
        let out = env.step(&o, a)?;
        traj.t_index.push(o.t_index);
        traj.actions.push(a);
        traj.old_log_probs.push(step.probs[a].ln());
        traj.rewards.push(out.reward);
        traj.values.push(step.value);
        traj.entropies.push(entropy(&step.probs));
        obs = out.next;
    }
    Ok(traj)
}

/// `count` independent episodes seeded `base_seed + i`, in index order.
pub fn run_episodes<P: Policy + Sync>(
    env: &SectorEnv<'_>,
    policy: &P,
    base_seed: u64,
    count: usize,
    exec: Execution,
) -> Result<Vec<Trajectory>> {
    exec.map_range(count, |i| {
        run_episode(
            env,
            policy,
            base_seed.wrapping_add(i as u64),
            Execution::Sequential,
        )
    })
    .into_iter()
    .collect()
}
