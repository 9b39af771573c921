//! Proximal policy optimization: GAE, the clipped surrogate update with
//! entropy regularization, and the episode-level training loop.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_grad_norm, Adam, Checkpoint, ParamStore, Tape, Tensor, Var};
use crate::backbones::{ActorCritic, Mode};
use crate::env::{run_episode, SectorEnv, Trajectory};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::rng::{SeedTree, StreamRng};

/// Added to the minibatch standard deviation before dividing.
pub const ADVANTAGE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub clip_eps: f64,
    pub entropy_beta: f64,
    pub batch_size: usize,
    pub ppo_epochs: usize,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub gae_lambda: f64,
    /// Training episodes.
    pub epochs: usize,
    /// Standardize advantages within each minibatch.
    pub normalize_advantages: bool,
    /// Global gradient-norm ceiling applied to each network separately.
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            clip_eps: 0.2,
            entropy_beta: 0.01,
            batch_size: 64,
            ppo_epochs: 10,
            lr_actor: 3e-4,
            lr_critic: 1e-3,
            gae_lambda: 0.95,
            epochs: 100,
            normalize_advantages: true,
            max_grad_norm: 0.5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("ppo.gamma must be in (0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad(format!(
                "ppo.gae_lambda must be in [0, 1], got {}",
                self.gae_lambda
            ));
        }
        if !(self.clip_eps > 0.0) {
            return bad(format!(
                "ppo.clip_eps must be positive, got {}",
                self.clip_eps
            ));
        }
        if !(self.entropy_beta >= 0.0 && self.entropy_beta.is_finite()) {
            return bad(format!(
                "ppo.entropy_beta must be finite and non-negative, got {}",
                self.entropy_beta
            ));
        }
        if self.batch_size == 0 || self.ppo_epochs == 0 || self.epochs == 0 {
            return bad("ppo.batch_size, ppo.ppo_epochs and ppo.epochs must be positive".into());
        }
        for (name, lr) in [("lr_actor", self.lr_actor), ("lr_critic", self.lr_critic)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("ppo.{name} must be positive, got {lr}"));
            }
        }
        if !(self.max_grad_norm > 0.0) {
            return bad(format!(
                "ppo.max_grad_norm must be positive, got {}",
                self.max_grad_norm
            ));
        }
        Ok(())
    }
}

/// Generalized advantage estimates and value targets (`advantages + values`)
/// with a zero bootstrap after the last step.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() {
        return Err(Error::Shape(format!(
            "{} rewards but {} values",
            rewards.len(),
            values.len()
        )));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Per-sample clipped surrogate `min(r A, clip(r, 1 - eps, 1 + eps) A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// Shift and scale to zero mean and unit variance.
pub fn normalize(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    xs.iter()
        .map(|x| (x - mean) / (std + ADVANTAGE_EPS))
        .collect()
}

/// Tape nodes of the actor objective for one minibatch.
pub struct ActorLoss {
    /// `-mean(surrogate) - beta * mean(entropy)`, the quantity minimized.
    pub loss: Var,
    /// `[B]` probability ratios.
    pub ratio: Var,
    /// Mean entropy of the batch distributions.
    pub entropy: Var,
}

/// Build the clipped actor loss from `[B, n]` log-probabilities.
pub fn actor_loss(
    tape: &Tape,
    log_probs: Var,
    actions: &[usize],
    old_log_probs: &[f64],
    advantages: &[f64],
    clip_eps: f64,
    entropy_beta: f64,
) -> Result<ActorLoss> {
    let shape = tape.shape(log_probs);
    let (b, n) = match shape[..] {
        [b, n] => (b, n),
        _ => {
            return Err(Error::Shape(format!(
                "log-probabilities must be [B, n], got {shape:?}"
            )))
        }
    };
    if actions.len() != b || old_log_probs.len() != b || advantages.len() != b {
        return Err(Error::Shape(format!(
            "batch of {b} with {} actions, {} log-probabilities, {} advantages",
            actions.len(),
            old_log_probs.len(),
            advantages.len()
        )));
    }
    let mut onehot = vec![0.0; b * n];
    for (i, &a) in actions.iter().enumerate() {
        if a >= n {
            return Err(Error::OutOfRange(format!("action {a} with {n} targets")));
        }
        onehot[i * n + a] = 1.0;
    }
    let picked = tape.sum_axis(
        tape.mul(log_probs, tape.constant(Tensor::new(&[b, n], onehot)?))?,
        1,
    )?;
    let old = tape.constant(Tensor::new(&[b], old_log_probs.to_vec())?);
    let ratio = tape.exp(tape.sub(picked, old)?);
    let adv = tape.constant(Tensor::new(&[b], advantages.to_vec())?);
    let unclipped = tape.mul(ratio, adv)?;
    let clipped = tape.mul(tape.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps), adv)?;
    let surrogate = tape.mean(tape.minimum(unclipped, clipped)?);
    let plogp = tape.mul(tape.exp(log_probs), log_probs)?;
    let entropy = tape.scale(tape.sum(plogp), -1.0 / b as f64);
    let loss = tape.sub(tape.neg(surrogate), tape.scale(entropy, entropy_beta))?;
    Ok(ActorLoss {
        loss,
        ratio,
        entropy,
    })
}

/// Mean squared error between `[B]` predictions and targets.
pub fn critic_loss(tape: &Tape, values: Var, returns: &[f64]) -> Result<Var> {
    let target = tape.constant(Tensor::new(&[returns.len()], returns.to_vec())?);
    Ok(tape.mean(tape.square(tape.sub(values, target)?)?))
}

/// One optimizer per network.
#[derive(Debug, Clone)]
pub struct Optimizers {
    pub actor: Adam,
    pub critic: Adam,
}

impl Optimizers {
    pub fn new(config: &PpoConfig) -> Self {
        Self {
            actor: Adam::new(config.lr_actor),
            critic: Adam::new(config.lr_critic),
        }
    }
}

/// Averages over every minibatch of one update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    /// Fraction of samples whose ratio left `[1 - eps, 1 + eps]`.
    pub clip_fraction: f64,
    /// `max |ratio - 1|` on the first minibatch, before any parameter change.
    pub first_pass_ratio_error: f64,
    pub minibatches: usize,
}

fn check_params(store: &ParamStore, who: &str) -> Result<()> {
    for (name, t) in store.iter() {
        if let Some(v) = t.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{who} parameter `{name}` holds {v}"
            )));
        }
    }
    Ok(())
}

/// Fail if any actor or critic parameter is NaN or infinite.
pub fn check_model(model: &ActorCritic) -> Result<()> {
    check_params(model.actor.params(), "actor")?;
    check_params(model.critic.params(), "critic")
}

/// `ppo_epochs` shuffled passes of minibatch updates over `traj`, whose
/// advantages and returns must already be filled in.
pub fn ppo_update(
    model: &mut ActorCritic,
    opt: &mut Optimizers,
    env: &SectorEnv<'_>,
    traj: &Trajectory,
    config: &PpoConfig,
    shuffle: &mut StreamRng,
    dropout: &RefCell<StreamRng>,
) -> Result<UpdateStats> {
    let n = traj.len();
    if traj.advantages.len() != n || traj.returns.len() != n {
        return Err(Error::Contract(
            "advantages must be computed before the update".into(),
        ));
    }
    let mut stats = UpdateStats::default();
    if n == 0 {
        return Ok(stats);
    }
    let mut order: Vec<usize> = (0..n).collect();
    let (mut clipped, mut seen) = (0usize, 0usize);
    for epoch in 0..config.ppo_epochs {
        order.shuffle(shuffle);
        for (mb, idx) in order.chunks(config.batch_size).enumerate() {
            let obs = idx
                .iter()
                .map(|&i| env.observe(traj.t_index[i]))
                .collect::<Result<Vec<_>>>()?;
            let x = model.batch_input(&obs)?;
            let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let actions: Vec<usize> = idx.iter().map(|&i| traj.actions[i]).collect();
            let mut adv = pick(&traj.advantages);
            if config.normalize_advantages && adv.len() > 1 {
                adv = normalize(&adv);
            }
            let snapshot = |what: &str, value: f64| {
                Error::NonFinite(format!(
                    "{what} = {value} at epoch {epoch}, minibatch {mb} (size {}, advantage range [{:.4}, {:.4}])",
                    idx.len(),
                    adv.iter().cloned().fold(f64::INFINITY, f64::min),
                    adv.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                ))
            };

            let tape = Tape::new();
            let bound = model.actor.params().bind(&tape);
            let xv = tape.constant(x.clone());
            let lp = model.log_probs(&tape, &bound, xv, Mode::Train(dropout))?;
            let al = actor_loss(
                &tape,
                lp,
                &actions,
                &pick(&traj.old_log_probs),
                &adv,
                config.clip_eps,
                config.entropy_beta,
            )?;
            let a_loss = tape.value(al.loss).item()?;
            if !a_loss.is_finite() {
                return Err(snapshot("actor loss", a_loss));
            }
            let ratio = tape.value(al.ratio);
            if epoch == 0 && mb == 0 {
                stats.first_pass_ratio_error = ratio
                    .data()
                    .iter()
                    .map(|r| (r - 1.0).abs())
                    .fold(0.0, f64::max);
            }
            clipped += ratio
                .data()
                .iter()
                .filter(|r| (*r - 1.0).abs() > config.clip_eps)
                .count();
            seen += idx.len();
            stats.entropy += tape.value(al.entropy).item()?;
            let mut g = tape.backward(al.loss)?;
            let mut grads = bound.gradients(model.actor.params(), &mut g);
            clip_grad_norm(&mut grads, config.max_grad_norm);
            opt.actor.step(model.actor.params_mut(), &grads)?;

            let tape = Tape::new();
            let bound = model.critic.params().bind(&tape);
            let xv = tape.constant(x);
            let v = model.values(&tape, &bound, xv, Mode::Train(dropout))?;
            let cl = critic_loss(&tape, v, &pick(&traj.returns))?;
            let c_loss = tape.value(cl).item()?;
            if !c_loss.is_finite() {
                return Err(snapshot("critic loss", c_loss));
            }
            let mut g = tape.backward(cl)?;
            let mut grads = bound.gradients(model.critic.params(), &mut g);
            clip_grad_norm(&mut grads, config.max_grad_norm);
            opt.critic.step(model.critic.params_mut(), &grads)?;

            stats.actor_loss += a_loss;
            stats.critic_loss += c_loss;
            stats.minibatches += 1;
        }
    }
    let k = stats.minibatches as f64;
    stats.actor_loss /= k;
    stats.critic_loss /= k;
    stats.entropy /= k;
    stats.clip_fraction = clipped as f64 / seen as f64;
    check_model(model)?;
    Ok(stats)
}

/// One row of the reward curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeLog {
    pub episode: usize,
    pub total_reward: f64,
    pub mean_reward: f64,
    pub mean_entropy: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
}

pub fn write_reward_curve(curve: &[EpisodeLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "episode",
        "total_reward",
        "mean_entropy",
        "actor_loss",
        "critic_loss",
    ])?;
    for e in curve {
        w.write_record([
            e.episode.to_string(),
            e.total_reward.to_string(),
            e.mean_entropy.to_string(),
            e.actor_loss.to_string(),
            e.critic_loss.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub struct TrainOutcome {
    pub model: ActorCritic,
    pub curve: Vec<EpisodeLog>,
}

impl TrainOutcome {
    /// Checkpoint of the trained model carrying `extra` metadata.
    pub fn checkpoint(&self, extra: &BTreeMap<String, String>) -> Checkpoint {
        self.model.to_checkpoint(extra)
    }

    /// Mean per-step reward over the last `k` episodes.
    pub fn trailing_mean_reward(&self, k: usize) -> f64 {
        let tail = &self.curve[self.curve.len().saturating_sub(k)..];
        tail.iter().map(|e| e.mean_reward).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Sampling seed of episode `i` under `seeds`.
pub fn episode_seed(seeds: &SeedTree, i: usize) -> u64 {
    seeds.child("episode").index(i as u64).rng().next_u64()
}

/// Run `config.epochs` episodes on `env`, each followed by [`ppo_update`].
/// `on_episode` sees every curve row as it is produced.
pub fn train(
    env: &SectorEnv<'_>,
    mut model: ActorCritic,
    config: &PpoConfig,
    seeds: &SeedTree,
    exec: Execution,
    mut on_episode: impl FnMut(&EpisodeLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut opt = Optimizers::new(config);
    let mut shuffle = seeds.stream("minibatch");
    let dropout = RefCell::new(seeds.stream("dropout"));
    let mut curve = Vec::with_capacity(config.epochs);
    for episode in 0..config.epochs {
        check_model(&model)?;
        let mut traj = run_episode(env, &model, episode_seed(seeds, episode), exec)?;
        let (adv, ret) = compute_gae(&traj.rewards, &traj.values, config.gamma, config.gae_lambda)?;
        traj.advantages = adv;
        traj.returns = ret;
        let stats = ppo_update(
            &mut model,
            &mut opt,
            env,
            &traj,
            config,
            &mut shuffle,
            &dropout,
        )?;
        let log = EpisodeLog {
            episode,
            total_reward: traj.total_reward(),
            mean_reward: traj.mean_reward(),
            mean_entropy: traj.mean_entropy(),
            actor_loss: stats.actor_loss,
            critic_loss: stats.critic_loss,
        };
        on_episode(&log);
        curve.push(log);
    }
    Ok(TrainOutcome { model, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{central_difference, max_relative_error};
    use crate::backbones::{BackboneConfig, BackboneKind};
    use crate::data::{synth_panel, Regime, SynthSpec};
    use crate::env::EnvConfig;
    use crate::features::{build_features, FeatureConfig};
    use rand::Rng;

    fn gae_oracle(r: &[f64], v: &[f64], g: f64, l: f64) -> Vec<f64> {
        let n = r.len();
        let delta: Vec<f64> = (0..n)
            .map(|t| r[t] + g * if t + 1 < n { v[t + 1] } else { 0.0 } - v[t])
            .collect();
        (0..n)
            .map(|t| {
                (t..n)
                    .map(|k| (g * l).powi((k - t) as i32) * delta[k])
                    .sum()
            })
            .collect()
    }

    #[test]
    fn gae_reduces_to_reward_to_go() {
        let r = [1.0, -0.1, 1.0, 1.0];
        let (a, ret) = compute_gae(&r, &[0.0; 4], 0.9, 1.0).unwrap();
        let expect = [1.0 - 0.09 + 0.81 + 0.729, -0.1 + 0.9 + 0.81, 1.9, 1.0];
        for i in 0..4 {
            assert!((a[i] - expect[i]).abs() < 1e-12);
            assert_eq!(a[i], ret[i]);
        }
        let (a, _) = compute_gae(&[0.0; 5], &[0.0; 5], 0.99, 0.95).unwrap();
        assert!(a.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn gae_matches_double_sum() {
        let mut rng = SeedTree::new(3).stream("gae");
        for _ in 0..200 {
            let n = rng.random_range(1..=8);
            let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (g, l) = (rng.random_range(0.5..1.0), rng.random_range(0.0..1.0));
            let (a, ret) = compute_gae(&r, &v, g, l).unwrap();
            for (t, o) in gae_oracle(&r, &v, g, l).iter().enumerate() {
                assert!((a[t] - o).abs() < 1e-10);
                assert!((ret[t] - (o + v[t])).abs() < 1e-10);
            }
        }
        assert!(compute_gae(&[1.0], &[], 0.9, 0.9).is_err());
    }

    #[test]
    fn gae_lambda_zero_gives_td_errors_on_chain() {
        // Three-state deterministic chain s0 -> s1 -> s2 -> end with rewards 1, 2, 3.
        let (r, g) = ([1.0, 2.0, 3.0], 0.9);
        let v = [1.0 + g * (2.0 + g * 3.0), 2.0 + g * 3.0, 3.0];
        let (a, _) = compute_gae(&r, &v, g, 0.0).unwrap();
        assert!(a.iter().all(|x| x.abs() < 1e-12));
        let v2 = [0.5, 1.0, 1.5];
        let (a, _) = compute_gae(&r, &v2, g, 0.0).unwrap();
        for t in 0..3 {
            let next = if t < 2 { v2[t + 1] } else { 0.0 };
            assert!((a[t] - (r[t] + g * next - v2[t])).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_built_batch_loss() {
        // ratios 0.5, 1.0, 1.5; advantages 1, -2, 3; eps 0.2:
        // min(0.5, 0.8) = 0.5, min(-2, -2) = -2, min(4.5, 3.6) = 3.6.
        let tape = Tape::new();
        let lp = tape.var(
            Tensor::new(
                &[3, 2],
                vec![
                    0.5f64.ln(),
                    0.5f64.ln(),
                    0.5f64.ln(),
                    0.5f64.ln(),
                    0.5f64.ln(),
                    0.5f64.ln(),
                ],
            )
            .unwrap(),
        );
        let old = [1.0f64.ln(), 0.5f64.ln(), (0.5f64 / 1.5).ln()];
        let l = actor_loss(&tape, lp, &[0, 1, 0], &old, &[1.0, -2.0, 3.0], 0.2, 0.0).unwrap();
        assert!((tape.value(l.loss).item().unwrap() - (-(0.5 - 2.0 + 3.6) / 3.0)).abs() < 1e-12);
        assert!((tape.value(l.entropy).item().unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_advantage_leaves_only_entropy_gradient() {
        let mut rng = SeedTree::new(4).stream("ent");
        let raw: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let beta = 0.3;
        let grad = |raw: &[f64]| {
            let tape = Tape::new();
            let z = tape.var(Tensor::new(&[3, 4], raw.to_vec()).unwrap());
            let lp = tape.log_softmax(z).unwrap();
            let l = actor_loss(
                &tape,
                lp,
                &[0, 3, 1],
                &[-1.0, -2.0, -0.5],
                &[0.0; 3],
                0.2,
                beta,
            )
            .unwrap();
            let mut g = tape.backward(l.loss).unwrap();
            (
                tape.value(l.loss).item().unwrap(),
                g.take(z).unwrap().data().to_vec(),
            )
        };
        let neg_entropy = |raw: &[f64]| {
            raw.chunks(4)
                .map(|row| {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
                    row.iter()
                        .map(|x| (x - m).exp() / z)
                        .map(|p| p * p.ln())
                        .sum::<f64>()
                })
                .sum::<f64>()
                * beta
                / 3.0
        };
        let (loss, g) = grad(&raw);
        assert!((loss - neg_entropy(&raw)).abs() < 1e-12);
        let num = central_difference(&raw, 1e-6, neg_entropy);
        assert!(max_relative_error(&g, &num, 1e-6) < 1e-6);
    }

    #[test]
    fn surrogate_is_a_lower_bound() {
        for &r in &[0.1, 0.79, 0.8, 1.0, 1.2, 1.7] {
            for &a in &[-2.0, -0.3, 0.0, 0.4, 5.0] {
                let s = clipped_surrogate(r, a, 0.2);
                assert!(s <= r * a && s <= r.clamp(0.8, 1.2) * a);
            }
        }
        assert_eq!(clipped_surrogate(1.0, 0.7, 0.2), 0.7);
    }

    #[test]
    fn normalize_standardizes() {
        let z = normalize(&[1.0, 2.0, 3.0, 6.0]);
        assert!(z.iter().sum::<f64>().abs() < 1e-12);
        assert!((z.iter().map(|x| x * x).sum::<f64>() / 4.0 - 1.0).abs() < 1e-6);
        assert_eq!(normalize(&[2.0, 2.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = PpoConfig::default();
        assert_eq!(
            (
                c.gamma,
                c.clip_eps,
                c.entropy_beta,
                c.batch_size,
                c.ppo_epochs
            ),
            (0.99, 0.2, 0.01, 64, 10)
        );
        assert_eq!(
            (c.lr_actor, c.lr_critic, c.gae_lambda, c.epochs),
            (3e-4, 1e-3, 0.95, 100)
        );
        assert!(c.validate().is_ok());
        assert!(PpoConfig {
            gamma: 0.0,
            ..c.clone()
        }
        .validate()
        .is_err());
        assert!(PpoConfig {
            clip_eps: 0.0,
            ..c.clone()
        }
        .validate()
        .is_err());
        assert!(PpoConfig { batch_size: 0, ..c }.validate().is_err());
    }

    struct Fixture {
        panel: crate::data::SectorPanel,
        features: crate::features::FeatureTensor,
    }

    fn fixture() -> Fixture {
        let panel = synth_panel(&SynthSpec {
            sectors: 3,
            days: 100,
            seed: 5,
            regime: Regime::DeterministicLeader,
        })
        .unwrap();
        let features = build_features(&panel, &FeatureConfig::default()).unwrap();
        Fixture { panel, features }
    }

    fn tiny(dropout: f64) -> BackboneConfig {
        BackboneConfig {
            hidden: 16,
            layers: 1,
            dropout,
            ..BackboneConfig::for_kind(BackboneKind::Mlp)
        }
    }

    fn quick() -> PpoConfig {
        PpoConfig {
            epochs: 3,
            ppo_epochs: 2,
            batch_size: 16,
            ..PpoConfig::default()
        }
    }

    #[test]
    fn first_pass_ratio_is_one_without_dropout() {
        let f = fixture();
        let env = SectorEnv::new(
            &f.panel,
            &f.features,
            (0, 99),
            EnvConfig {
                top_n: 1,
                ..EnvConfig::default()
            },
        )
        .unwrap();
        let seeds = SeedTree::new(1);
        let mut model =
            ActorCritic::new(&tiny(0.0), &tiny(0.0), 10, f.features.dim(), 4, &seeds).unwrap();
        let mut traj = run_episode(&env, &model, 9, Execution::Sequential).unwrap();
        let (a, r) = compute_gae(&traj.rewards, &traj.values, 0.99, 0.95).unwrap();
        traj.advantages = a;
        traj.returns = r;
        let cfg = quick();
        let stats = ppo_update(
            &mut model,
            &mut Optimizers::new(&cfg),
            &env,
            &traj,
            &cfg,
            &mut seeds.stream("s"),
            &RefCell::new(seeds.stream("d")),
        )
        .unwrap();
        assert!(
            stats.first_pass_ratio_error < 1e-12,
            "{}",
            stats.first_pass_ratio_error
        );
        assert_eq!(stats.minibatches, 2 * traj.len().div_ceil(16));
        assert!(stats.entropy <= 4f64.ln() + 1e-12);
    }

    #[test]
    fn update_requires_advantages() {
        let f = fixture();
        let env = SectorEnv::new(
            &f.panel,
            &f.features,
            (0, 99),
            EnvConfig {
                top_n: 1,
                ..EnvConfig::default()
            },
        )
        .unwrap();
        let seeds = SeedTree::new(1);
        let mut model =
            ActorCritic::new(&tiny(0.0), &tiny(0.0), 10, f.features.dim(), 4, &seeds).unwrap();
        let traj = run_episode(&env, &model, 9, Execution::Sequential).unwrap();
        let cfg = quick();
        let r = ppo_update(
            &mut model,
            &mut Optimizers::new(&cfg),
            &env,
            &traj,
            &cfg,
            &mut seeds.stream("s"),
            &RefCell::new(seeds.stream("d")),
        );
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn training_is_deterministic() {
        let f = fixture();
        let env = SectorEnv::new(
            &f.panel,
            &f.features,
            (0, 99),
            EnvConfig {
                top_n: 1,
                ..EnvConfig::default()
            },
        )
        .unwrap();
        let run = |exec| {
            let seeds = SeedTree::new(42);
            let model =
                ActorCritic::new(&tiny(0.1), &tiny(0.1), 10, f.features.dim(), 4, &seeds).unwrap();
            let out = train(&env, model, &quick(), &seeds, exec, |_| {}).unwrap();
            (
                out.curve.clone(),
                out.checkpoint(&BTreeMap::new()).to_bytes().unwrap(),
            )
        };
        let (c1, b1) = run(Execution::Parallel);
        let (c2, b2) = run(Execution::Sequential);
        assert_eq!(c1, c2);
        assert_eq!(b1, b2);
        assert_eq!(c1.len(), 3);
    }

    #[test]
    fn non_finite_parameters_abort() {
        let f = fixture();
        let env = SectorEnv::new(
            &f.panel,
            &f.features,
            (0, 99),
            EnvConfig {
                top_n: 1,
                ..EnvConfig::default()
            },
        )
        .unwrap();
        let seeds = SeedTree::new(2);
        let mut model =
            ActorCritic::new(&tiny(0.0), &tiny(0.0), 10, f.features.dim(), 4, &seeds).unwrap();
        let id = model.critic.params().ids().next().unwrap();
        model.critic.params_mut().get_mut(id).data_mut()[0] = f64::NAN;
        let r = train(&env, model, &quick(), &seeds, Execution::Sequential, |_| {});
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn reward_curve_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rewards.csv");
        let row = EpisodeLog {
            episode: 0,
            total_reward: 3.5,
            mean_reward: 0.5,
            mean_entropy: 1.2,
            actor_loss: -0.1,
            critic_loss: 0.4,
        };
        write_reward_curve(&[row], &p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(
            text,
            "episode,total_reward,mean_entropy,actor_loss,critic_loss\n0,3.5,1.2,-0.1,0.4\n"
        );
    }
}
