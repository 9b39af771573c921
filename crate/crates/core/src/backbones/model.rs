//! Separate actor and critic networks behind the rollout [`Policy`] contract.

use std::collections::BTreeMap;

use super::{BackboneConfig, BackboneKind, Mode, Network};
use crate::autodiff::{Bound, Checkpoint, ParamStore, Tape, Tensor, Var};
use crate::env::{Observation, Policy, PolicyStep};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::rng::SeedTree;

/// Probabilities and log-probabilities over the targets.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl PolicyOutput {
    pub fn from_log_probs(log_probs: Vec<f64>) -> Self {
        Self {
            probs: log_probs.iter().map(|l| l.exp()).collect(),
            log_probs,
        }
    }
}

pub struct ActorCritic {
    pub actor: Network,
    pub critic: Network,
}

const ACTOR: &str = "actor";
const CRITIC: &str = "critic";

fn config_meta(meta: &mut BTreeMap<String, String>, prefix: &str, c: &BackboneConfig) {
    let mut put = |k: &str, v: String| {
        meta.insert(format!("{prefix}.{k}"), v);
    };
    put("kind", c.kind.to_string());
    put("hidden", c.hidden.to_string());
    put("layers", c.layers.to_string());
    put("heads", c.heads.to_string());
    put("dropout", c.dropout.to_string());
    put("n_qubits", c.n_qubits.to_string());
    put("q_layers", c.q_layers.to_string());
}

fn meta_get<'m>(meta: &'m BTreeMap<String, String>, key: &str) -> Result<&'m str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))
}

fn meta_parse<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
    meta_get(meta, key)?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("metadata `{key}` is malformed")))
}

fn config_from_meta(meta: &BTreeMap<String, String>, prefix: &str) -> Result<BackboneConfig> {
    let k = |s: &str| format!("{prefix}.{s}");
    Ok(BackboneConfig {
        kind: meta_get(meta, &k("kind"))?.parse()?,
        hidden: meta_parse(meta, &k("hidden"))?,
        layers: meta_parse(meta, &k("layers"))?,
        heads: meta_parse(meta, &k("heads"))?,
        dropout: meta_parse(meta, &k("dropout"))?,
        n_qubits: meta_parse(meta, &k("n_qubits"))?,
        q_layers: meta_parse(meta, &k("q_layers"))?,
    })
}

impl ActorCritic {
    /// Fresh networks; initial weights come from the `init/actor` and
    /// `init/critic` streams of `seeds`.
    pub fn new(
        actor: &BackboneConfig,
        critic: &BackboneConfig,
        seq_len: usize,
        in_dim: usize,
        n_targets: usize,
        seeds: &SeedTree,
    ) -> Result<Self> {
        if n_targets < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least 2 targets, got {n_targets}"
            )));
        }
        let init = seeds.child("init");
        Ok(Self {
            actor: Network::new(actor, seq_len, in_dim, n_targets, &mut init.stream(ACTOR))?,
            critic: Network::new(critic, seq_len, in_dim, 1, &mut init.stream(CRITIC))?,
        })
    }

    pub fn with_execution(self, exec: Execution) -> Self {
        Self {
            actor: self.actor.with_execution(exec),
            critic: self.critic.with_execution(exec),
        }
    }

    pub fn kind(&self) -> BackboneKind {
        self.actor.config().kind
    }

    pub fn n_targets(&self) -> usize {
        self.actor.out_dim()
    }

    /// Stack observation windows into a `[B, L, d]` tensor.
    pub fn batch_input(&self, batch: &[Observation<'_>]) -> Result<Tensor> {
        let (l, d) = (self.actor.seq_len(), self.actor.in_dim());
        let mut data = Vec::with_capacity(batch.len() * l * d);
        for o in batch {
            if o.len != l || o.dim != d || o.window.len() != l * d {
                return Err(Error::Shape(format!(
                    "observation is [{}, {}], network expects [{l}, {d}]",
                    o.len, o.dim
                )));
            }
            data.extend_from_slice(o.window);
        }
        Tensor::new(&[batch.len(), l, d], data)
    }

    /// `[B, n_targets]` log-probabilities.
    pub fn log_probs(&self, tape: &Tape, bound: &Bound, x: Var, mode: Mode<'_>) -> Result<Var> {
        tape.log_softmax(self.actor.forward(tape, bound, x, mode)?)
    }

    /// `[B]` state values.
    pub fn values(&self, tape: &Tape, bound: &Bound, x: Var, mode: Mode<'_>) -> Result<Var> {
        let v = self.critic.forward(tape, bound, x, mode)?;
        let b = tape.shape(v)[0];
        tape.reshape(v, &[b])
    }

    /// Evaluation-mode policy outputs for a batch of observations.
    pub fn policy_outputs(&self, batch: &[Observation<'_>]) -> Result<Vec<PolicyOutput>> {
        let tape = Tape::new();
        let x = tape.constant(self.batch_input(batch)?);
        let bound = self.actor.params().bind(&tape);
        let lp = tape.value(self.log_probs(&tape, &bound, x, Mode::Eval)?);
        Ok(lp
            .data()
            .chunks(self.n_targets())
            .map(|r| PolicyOutput::from_log_probs(r.to_vec()))
            .collect())
    }

    /// Evaluation-mode state values for a batch of observations.
    pub fn state_values(&self, batch: &[Observation<'_>]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let x = tape.constant(self.batch_input(batch)?);
        let bound = self.critic.params().bind(&tape);
        Ok(tape
            .value(self.values(&tape, &bound, x, Mode::Eval)?)
            .data()
            .to_vec())
    }

    pub fn to_checkpoint(&self, extra: &BTreeMap<String, String>) -> Checkpoint {
        let mut metadata = extra.clone();
        config_meta(&mut metadata, ACTOR, self.actor.config());
        config_meta(&mut metadata, CRITIC, self.critic.config());
        metadata.insert("seq_len".into(), self.actor.seq_len().to_string());
        metadata.insert("in_dim".into(), self.actor.in_dim().to_string());
        metadata.insert("n_targets".into(), self.n_targets().to_string());
        let mut tensors = Vec::new();
        for (prefix, net) in [(ACTOR, &self.actor), (CRITIC, &self.critic)] {
            for (name, t) in net.params().iter() {
                tensors.push((format!("{prefix}.{name}"), t.clone()));
            }
        }
        Checkpoint { metadata, tensors }
    }

    /// Rebuild from a checkpoint, failing with a kind mismatch when
    /// `expected` differs from the stored actor kind.
    pub fn from_checkpoint(ckpt: &Checkpoint, expected: Option<BackboneKind>) -> Result<Self> {
        let meta = &ckpt.metadata;
        let actor_cfg = config_from_meta(meta, ACTOR)?;
        if let Some(e) = expected {
            if e != actor_cfg.kind {
                return Err(Error::KindMismatch {
                    expected: e.to_string(),
                    found: actor_cfg.kind.to_string(),
                });
            }
        }
        let critic_cfg = config_from_meta(meta, CRITIC)?;
        let mut model = Self::new(
            &actor_cfg,
            &critic_cfg,
            meta_parse(meta, "seq_len")?,
            meta_parse(meta, "in_dim")?,
            meta_parse(meta, "n_targets")?,
            &SeedTree::new(0),
        )?;
        let n_actor = model.actor.params().len();
        if ckpt.tensors.len() < n_actor {
            return Err(Error::Checkpoint(format!(
                "{} tensors cannot cover {n_actor} actor parameters",
                ckpt.tensors.len()
            )));
        }
        let strip = |records: &[(String, Tensor)], prefix: &str| -> Result<Vec<(String, Tensor)>> {
            records
                .iter()
                .map(|(n, t)| {
                    n.strip_prefix(&format!("{prefix}."))
                        .map(|s| (s.to_string(), t.clone()))
                        .ok_or_else(|| {
                            Error::Checkpoint(format!("tensor `{n}` lacks the `{prefix}.` prefix"))
                        })
                })
                .collect()
        };
        model
            .actor
            .params_mut()
            .load(&strip(&ckpt.tensors[..n_actor], ACTOR)?)?;
        model
            .critic
            .params_mut()
            .load(&strip(&ckpt.tensors[n_actor..], CRITIC)?)?;
        Ok(model)
    }

    /// Both parameter stores, actor first.
    pub fn stores(&self) -> [&ParamStore; 2] {
        [self.actor.params(), self.critic.params()]
    }
}

impl Policy for ActorCritic {
    fn n_targets(&self) -> usize {
        self.n_targets()
    }

    fn evaluate(&self, batch: &[Observation<'_>]) -> Result<Vec<PolicyStep>> {
        let outs = self.policy_outputs(batch)?;
        let values = self.state_values(batch)?;
        Ok(outs
            .into_iter()
            .zip(values)
            .map(|(o, value)| PolicyStep {
                probs: o.probs,
                value,
            })
            .collect())
    }
}
