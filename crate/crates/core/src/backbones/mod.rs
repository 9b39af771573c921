//! Policy and value networks.
//!
//! Every backbone maps a `[B, L, d]` batch of observation windows to a
//! `[B, hidden]` representation; a linear head then produces either
//! log-probabilities over the targets (actor) or a scalar value (critic).
//! Actor and critic are separate [`Network`]s with independent parameters.

mod lstm;
mod mlp;
mod model;
mod nn;
mod qnn;
mod qrwkv;
mod transformer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::qsim::{CircuitSpec, Entangler};
use crate::rng::StreamRng;

pub use model::{ActorCritic, PolicyOutput};
pub use nn::Mode;

use nn::{Ctx, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Mlp,
    Lstm,
    Transformer,
    Qnn,
    Qrwkv,
    Qasa,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 6] = [
        Self::Mlp,
        Self::Lstm,
        Self::Transformer,
        Self::Qnn,
        Self::Qrwkv,
        Self::Qasa,
    ];

    /// The five architectures compared in the experiments (MLP is a baseline).
    pub const COMPARED: [BackboneKind; 5] = [
        Self::Lstm,
        Self::Transformer,
        Self::Qnn,
        Self::Qrwkv,
        Self::Qasa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mlp => "mlp",
            Self::Lstm => "lstm",
            Self::Transformer => "transformer",
            Self::Qnn => "qnn",
            Self::Qrwkv => "qrwkv",
            Self::Qasa => "qasa",
        }
    }

    pub fn is_quantum(self) -> bool {
        matches!(self, Self::Qnn | Self::Qrwkv | Self::Qasa)
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown backbone `{s}` (expected one of mlp, lstm, transformer, qnn, qrwkv, qasa)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub n_qubits: usize,
    pub q_layers: usize,
}

impl BackboneConfig {
    /// Defaults for `kind`: width 128, 2 layers (4 for QRWKV), 4 heads,
    /// dropout 0.1, 4 qubits and 2 circuit layers.
    pub fn for_kind(kind: BackboneKind) -> Self {
        Self {
            kind,
            hidden: 128,
            layers: if kind == BackboneKind::Qrwkv { 4 } else { 2 },
            heads: 4,
            dropout: 0.1,
            n_qubits: 4,
            q_layers: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.layers == 0 || self.heads == 0 {
            return bad(format!(
                "hidden, layers and heads must be positive (got {}, {}, {})",
                self.hidden, self.layers, self.heads
            ));
        }
        let attention = matches!(
            self.kind,
            BackboneKind::Transformer | BackboneKind::Qasa | BackboneKind::Qrwkv
        );
        if attention && self.hidden % self.heads != 0 {
            return bad(format!(
                "heads ({}) must divide hidden ({})",
                self.heads, self.hidden
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if self.kind.is_quantum() && (self.n_qubits == 0 || self.q_layers == 0) {
            return bad(format!(
                "n_qubits and q_layers must be positive (got {}, {})",
                self.n_qubits, self.q_layers
            ));
        }
        if self.kind == BackboneKind::Qasa && (self.n_qubits < 2 || self.n_qubits % 2 != 0) {
            return bad(format!(
                "qasa needs an even number of qubits >= 2, got {}",
                self.n_qubits
            ));
        }
        Ok(())
    }

    pub fn circuit(&self) -> CircuitSpec {
        CircuitSpec {
            n_qubits: self.n_qubits,
            n_layers: self.q_layers,
            entangler: Entangler::LinearChain,
        }
    }
}

enum Arch {
    Mlp(mlp::Mlp),
    Lstm(lstm::Lstm),
    Transformer(transformer::Transformer),
    Qnn(qnn::Qnn),
    Qrwkv(qrwkv::Qrwkv),
}

/// One backbone plus its output head.
pub struct Network {
    config: BackboneConfig,
    seq_len: usize,
    in_dim: usize,
    out_dim: usize,
    params: ParamStore,
    arch: Arch,
    head: Linear,
    exec: Execution,
}

impl Network {
    /// A freshly initialized network mapping `[B, seq_len, in_dim]` to
    /// `[B, out_dim]`.
    pub fn new(
        config: &BackboneConfig,
        seq_len: usize,
        in_dim: usize,
        out_dim: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        config.validate()?;
        if seq_len == 0 || in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidSpec(format!(
                "network dimensions must be positive (seq_len {seq_len}, in_dim {in_dim}, out_dim {out_dim})"
            )));
        }
        let mut params = ParamStore::new();
        let p = &mut params;
        let arch = match config.kind {
            BackboneKind::Mlp => Arch::Mlp(mlp::Mlp::new(p, config, seq_len, in_dim, rng)),
            BackboneKind::Lstm => Arch::Lstm(lstm::Lstm::new(p, config, in_dim, rng)),
            BackboneKind::Transformer | BackboneKind::Qasa => Arch::Transformer(
                transformer::Transformer::new(p, config, seq_len, in_dim, rng)?,
            ),
            BackboneKind::Qnn => Arch::Qnn(qnn::Qnn::new(p, config, in_dim, rng)?),
            BackboneKind::Qrwkv => Arch::Qrwkv(qrwkv::Qrwkv::new(p, config, in_dim, rng)?),
        };
        let head = Linear::new(p, "head", config.hidden, out_dim, true, rng);
        Ok(Self {
            config: *config,
            seq_len,
            in_dim,
            out_dim,
            params,
            arch,
            head,
            exec: Execution::default(),
        })
    }

    /// Execution mode for batched circuit evaluation.
    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<usize> {
        let s = tape.shape(x);
        if s.len() != 3 || s[1] != self.seq_len || s[2] != self.in_dim {
            return Err(Error::Shape(format!(
                "network expects [B, {}, {}], got {s:?}",
                self.seq_len, self.in_dim
            )));
        }
        Ok(s[0])
    }

    /// `[B, hidden]` representation.
    pub fn represent(&self, tape: &Tape, bound: &Bound, x: Var, mode: Mode<'_>) -> Result<Var> {
        self.check_input(tape, x)?;
        let cx = Ctx {
            tape,
            bound,
            mode,
            exec: self.exec,
        };
        match &self.arch {
            Arch::Mlp(m) => m.forward(&cx, x),
            Arch::Lstm(m) => m.forward(&cx, x),
            Arch::Transformer(m) => m.forward(&cx, x),
            Arch::Qnn(m) => m.forward(&cx, x),
            Arch::Qrwkv(m) => m.forward(&cx, x),
        }
    }

    /// `[B, out_dim]` raw head output.
    pub fn forward(&self, tape: &Tape, bound: &Bound, x: Var, mode: Mode<'_>) -> Result<Var> {
        let rep = self.represent(tape, bound, x, mode)?;
        let cx = Ctx {
            tape,
            bound,
            mode,
            exec: self.exec,
        };
        self.head.forward(&cx, rep)
    }
}
