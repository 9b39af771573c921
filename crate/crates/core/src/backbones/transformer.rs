//! Post-norm transformer encoder; QASA swaps the per-head score function.
//!
//! Classical heads use `softmax(Q K^T / sqrt(d_k)) V`. Quantum heads project
//! each position to `m` query and `m` key angles (`pi * tanh(.)`), score every
//! pair with the attention circuit and normalize rows by their sum:
//! `alpha_ij = s_ij / (sum_j s_ij + 1e-12)`.

use std::f64::consts::PI;

use super::nn::{last_step, quantum_init, sinusoidal, Ctx, LayerNorm, Linear};
use super::{BackboneConfig, BackboneKind};
use crate::autodiff::{ParamId, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::qsim::{quantum_attention, CircuitSpec};
use crate::rng::StreamRng;

/// Guard against an all-zero score row.
pub(crate) const ROW_EPS: f64 = 1e-12;

enum Scores {
    Dot {
        q: Linear,
        k: Linear,
    },
    Quantum {
        q: Linear,
        k: Linear,
        theta: Vec<ParamId>,
        spec: CircuitSpec,
        m: usize,
    },
}

struct Attention {
    scores: Scores,
    v: Linear,
    o: Linear,
    heads: usize,
}

struct Block {
    attn: Attention,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
}

pub(crate) struct Transformer {
    input: Linear,
    pe: Tensor,
    blocks: Vec<Block>,
    dropout: f64,
}

impl Attention {
    fn new(
        p: &mut ParamStore,
        name: &str,
        c: &BackboneConfig,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let h = c.hidden;
        let scores = if c.kind == BackboneKind::Qasa {
            let spec = c.circuit();
            let m = c.n_qubits / 2;
            let n_theta = spec.attention_circuit(m)?.n_params();
            Scores::Quantum {
                q: Linear::new(p, &format!("{name}.q_angles"), h, c.heads * m, true, rng),
                k: Linear::new(p, &format!("{name}.k_angles"), h, c.heads * m, true, rng),
                theta: (0..c.heads)
                    .map(|i| p.add(format!("{name}.theta.{i}"), quantum_init(rng, n_theta)))
                    .collect(),
                spec,
                m,
            }
        } else {
            // A key bias shifts every score in a row equally, so softmax ignores it.
            Scores::Dot {
                q: Linear::new(p, &format!("{name}.q"), h, h, true, rng),
                k: Linear::new(p, &format!("{name}.k"), h, h, false, rng),
            }
        };
        Ok(Self {
            scores,
            v: Linear::new(p, &format!("{name}.v"), h, h, true, rng),
            o: Linear::new(p, &format!("{name}.o"), h, h, true, rng),
            heads: c.heads,
        })
    }

    /// Output `[B, L, H]` and the per-head attention weights `[B, L, L]`.
    fn forward(&self, cx: &Ctx<'_>, x: Var) -> Result<(Var, Vec<Var>)> {
        let t = cx.tape;
        let s = t.shape(x);
        let (len, h) = (s[1], s[2]);
        let dh = h / self.heads;
        let v = self.v.forward(cx, x)?;
        let mut weights = Vec::with_capacity(self.heads);
        let mut outs = Vec::with_capacity(self.heads);
        match &self.scores {
            Scores::Dot { q, k } => {
                let (qa, ka) = (q.forward(cx, x)?, k.forward(cx, x)?);
                for i in 0..self.heads {
                    let qh = t.slice(qa, 2, i * dh, (i + 1) * dh)?;
                    let kh = t.slice(ka, 2, i * dh, (i + 1) * dh)?;
                    let sc = t.scale(
                        t.batch_matmul(qh, t.transpose(kh)?)?,
                        1.0 / (dh as f64).sqrt(),
                    );
                    weights.push(t.softmax(sc)?);
                }
            }
            Scores::Quantum {
                q,
                k,
                theta,
                spec,
                m,
            } => {
                let qa = t.scale(t.tanh(q.forward(cx, x)?), PI);
                let ka = t.scale(t.tanh(k.forward(cx, x)?), PI);
                for (i, th) in theta.iter().enumerate() {
                    let qh = t.slice(qa, 2, i * m, (i + 1) * m)?;
                    let kh = t.slice(ka, 2, i * m, (i + 1) * m)?;
                    let sc = quantum_attention(t, spec, *m, qh, kh, cx.p(*th), cx.exec)?;
                    let rows = t.add_scalar(t.sum_axis(sc, 2)?, ROW_EPS);
                    weights.push(t.div(sc, t.expand(rows, 2, len)?)?);
                }
            }
        }
        for (i, w) in weights.iter().enumerate() {
            let vh = t.slice(v, 2, i * dh, (i + 1) * dh)?;
            outs.push(t.batch_matmul(*w, vh)?);
        }
        let cat = t.concat(&outs, 2)?;
        Ok((self.o.forward(cx, cat)?, weights))
    }
}

impl Transformer {
    pub fn new(
        p: &mut ParamStore,
        c: &BackboneConfig,
        seq_len: usize,
        in_dim: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let h = c.hidden;
        let input = Linear::new(p, "input", in_dim, h, true, rng);
        let blocks = (0..c.layers)
            .map(|i| {
                let n = format!("block.{i}");
                Ok(Block {
                    attn: Attention::new(p, &format!("{n}.attn"), c, rng)?,
                    ln1: LayerNorm::new(p, &format!("{n}.ln1"), h),
                    ff1: Linear::new(p, &format!("{n}.ff1"), h, 2 * h, true, rng),
                    ff2: Linear::new(p, &format!("{n}.ff2"), 2 * h, h, true, rng),
                    ln2: LayerNorm::new(p, &format!("{n}.ln2"), h),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            input,
            pe: sinusoidal(seq_len, h),
            blocks,
            dropout: c.dropout,
        })
    }

    /// Final sequence `[B, L, H]` and every layer's attention weights.
    pub fn encode(&self, cx: &Ctx<'_>, x: Var) -> Result<(Var, Vec<Var>)> {
        let t = cx.tape;
        let pe = t.constant(self.pe.clone());
        let mut h = t.add(self.input.forward(cx, x)?, pe)?;
        let mut all = Vec::new();
        for b in &self.blocks {
            let (a, w) = b.attn.forward(cx, h)?;
            all.extend(w);
            h = b.ln1.forward(cx, t.add(h, cx.dropout(a, self.dropout)?)?)?;
            let f = b.ff2.forward(cx, t.relu(b.ff1.forward(cx, h)?))?;
            h = b.ln2.forward(cx, t.add(h, cx.dropout(f, self.dropout)?)?)?;
        }
        Ok((h, all))
    }

    pub fn forward(&self, cx: &Ctx<'_>, x: Var) -> Result<Var> {
        let (h, _) = self.encode(cx, x)?;
        last_step(cx.tape, h)
    }
}
