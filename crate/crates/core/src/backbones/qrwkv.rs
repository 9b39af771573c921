//! RWKV-style recurrence with a variational-circuit branch.
//!
//! Each block computes
//! `x += TimeMix(LN1(x))` and `x += ChannelMix(LN2(x)) + QVC(LN2(x))`.
//!
//! TimeMix interpolates every position with its predecessor (token shift),
//! forms receptance `r`, key `k` (clamped to +-30) and value `v`, and runs the
//! per-channel decayed average
//! `wkv_t = (a_{t-1} + e^{u + k_t} v_t) / (b_{t-1} + e^{u + k_t})`,
//! `a_t = e^{-e^w} a_{t-1} + e^{k_t} v_t`, `b_t = e^{-e^w} b_{t-1} + e^{k_t}`,
//! then outputs `W_o (sigmoid(r) * GroupNorm(wkv))` with one group per head.
//! ChannelMix is `sigmoid(x_r W_r) * (relu(x_k W_k)^2 W_v)`.
//! QVC is `circuit(pi * tanh(x W_q)) W_out`.

use std::f64::consts::PI;

use super::nn::{last_step, quantum_init, stack_steps, time_step, xavier, Ctx, LayerNorm, Linear};
use super::BackboneConfig;
use crate::autodiff::{ParamId, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::qsim::{quantum_layer, Circuit};
use crate::rng::StreamRng;

/// Keys are clamped to this magnitude before exponentiation.
pub(crate) const KEY_CLAMP: f64 = 30.0;

pub(crate) struct TimeMix {
    pub mu_k: ParamId,
    pub mu_v: ParamId,
    pub mu_r: ParamId,
    pub k: Linear,
    pub v: Linear,
    pub r: Linear,
    pub o: Linear,
    /// Log-log decay `w`: the per-step decay factor is `exp(-exp(w))`.
    pub decay: ParamId,
    pub bonus: ParamId,
    pub norm: LayerNorm,
}

pub(crate) struct ChannelMix {
    pub mu_k: ParamId,
    pub mu_r: ParamId,
    pub k: Linear,
    pub v: Linear,
    pub r: Linear,
}

pub(crate) struct QuantumBranch {
    pub w_in: ParamId,
    pub theta: ParamId,
    pub w_out: ParamId,
}

pub(crate) struct RwkvBlock {
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub time: TimeMix,
    pub channel: ChannelMix,
    pub quantum: QuantumBranch,
}

pub(crate) struct Qrwkv {
    input: Linear,
    pub blocks: Vec<RwkvBlock>,
    ln_out: LayerNorm,
    heads: usize,
    dropout: f64,
    circuit: Circuit,
}

fn half(p: &mut ParamStore, name: String, h: usize) -> ParamId {
    p.add(name, Tensor::full(&[h], 0.5))
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Predecessor of every position, zeros at `t = 0`.
fn token_shift(cx: &Ctx<'_>, x: Var) -> Result<Var> {
    let t = cx.tape;
    let s = t.shape(x);
    let zero = t.constant(Tensor::zeros(&[s[0], 1, s[2]]));
    if s[1] == 1 {
        return Ok(zero);
    }
    t.concat(&[zero, t.slice(x, 1, 0, s[1] - 1)?], 1)
}

/// `prev + (x - prev) * mu`.
fn interpolate(cx: &Ctx<'_>, x: Var, prev: Var, mu: ParamId) -> Result<Var> {
    let t = cx.tape;
    t.add(prev, t.mul(t.sub(x, prev)?, cx.p(mu))?)
}

impl TimeMix {
    fn forward(&self, cx: &Ctx<'_>, x: Var, heads: usize) -> Result<Var> {
        let t = cx.tape;
        let s = t.shape(x);
        let (b, len, h) = (s[0], s[1], s[2]);
        let prev = token_shift(cx, x)?;
        let k = t.clamp(
            self.k.forward(cx, interpolate(cx, x, prev, self.mu_k)?)?,
            -KEY_CLAMP,
            KEY_CLAMP,
        );
        let v = self.v.forward(cx, interpolate(cx, x, prev, self.mu_v)?)?;
        let r = self.r.forward(cx, interpolate(cx, x, prev, self.mu_r)?)?;
        let decay = t.exp(t.neg(t.exp(cx.p(self.decay))));
        let bonus = cx.p(self.bonus);
        let mut a = t.constant(Tensor::zeros(&[b, h]));
        let mut den = t.constant(Tensor::zeros(&[b, h]));
        let mut outs = Vec::with_capacity(len);
        for step in 0..len {
            let kt = time_step(t, k, step)?;
            let vt = time_step(t, v, step)?;
            let eu = t.exp(t.add(kt, bonus)?);
            let num = t.add(a, t.mul(eu, vt)?)?;
            outs.push(t.div(num, t.add(den, eu)?)?);
            let ek = t.exp(kt);
            a = t.add(t.mul(decay, a)?, t.mul(ek, vt)?)?;
            den = t.add(t.mul(decay, den)?, ek)?;
        }
        let wkv = stack_steps(t, &outs)?;
        let grouped = t.reshape(wkv, &[b, len, heads, h / heads])?;
        let normed = t.reshape(t.layer_norm(grouped)?, &[b, len, h])?;
        let normed = t.add(t.mul(normed, cx.p(self.norm.gain))?, cx.p(self.norm.bias))?;
        self.o.forward(cx, t.mul(t.sigmoid(r), normed)?)
    }
}

impl ChannelMix {
    fn forward(&self, cx: &Ctx<'_>, x: Var) -> Result<Var> {
        let t = cx.tape;
        let prev = token_shift(cx, x)?;
        let k = t.square(t.relu(self.k.forward(cx, interpolate(cx, x, prev, self.mu_k)?)?))?;
        let r = t.sigmoid(self.r.forward(cx, interpolate(cx, x, prev, self.mu_r)?)?);
        t.mul(r, self.v.forward(cx, k)?)
    }
}

impl QuantumBranch {
    fn forward(&self, cx: &Ctx<'_>, x: Var, circuit: &Circuit) -> Result<Var> {
        let t = cx.tape;
        let angles = t.scale(t.tanh(t.matmul(x, cx.p(self.w_in))?), PI);
        let z = quantum_layer(t, circuit, angles, cx.p(self.theta), cx.exec)?;
        t.matmul(z, cx.p(self.w_out))
    }
}

impl Qrwkv {
    pub fn new(
        p: &mut ParamStore,
        c: &BackboneConfig,
        in_dim: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let h = c.hidden;
        let circuit = c.circuit().qnn_circuit()?;
        let input = Linear::new(p, "input", in_dim, h, true, rng);
        let blocks = (0..c.layers)
            .map(|i| {
                let n = format!("block.{i}");
                RwkvBlock {
                    ln1: LayerNorm::new(p, &format!("{n}.ln1"), h),
                    ln2: LayerNorm::new(p, &format!("{n}.ln2"), h),
                    time: TimeMix {
                        mu_k: half(p, format!("{n}.time.mu_k"), h),
                        mu_v: half(p, format!("{n}.time.mu_v"), h),
                        mu_r: half(p, format!("{n}.time.mu_r"), h),
                        k: Linear::new(p, &format!("{n}.time.k"), h, h, false, rng),
                        v: Linear::new(p, &format!("{n}.time.v"), h, h, false, rng),
                        r: Linear::new(p, &format!("{n}.time.r"), h, h, false, rng),
                        o: Linear::new(p, &format!("{n}.time.o"), h, h, false, rng),
                        decay: p.add(
                            format!("{n}.time.decay"),
                            Tensor::vector(linspace(-5.0, -1.0, h)),
                        ),
                        bonus: p.add(format!("{n}.time.bonus"), Tensor::full(&[h], 0.5)),
                        norm: LayerNorm::new(p, &format!("{n}.time.norm"), h),
                    },
                    channel: ChannelMix {
                        mu_k: half(p, format!("{n}.channel.mu_k"), h),
                        mu_r: half(p, format!("{n}.channel.mu_r"), h),
                        k: Linear::new(p, &format!("{n}.channel.k"), h, 2 * h, false, rng),
                        v: Linear::new(p, &format!("{n}.channel.v"), 2 * h, h, false, rng),
                        r: Linear::new(p, &format!("{n}.channel.r"), h, h, false, rng),
                    },
                    quantum: QuantumBranch {
                        w_in: p.add(format!("{n}.quantum.w_in"), xavier(rng, h, c.n_qubits)),
                        theta: p.add(
                            format!("{n}.quantum.theta"),
                            quantum_init(rng, circuit.n_params()),
                        ),
                        w_out: p.add(format!("{n}.quantum.w_out"), xavier(rng, c.n_qubits, h)),
                    },
                }
            })
            .collect();
        Ok(Self {
            input,
            blocks,
            ln_out: LayerNorm::new(p, "ln_out", h),
            heads: c.heads,
            dropout: c.dropout,
            circuit,
        })
    }

    pub fn forward(&self, cx: &Ctx<'_>, x: Var) -> Result<Var> {
        let t = cx.tape;
        let mut h = self.input.forward(cx, x)?;
        for b in &self.blocks {
            let tm = b.time.forward(cx, b.ln1.forward(cx, h)?, self.heads)?;
            h = t.add(h, cx.dropout(tm, self.dropout)?)?;
            let y = b.ln2.forward(cx, h)?;
            let branch = t.add(
                b.channel.forward(cx, y)?,
                b.quantum.forward(cx, y, &self.circuit)?,
            )?;
            h = t.add(h, cx.dropout(branch, self.dropout)?)?;
        }
        last_step(t, self.ln_out.forward(cx, h)?)
    }
}
