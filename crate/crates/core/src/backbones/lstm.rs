//! Stacked LSTM returning the final hidden state of the top layer.
//!
//! Per step, with gates packed `[f, i, o, g]` along the last axis:
//! `f = s(x W_f + h U_f + b_f)`, `i = s(..)`, `o = s(..)`, `g = tanh(..)`,
//! `c = f * c_prev + i * g`, `h = o * tanh(c)`.

use super::nn::{stack_steps, time_step, xavier, Ctx};
use super::BackboneConfig;
use crate::autodiff::{ParamId, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::rng::StreamRng;

/// Initial forget-gate bias.
pub(crate) const FORGET_BIAS: f64 = 1.0;

pub(crate) struct LstmLayer {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
}

pub(crate) struct Lstm {
    layers: Vec<LstmLayer>,
    hidden: usize,
    dropout: f64,
}

impl Lstm {
    pub fn new(p: &mut ParamStore, c: &BackboneConfig, in_dim: usize, rng: &mut StreamRng) -> Self {
        let h = c.hidden;
        let layers = (0..c.layers)
            .map(|i| {
                let fan_in = if i == 0 { in_dim } else { h };
                let mut bias = vec![0.0; 4 * h];
                bias[..h].iter_mut().for_each(|b| *b = FORGET_BIAS);
                LstmLayer {
                    w: p.add(format!("lstm.{i}.w"), xavier(rng, fan_in, 4 * h)),
                    u: p.add(format!("lstm.{i}.u"), xavier(rng, h, 4 * h)),
                    b: p.add(format!("lstm.{i}.b"), Tensor::vector(bias)),
                }
            })
            .collect();
        Self {
            layers,
            hidden: h,
            dropout: c.dropout,
        }
    }

    pub fn forward(&self, cx: &Ctx<'_>, x: Var) -> Result<Var> {
        let t = cx.tape;
        let s = t.shape(x);
        let (b, len, h) = (s[0], s[1], self.hidden);
        let mut seq = x;
        let mut last = None;
        for (li, layer) in self.layers.iter().enumerate() {
            if li > 0 {
                seq = cx.dropout(seq, self.dropout)?;
            }
            let xw = t.add(t.matmul(seq, cx.p(layer.w))?, cx.p(layer.b))?;
            let mut hs = t.constant(Tensor::zeros(&[b, h]));
            let mut cs = t.constant(Tensor::zeros(&[b, h]));
            let mut outs = Vec::with_capacity(len);
            for step in 0..len {
                let z = t.add(time_step(t, xw, step)?, t.matmul(hs, cx.p(layer.u))?)?;
                let f = t.sigmoid(t.slice(z, 1, 0, h)?);
                let i = t.sigmoid(t.slice(z, 1, h, 2 * h)?);
                let o = t.sigmoid(t.slice(z, 1, 2 * h, 3 * h)?);
                let g = t.tanh(t.slice(z, 1, 3 * h, 4 * h)?);
                cs = t.add(t.mul(f, cs)?, t.mul(i, g)?)?;
                hs = t.mul(o, t.tanh(cs))?;
                outs.push(hs);
            }
            last = Some(hs);
            if li + 1 < self.layers.len() {
                seq = stack_steps(t, &outs)?;
            }
        }
        Ok(last.expect("at least one layer"))
    }
}
