//! Feed-forward baseline over the flattened window.

use super::nn::{Ctx, Linear};
use super::BackboneConfig;
use crate::autodiff::{ParamStore, Var};
use crate::error::Result;
use crate::rng::StreamRng;

pub(crate) struct Mlp {
    layers: Vec<Linear>,
    dropout: f64,
}

impl Mlp {
    pub fn new(
        p: &mut ParamStore,
        c: &BackboneConfig,
        seq_len: usize,
        in_dim: usize,
        rng: &mut StreamRng,
    ) -> Self {
        let layers = (0..c.layers)
            .map(|i| {
                let fan_in = if i == 0 { seq_len * in_dim } else { c.hidden };
                Linear::new(p, &format!("mlp.{i}"), fan_in, c.hidden, true, rng)
            })
            .collect();
        Self {
            layers,
            dropout: c.dropout,
        }
    }

    pub fn forward(&self, cx: &Ctx<'_>, x: Var) -> Result<Var> {
        let s = cx.tape.shape(x);
        let mut h = cx.tape.reshape(x, &[s[0], s[1] * s[2]])?;
        for l in &self.layers {
            h = cx.tape.relu(l.forward(cx, h)?);
            h = cx.dropout(h, self.dropout)?;
        }
        Ok(h)
    }
}
