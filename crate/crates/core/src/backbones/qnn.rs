//! Variational-circuit feature extractor.
//!
//! The window is mean-pooled over time, projected to one angle per qubit with
//! `pi * tanh(x W)`, run through the feature circuit, and the `<Z_i>`
//! readouts are mapped to the hidden width by `tanh(z W_h + b_h)`.

use std::f64::consts::PI;

use super::nn::{quantum_init, xavier, Ctx, Linear};
use super::BackboneConfig;
use crate::autodiff::{ParamId, ParamStore, Var};
use crate::error::Result;
use crate::qsim::{quantum_layer, Circuit};
use crate::rng::StreamRng;

pub(crate) struct Qnn {
    pub proj: ParamId,
    pub theta: ParamId,
    head: Linear,
    circuit: Circuit,
}

impl Qnn {
    pub fn new(
        p: &mut ParamStore,
        c: &BackboneConfig,
        in_dim: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let circuit = c.circuit().qnn_circuit()?;
        Ok(Self {
            proj: p.add("qnn.proj", xavier(rng, in_dim, c.n_qubits)),
            theta: p.add("qnn.theta", quantum_init(rng, circuit.n_params())),
            head: Linear::new(p, "qnn.head", c.n_qubits, c.hidden, true, rng),
            circuit,
        })
    }

    /// Circuit readouts `[B, n_qubits]`.
    pub fn latent(&self, cx: &Ctx<'_>, x: Var) -> Result<Var> {
        let t = cx.tape;
        let pooled = t.mean_axis(x, 1)?;
        let angles = t.scale(t.tanh(t.matmul(pooled, cx.p(self.proj))?), PI);
        quantum_layer(t, &self.circuit, angles, cx.p(self.theta), cx.exec)
    }

    pub fn forward(&self, cx: &Ctx<'_>, x: Var) -> Result<Var> {
        let z = self.latent(cx, x)?;
        Ok(cx.tape.tanh(self.head.forward(cx, z)?))
    }
}
