//! Quantum circuits as differentiable tape operations.

use std::f64::consts::FRAC_PI_2;

use super::circuit::{Circuit, CircuitSpec};
use super::compiled::CompiledCircuit;
use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::par::Execution;

fn arity(name: &str, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::Contract(format!(
            "{name} takes {n} inputs, got {}",
            inputs.len()
        )));
    }
    Ok(())
}

fn theta_of<'a>(circuit: &Circuit, t: &'a Tensor) -> Result<&'a [f64]> {
    if t.rank() != 1 || t.numel() != circuit.n_params() {
        return Err(Error::Shape(format!(
            "circuit parameters must have shape [{}], got {:?}",
            circuit.n_params(),
            t.shape()
        )));
    }
    Ok(t.data())
}

/// Batched circuit readout: `x` of shape `[.., n_inputs]` and parameters
/// `[n_params]` map to `<Z>` values of shape `[.., n_outputs]`.
pub struct QuantumLayer {
    circuit: Circuit,
    exec: Execution,
}

impl QuantumLayer {
    pub fn new(circuit: Circuit, exec: Execution) -> Self {
        Self { circuit, exec }
    }

    fn out_shape(&self, x: &Tensor) -> Result<Vec<usize>> {
        match x.shape().last() {
            Some(&d) if d == self.circuit.n_inputs() => {
                let mut s = x.shape().to_vec();
                *s.last_mut().expect("non-empty") = self.circuit.n_outputs();
                Ok(s)
            }
            _ => Err(Error::Shape(format!(
                "quantum layer expects inputs [.., {}], got {:?}",
                self.circuit.n_inputs(),
                x.shape()
            ))),
        }
    }
}

impl CustomOp for QuantumLayer {
    fn name(&self) -> &str {
        "quantum_layer"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity(self.name(), inputs, 2)?;
        let shape = self.out_shape(inputs[0])?;
        let comp = CompiledCircuit::new(&self.circuit, theta_of(&self.circuit, inputs[1])?)?;
        Tensor::new(&shape, comp.forward_batch(inputs[0].data(), self.exec)?)
    }

    fn vjp(&self, inputs: &[&Tensor], _output: &Tensor, cotangent: &Tensor) -> Result<Vec<Tensor>> {
        arity(self.name(), inputs, 2)?;
        let comp = CompiledCircuit::new(&self.circuit, theta_of(&self.circuit, inputs[1])?)?;
        let (gx, gt) = comp.backward_batch(inputs[0].data(), cotangent.data(), self.exec)?;
        Ok(vec![
            Tensor::new(inputs[0].shape(), gx)?,
            Tensor::vector(gt),
        ])
    }
}

/// Pairwise quantum attention scores: queries and keys of shape `[B, L, m]`
/// and parameters map to `[B, L, L]` scores `(1 + <Z_0>) / 2` in `[0, 1]`.
pub struct QuantumAttention {
    circuit: Circuit,
    m: usize,
    exec: Execution,
}

impl QuantumAttention {
    pub fn new(spec: &CircuitSpec, m: usize, exec: Execution) -> Result<Self> {
        Ok(Self {
            circuit: spec.attention_circuit(m)?,
            m,
            exec,
        })
    }

    pub fn circuit(&self) -> &Circuit {
        &self.circuit
    }

    fn dims(&self, q: &Tensor, k: &Tensor) -> Result<(usize, usize)> {
        let ok = |t: &Tensor| t.rank() == 3 && t.shape()[2] == self.m;
        if !ok(q) || !ok(k) || q.shape()[..2] != k.shape()[..2] {
            return Err(Error::Shape(format!(
                "quantum attention expects queries and keys [B, L, {}], got {:?} and {:?}",
                self.m,
                q.shape(),
                k.shape()
            )));
        }
        Ok((q.shape()[0], q.shape()[1]))
    }
}

impl CustomOp for QuantumAttention {
    fn name(&self) -> &str {
        "quantum_attention"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity(self.name(), inputs, 3)?;
        let (b, l) = self.dims(inputs[0], inputs[1])?;
        let comp = CompiledCircuit::new(&self.circuit, theta_of(&self.circuit, inputs[2])?)?;
        let (q, k) = (inputs[0].data(), inputs[1].data());
        let stride = l * self.m;
        let seqs = self.exec.map_range(b, |s| {
            comp.pair_forward(
                self.m,
                &q[s * stride..(s + 1) * stride],
                &k[s * stride..(s + 1) * stride],
            )
        });
        let mut out = Vec::with_capacity(b * l * l);
        for f in seqs {
            out.extend(f?.into_iter().map(|z| 0.5 * (1.0 + z)));
        }
        Tensor::new(&[b, l, l], out)
    }

    fn vjp(&self, inputs: &[&Tensor], _output: &Tensor, cotangent: &Tensor) -> Result<Vec<Tensor>> {
        arity(self.name(), inputs, 3)?;
        let (b, l) = self.dims(inputs[0], inputs[1])?;
        let comp = CompiledCircuit::new(&self.circuit, theta_of(&self.circuit, inputs[2])?)?;
        let (q, k) = (inputs[0].data(), inputs[1].data());
        let stride = l * self.m;
        let cot: Vec<f64> = cotangent.data().iter().map(|c| 0.5 * c).collect();
        let parts = self.exec.map_range(b, |s| {
            comp.pair_backward(
                self.m,
                &q[s * stride..(s + 1) * stride],
                &k[s * stride..(s + 1) * stride],
                &cot[s * l * l..(s + 1) * l * l],
            )
        });
        let mut gq = Vec::with_capacity(q.len());
        let mut gk = Vec::with_capacity(k.len());
        let mut rho: Option<Vec<_>> = None;
        for p in parts {
            let (a, c, r) = p?;
            gq.extend(a);
            gk.extend(c);
            match rho.as_mut() {
                None => rho = Some(r),
                Some(acc) => acc.iter_mut().zip(&r).for_each(|(x, y)| *x += y),
            }
        }
        let gt = match rho {
            Some(r) => comp.theta_grad(&[r]),
            None => vec![0.0; self.circuit.n_params()],
        };
        Ok(vec![
            Tensor::new(inputs[0].shape(), gq)?,
            Tensor::new(inputs[1].shape(), gk)?,
            Tensor::vector(gt),
        ])
    }
}

/// Record a [`QuantumLayer`] on `tape`.
pub fn quantum_layer(
    tape: &Tape,
    circuit: &Circuit,
    x: Var,
    theta: Var,
    exec: Execution,
) -> Result<Var> {
    tape.custom(
        Box::new(QuantumLayer::new(circuit.clone(), exec)),
        &[x, theta],
    )
}

/// Record a [`QuantumAttention`] on `tape`.
pub fn quantum_attention(
    tape: &Tape,
    spec: &CircuitSpec,
    m: usize,
    q: Var,
    k: Var,
    theta: Var,
    exec: Execution,
) -> Result<Var> {
    tape.custom(
        Box::new(QuantumAttention::new(spec, m, exec)?),
        &[q, k, theta],
    )
}

/// Map raw features to rotation angles in `(-pi, pi)`.
pub fn angle_squash(tape: &Tape, x: Var) -> Var {
    tape.scale(tape.tanh(x), 2.0 * FRAC_PI_2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{central_difference, max_relative_error};

    #[test]
    fn layer_gradient_matches_finite_differences() {
        let spec = CircuitSpec::default();
        let c = spec.qnn_circuit().unwrap();
        let x0: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let t0: Vec<f64> = (0..8).map(|i| (i as f64 * 1.1).cos()).collect();
        let w: Vec<f64> = (0..12).map(|i| 1.0 + 0.1 * i as f64).collect();
        let loss = |x: &[f64], t: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
            let tape = Tape::new();
            let xv = tape.var(Tensor::new(&[3, 4], x.to_vec()).unwrap());
            let tv = tape.var(Tensor::vector(t.to_vec()));
            let z = quantum_layer(&tape, &c, xv, tv, Execution::Sequential).unwrap();
            let wv = tape.constant(Tensor::new(&[3, 4], w.clone()).unwrap());
            let l = tape.sum(tape.mul(z, wv).unwrap());
            let g = tape.backward(l).unwrap();
            (
                tape.value(l).item().unwrap(),
                g.get(xv).unwrap().data().to_vec(),
                g.get(tv).unwrap().data().to_vec(),
            )
        };
        let (_, gx, gt) = loss(&x0, &t0);
        let nx = central_difference(&x0, 1e-5, |x| loss(x, &t0).0);
        let nt = central_difference(&t0, 1e-5, |t| loss(&x0, t).0);
        assert!(max_relative_error(&gx, &nx, 1e-8) < 1e-6);
        assert!(max_relative_error(&gt, &nt, 1e-8) < 1e-6);
    }

    #[test]
    fn attention_scores_are_probabilities_with_matching_gradient() {
        let spec = CircuitSpec::default();
        let q0: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin() * 2.0).collect();
        let k0: Vec<f64> = (0..12).map(|i| (i as f64 * 0.45).cos() * 2.0).collect();
        let t0: Vec<f64> = (0..8).map(|i| (i as f64 * 0.9 + 0.2).sin() * 3.0).collect();
        let w: Vec<f64> = (0..18).map(|i| (i as f64 * 0.3).cos()).collect();
        let run = |q: &[f64], k: &[f64], t: &[f64], grads: bool| {
            let tape = Tape::new();
            let qv = tape.var(Tensor::new(&[2, 3, 2], q.to_vec()).unwrap());
            let kv = tape.var(Tensor::new(&[2, 3, 2], k.to_vec()).unwrap());
            let tv = tape.var(Tensor::vector(t.to_vec()));
            let s = quantum_attention(&tape, &spec, 2, qv, kv, tv, Execution::Parallel).unwrap();
            assert!(tape.value(s).data().iter().all(|v| (0.0..=1.0).contains(v)));
            let wv = tape.constant(Tensor::new(&[2, 3, 3], w.clone()).unwrap());
            let l = tape.sum(tape.mul(s, wv).unwrap());
            let val = tape.value(l).item().unwrap();
            if !grads {
                return (val, vec![]);
            }
            let g = tape.backward(l).unwrap();
            let all = [
                g.get(qv).unwrap().data(),
                g.get(kv).unwrap().data(),
                g.get(tv).unwrap().data(),
            ]
            .concat();
            (val, all)
        };
        let (_, g) = run(&q0, &k0, &t0, true);
        let all0 = [q0.clone(), k0.clone(), t0.clone()].concat();
        let num = central_difference(&all0, 1e-5, |v| {
            run(&v[..12], &v[12..24], &v[24..], false).0
        });
        assert!(max_relative_error(&g, &num, 1e-6) < 1e-5);
        assert!(
            g.iter().all(|v| v.abs() > 1e-8),
            "every angle and parameter reaches the score: {g:?}"
        );
    }
}
