use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use super::gates::{Gate, Statevector};
use crate::error::{Error, Result};

/// Where a rotation angle comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Angle {
    /// Data input `x[i]` (an embedding angle).
    Input(usize),
    /// Trainable parameter `theta[p]`.
    Param(usize),
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CircuitOp {
    RX(usize, Angle),
    RY(usize, Angle),
    RZ(usize, Angle),
    Cnot(usize, usize),
    Cry(usize, usize, Angle),
}

impl CircuitOp {
    pub(crate) fn angle(&self) -> Option<Angle> {
        match *self {
            CircuitOp::RX(_, a)
            | CircuitOp::RY(_, a)
            | CircuitOp::RZ(_, a)
            | CircuitOp::Cry(_, _, a) => Some(a),
            CircuitOp::Cnot(..) => None,
        }
    }

    pub(crate) fn gate(&self, x: &[f64], theta: &[f64], delta: f64) -> Gate {
        let v = |a: Angle| {
            delta
                + match a {
                    Angle::Input(i) => x[i],
                    Angle::Param(p) => theta[p],
                    Angle::Fixed(f) => f,
                }
        };
        match *self {
            CircuitOp::RX(w, a) => Gate::RX(w, v(a)),
            CircuitOp::RY(w, a) => Gate::RY(w, v(a)),
            CircuitOp::RZ(w, a) => Gate::RZ(w, v(a)),
            CircuitOp::Cnot(c, t) => Gate::Cnot {
                control: c,
                target: t,
            },
            CircuitOp::Cry(c, t, a) => Gate::Cry {
                control: c,
                target: t,
                angle: v(a),
            },
        }
    }
}

/// A parameterized circuit with Pauli-Z readout on selected wires.
#[derive(Debug, Clone, PartialEq)]
pub struct Circuit {
    n_qubits: usize,
    n_inputs: usize,
    n_params: usize,
    ops: Vec<CircuitOp>,
    readout: Vec<usize>,
}

impl Circuit {
    pub fn new(
        n_qubits: usize,
        n_inputs: usize,
        n_params: usize,
        ops: Vec<CircuitOp>,
        readout: Vec<usize>,
    ) -> Result<Self> {
        if n_qubits == 0 || n_qubits > 12 {
            return Err(Error::InvalidSpec(format!(
                "{n_qubits} qubits (dense simulation supports 1..=12)"
            )));
        }
        let wire_ok = |w: usize| {
            if w < n_qubits {
                Ok(())
            } else {
                Err(Error::OutOfRange(format!(
                    "wire {w} on a {n_qubits}-qubit circuit"
                )))
            }
        };
        for op in &ops {
            match *op {
                CircuitOp::RX(w, _) | CircuitOp::RY(w, _) | CircuitOp::RZ(w, _) => wire_ok(w)?,
                CircuitOp::Cnot(c, t) | CircuitOp::Cry(c, t, _) => {
                    wire_ok(c)?;
                    wire_ok(t)?;
                    if c == t {
                        return Err(Error::OutOfRange(format!(
                            "control and target are both wire {c}"
                        )));
                    }
                }
            }
            match op.angle() {
                Some(Angle::Input(i)) if i >= n_inputs => {
                    return Err(Error::OutOfRange(format!("input {i} of {n_inputs}")))
                }
                Some(Angle::Param(p)) if p >= n_params => {
                    return Err(Error::OutOfRange(format!("parameter {p} of {n_params}")))
                }
                _ => {}
            }
        }
        for &w in &readout {
            wire_ok(w)?;
        }
        Ok(Self {
            n_qubits,
            n_inputs,
            n_params,
            ops,
            readout,
        })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn n_outputs(&self) -> usize {
        self.readout.len()
    }

    pub fn ops(&self) -> &[CircuitOp] {
        &self.ops
    }

    pub fn readout(&self) -> &[usize] {
        &self.readout
    }

    fn check_dims(&self, x: &[f64], theta: &[f64]) -> Result<()> {
        if x.len() != self.n_inputs || theta.len() != self.n_params {
            return Err(Error::Shape(format!(
                "circuit takes {} inputs and {} parameters, got {} and {}",
                self.n_inputs,
                self.n_params,
                x.len(),
                theta.len()
            )));
        }
        Ok(())
    }

    /// Final state with the angle of op `shifted.0` offset by `shifted.1`.
    pub(crate) fn run_shifted(
        &self,
        x: &[f64],
        theta: &[f64],
        shifted: Option<(usize, f64)>,
    ) -> Statevector {
        let mut s = Statevector::zero(self.n_qubits).expect("validated register size");
        let n = self.n_qubits;
        for (i, op) in self.ops.iter().enumerate() {
            let delta = match shifted {
                Some((j, d)) if j == i => d,
                _ => 0.0,
            };
            op.gate(x, theta, delta).apply_unchecked(s.amps_mut(), n);
        }
        s
    }

    pub fn run(&self, x: &[f64], theta: &[f64]) -> Result<Statevector> {
        self.check_dims(x, theta)?;
        Ok(self.run_shifted(x, theta, None))
    }

    /// `<Z_w>` for every readout wire.
    pub fn expectations(&self, x: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        let s = self.run(x, theta)?;
        Ok(self.readout_of(&s))
    }

    fn readout_of(&self, s: &Statevector) -> Vec<f64> {
        self.readout
            .iter()
            .map(|&w| super::gates::expect_z(s.amplitudes(), self.n_qubits, w))
            .collect()
    }

    /// Reject circuits whose trainable or input angles feed non-Pauli rotations.
    pub(crate) fn check_shiftable(&self) -> Result<()> {
        for op in &self.ops {
            if let CircuitOp::Cry(c, t, a) = op {
                if !matches!(a, Angle::Fixed(_)) {
                    return Err(Error::UnsupportedGate(format!(
                        "controlled RY on wires ({c}, {t})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Gradients of `sum_r cotangent[r] * <Z_r>` with respect to the inputs and
/// parameters, by the two-term shift rule applied to every angle occurrence:
/// `d f / d phi = (f(phi + pi/2) - f(phi - pi/2)) / 2`.
///
/// Each shifted term is a full re-simulation; this is the reference path.
pub fn param_shift_grad(
    circuit: &Circuit,
    x: &[f64],
    theta: &[f64],
    cotangent: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    circuit.check_dims(x, theta)?;
    circuit.check_shiftable()?;
    if cotangent.len() != circuit.n_outputs() {
        return Err(Error::Shape(format!(
            "cotangent of length {} for {} outputs",
            cotangent.len(),
            circuit.n_outputs()
        )));
    }
    let mut gx = vec![0.0; circuit.n_inputs];
    let mut gt = vec![0.0; circuit.n_params];
    let f = |j: usize, d: f64| -> f64 {
        let s = circuit.run_shifted(x, theta, Some((j, d)));
        circuit
            .readout_of(&s)
            .iter()
            .zip(cotangent)
            .map(|(z, c)| z * c)
            .sum()
    };
    for (j, op) in circuit.ops.iter().enumerate() {
        let slot = match op.angle() {
            Some(Angle::Input(i)) => &mut gx[i],
            Some(Angle::Param(p)) => &mut gt[p],
            _ => continue,
        };
        *slot += 0.5 * (f(j, FRAC_PI_2) - f(j, -FRAC_PI_2));
    }
    Ok((gx, gt))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Entangler {
    /// CNOT(i, i + 1) for adjacent wires.
    #[default]
    LinearChain,
    /// Linear chain closed by CNOT(n - 1, 0).
    Ring,
}

/// Shape of the variational circuits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CircuitSpec {
    pub n_qubits: usize,
    pub n_layers: usize,
    pub entangler: Entangler,
}

impl Default for CircuitSpec {
    fn default() -> Self {
        Self {
            n_qubits: 4,
            n_layers: 2,
            entangler: Entangler::LinearChain,
        }
    }
}

impl CircuitSpec {
    fn validate(&self) -> Result<()> {
        if self.n_qubits == 0 || self.n_layers == 0 {
            return Err(Error::InvalidSpec(format!(
                "circuit needs at least one qubit and one layer, got {} and {}",
                self.n_qubits, self.n_layers
            )));
        }
        Ok(())
    }

    /// Angle-embedded feature circuit: `RX(x_i) RZ(x_i)` on wire `i`, then
    /// `n_layers` of `[RY(theta) on every wire, entangler]`, reading `<Z_i>`
    /// on every wire. Parameter `l * n + i` is layer `l`, wire `i`.
    pub fn qnn_circuit(&self) -> Result<Circuit> {
        self.validate()?;
        let n = self.n_qubits;
        let mut ops = Vec::new();
        for i in 0..n {
            ops.push(CircuitOp::RX(i, Angle::Input(i)));
            ops.push(CircuitOp::RZ(i, Angle::Input(i)));
        }
        for l in 0..self.n_layers {
            for i in 0..n {
                ops.push(CircuitOp::RY(i, Angle::Param(l * n + i)));
            }
            if n > 1 {
                for i in 0..n - 1 {
                    ops.push(CircuitOp::Cnot(i, i + 1));
                }
                if self.entangler == Entangler::Ring && n > 2 {
                    ops.push(CircuitOp::Cnot(n - 1, 0));
                }
            }
        }
        Circuit::new(n, n, self.n_layers * n, ops, (0..n).collect())
    }

    /// Query-key interaction circuit: query angles on wires `0..m`, key angles
    /// on wires `m..2m` (each `RX` then `RZ`), then `n_layers` of
    /// `[RY(theta) on wires 0..2m, CNOT(m + i, i) for i < m,
    /// CNOT(i + 1, i) for i = m - 2 down to 0]`, reading `<Z_0>`. Every CNOT
    /// targets the query side so the readout wire sees every angle.
    pub fn attention_circuit(&self, m: usize) -> Result<Circuit> {
        self.validate()?;
        if m == 0 || 2 * m > self.n_qubits {
            return Err(Error::Shape(format!(
                "{m} angles per query/key do not fit on {} qubits",
                self.n_qubits
            )));
        }
        let mut ops = Vec::new();
        for i in 0..2 * m {
            ops.push(CircuitOp::RX(i, Angle::Input(i)));
            ops.push(CircuitOp::RZ(i, Angle::Input(i)));
        }
        for l in 0..self.n_layers {
            for w in 0..2 * m {
                ops.push(CircuitOp::RY(w, Angle::Param(l * 2 * m + w)));
            }
            for i in 0..m {
                ops.push(CircuitOp::Cnot(m + i, i));
            }
            for i in (0..m - 1).rev() {
                ops.push(CircuitOp::Cnot(i + 1, i));
            }
        }
        Circuit::new(self.n_qubits, 2 * m, self.n_layers * 2 * m, ops, vec![0])
    }
}

/// `<Z_i>` of the feature circuit for projected input `x_proj`.
pub fn qnn_forward(spec: &CircuitSpec, x_proj: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
    spec.qnn_circuit()?.expectations(x_proj, theta)
}

/// Attention score `(1 + <Z_0>) / 2` in `[0, 1]` for one query/key pair.
pub fn quantum_attention_score(
    spec: &CircuitSpec,
    q_angles: &[f64],
    k_angles: &[f64],
    theta: &[f64],
) -> Result<f64> {
    if q_angles.len() != k_angles.len() {
        return Err(Error::Shape(format!(
            "query has {} angles, key has {}",
            q_angles.len(),
            k_angles.len()
        )));
    }
    let c = spec.attention_circuit(q_angles.len())?;
    let x: Vec<f64> = q_angles.iter().chain(k_angles).copied().collect();
    Ok((1.0 + c.expectations(&x, theta)?[0]) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn zero_angles_give_unit_expectations() {
        let spec = CircuitSpec::default();
        let z = qnn_forward(&spec, &[0.0; 4], &[0.0; 8]).unwrap();
        assert_eq!(z, vec![1.0; 4]);
        assert_eq!(
            quantum_attention_score(&spec, &[0.0; 2], &[0.0; 2], &[0.0; 8]).unwrap(),
            1.0
        );
    }

    #[test]
    fn single_qubit_flip() {
        let spec = CircuitSpec {
            n_qubits: 1,
            n_layers: 1,
            entangler: Entangler::LinearChain,
        };
        let z = qnn_forward(&spec, &[PI], &[0.0]).unwrap();
        assert!((z[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_gradient() {
        let c = Circuit::new(1, 0, 1, vec![CircuitOp::RY(0, Angle::Param(0))], vec![0]).unwrap();
        let (_, g) = param_shift_grad(&c, &[], &[FRAC_PI_2], &[1.0]).unwrap();
        assert!((g[0] + 1.0).abs() < 1e-12);
        assert!((c.expectations(&[], &[0.3]).unwrap()[0] - 0.3f64.cos()).abs() < 1e-12);
    }

    #[test]
    fn disconnected_parameter_has_zero_gradient() {
        let c = Circuit::new(
            2,
            0,
            2,
            vec![
                CircuitOp::RY(1, Angle::Param(0)),
                CircuitOp::RX(1, Angle::Param(1)),
            ],
            vec![0],
        )
        .unwrap();
        let (_, g) = param_shift_grad(&c, &[], &[0.4, -1.3], &[1.0]).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn controlled_rotation_is_rejected() {
        let c = Circuit::new(
            2,
            0,
            1,
            vec![CircuitOp::Cry(0, 1, Angle::Param(0))],
            vec![1],
        )
        .unwrap();
        assert!(c.expectations(&[], &[0.2]).is_ok());
        assert!(matches!(
            param_shift_grad(&c, &[], &[0.2], &[1.0]),
            Err(Error::UnsupportedGate(_))
        ));
    }

    #[test]
    fn dimension_errors() {
        let spec = CircuitSpec::default();
        assert!(qnn_forward(&spec, &[0.0; 3], &[0.0; 8]).is_err());
        assert!(quantum_attention_score(&spec, &[0.0; 3], &[0.0; 3], &[0.0; 12]).is_err());
        assert!(quantum_attention_score(&spec, &[0.0; 2], &[0.0; 1], &[0.0; 8]).is_err());
        assert!(Circuit::new(2, 1, 0, vec![CircuitOp::RX(0, Angle::Input(1))], vec![0]).is_err());
        assert!(CircuitSpec {
            n_qubits: 4,
            n_layers: 0,
            entangler: Entangler::Ring
        }
        .qnn_circuit()
        .is_err());
    }

    #[test]
    fn attention_score_depends_on_key() {
        let spec = CircuitSpec::default();
        let theta = [0.3, -0.7, 1.1, 0.4, -0.2, 0.9, 0.5, -1.2];
        let a = quantum_attention_score(&spec, &[0.4, -0.8], &[0.1, 0.2], &theta).unwrap();
        let b = quantum_attention_score(&spec, &[0.4, -0.8], &[1.5, -2.0], &theta).unwrap();
        assert!((a - b).abs() > 1e-3, "{a} vs {b}");
        let c = quantum_attention_score(&spec, &[0.4, -0.8], &[0.1, 1.2], &theta).unwrap();
        let d = quantum_attention_score(&spec, &[0.4, 0.9], &[0.1, 0.2], &theta).unwrap();
        assert!((a - c).abs() > 1e-3 && (a - d).abs() > 1e-3, "{a} {c} {d}");
        assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
    }
}
