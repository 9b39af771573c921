use num_complex::Complex64 as C64;

use crate::error::{Error, Result};

/// A gate with a concrete angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gate {
    RX(usize, f64),
    RY(usize, f64),
    RZ(usize, f64),
    Cnot {
        control: usize,
        target: usize,
    },
    /// Controlled RY. Simulated, but its generator has a zero eigenvalue so the
    /// two-term shift rule does not apply to it.
    Cry {
        control: usize,
        target: usize,
        angle: f64,
    },
}

pub(crate) type Mat2 = [[C64; 2]; 2];

const ZERO: C64 = C64::new(0.0, 0.0);

pub(crate) fn rx(theta: f64) -> Mat2 {
    let (s, c) = (theta / 2.0).sin_cos();
    [
        [C64::new(c, 0.0), C64::new(0.0, -s)],
        [C64::new(0.0, -s), C64::new(c, 0.0)],
    ]
}

pub(crate) fn ry(theta: f64) -> Mat2 {
    let (s, c) = (theta / 2.0).sin_cos();
    [
        [C64::new(c, 0.0), C64::new(-s, 0.0)],
        [C64::new(s, 0.0), C64::new(c, 0.0)],
    ]
}

pub(crate) fn rz(theta: f64) -> Mat2 {
    let (s, c) = (theta / 2.0).sin_cos();
    [[C64::new(c, -s), ZERO], [ZERO, C64::new(c, s)]]
}

pub(crate) fn mat2_vec(m: &Mat2, v: [C64; 2]) -> [C64; 2] {
    [
        m[0][0] * v[0] + m[0][1] * v[1],
        m[1][0] * v[0] + m[1][1] * v[1],
    ]
}

/// Bit mask of `wire` in an amplitude index; wire 0 is the most significant bit.
#[inline]
pub(crate) fn wire_mask(n_qubits: usize, wire: usize) -> usize {
    1 << (n_qubits - 1 - wire)
}

/// Apply a single-qubit matrix to `wire` of an amplitude buffer.
pub(crate) fn apply_1q(amps: &mut [C64], n_qubits: usize, wire: usize, m: &Mat2) {
    let mask = wire_mask(n_qubits, wire);
    for i in 0..amps.len() {
        if i & mask == 0 {
            let j = i | mask;
            let (a, b) = (amps[i], amps[j]);
            amps[i] = m[0][0] * a + m[0][1] * b;
            amps[j] = m[1][0] * a + m[1][1] * b;
        }
    }
}

pub(crate) fn apply_cnot(amps: &mut [C64], n_qubits: usize, control: usize, target: usize) {
    let cm = wire_mask(n_qubits, control);
    let tm = wire_mask(n_qubits, target);
    for i in 0..amps.len() {
        if i & cm != 0 && i & tm == 0 {
            amps.swap(i, i | tm);
        }
    }
}

pub(crate) fn apply_controlled(
    amps: &mut [C64],
    n_qubits: usize,
    control: usize,
    target: usize,
    m: &Mat2,
) {
    let cm = wire_mask(n_qubits, control);
    let tm = wire_mask(n_qubits, target);
    for i in 0..amps.len() {
        if i & cm != 0 && i & tm == 0 {
            let j = i | tm;
            let (a, b) = (amps[i], amps[j]);
            amps[i] = m[0][0] * a + m[0][1] * b;
            amps[j] = m[1][0] * a + m[1][1] * b;
        }
    }
}

impl Gate {
    fn check(&self, n_qubits: usize) -> Result<()> {
        let wires: &[usize] = match self {
            Gate::RX(w, _) | Gate::RY(w, _) | Gate::RZ(w, _) => &[*w],
            Gate::Cnot { control, target }
            | Gate::Cry {
                control, target, ..
            } => {
                if control == target {
                    return Err(Error::OutOfRange(format!(
                        "control and target are both wire {control}"
                    )));
                }
                &[*control, *target]
            }
        };
        match wires.iter().find(|&&w| w >= n_qubits) {
            Some(w) => Err(Error::OutOfRange(format!(
                "wire {w} on a {n_qubits}-qubit register"
            ))),
            None => Ok(()),
        }
    }

    pub(crate) fn apply_unchecked(&self, amps: &mut [C64], n: usize) {
        match *self {
            Gate::RX(w, t) => apply_1q(amps, n, w, &rx(t)),
            Gate::RY(w, t) => apply_1q(amps, n, w, &ry(t)),
            Gate::RZ(w, t) => apply_1q(amps, n, w, &rz(t)),
            Gate::Cnot { control, target } => apply_cnot(amps, n, control, target),
            Gate::Cry {
                control,
                target,
                angle,
            } => apply_controlled(amps, n, control, target, &ry(angle)),
        }
    }
}

/// Dense amplitude vector of an `n`-qubit register.
///
/// Basis index bits are big-endian in wire order: wire 0 is the most
/// significant bit, so on two qubits index `0b10` is `|1>|0>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Statevector {
    n_qubits: usize,
    amps: Vec<C64>,
}

impl Statevector {
    /// `|0...0>`.
    pub fn zero(n_qubits: usize) -> Result<Self> {
        if n_qubits == 0 || n_qubits > 24 {
            return Err(Error::InvalidSpec(format!(
                "unsupported register size {n_qubits}"
            )));
        }
        let mut amps = vec![ZERO; 1 << n_qubits];
        amps[0] = C64::new(1.0, 0.0);
        Ok(Self { n_qubits, amps })
    }

    pub fn from_amplitudes(n_qubits: usize, amps: Vec<C64>) -> Result<Self> {
        if amps.len() != 1 << n_qubits {
            return Err(Error::Shape(format!(
                "{} amplitudes for {n_qubits} qubits",
                amps.len()
            )));
        }
        Ok(Self { n_qubits, amps })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amps
    }

    pub(crate) fn amps_mut(&mut self) -> &mut [C64] {
        &mut self.amps
    }

    pub fn norm_sq(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn apply(&mut self, gate: &Gate) -> Result<()> {
        gate.check(self.n_qubits)?;
        gate.apply_unchecked(&mut self.amps, self.n_qubits);
        Ok(())
    }

    /// `<psi| Z_wire |psi>`.
    pub fn expect_z(&self, wire: usize) -> Result<f64> {
        if wire >= self.n_qubits {
            return Err(Error::OutOfRange(format!(
                "wire {wire} on a {}-qubit register",
                self.n_qubits
            )));
        }
        Ok(expect_z(&self.amps, self.n_qubits, wire))
    }
}

pub(crate) fn expect_z(amps: &[C64], n: usize, wire: usize) -> f64 {
    let mask = wire_mask(n, wire);
    amps.iter()
        .enumerate()
        .map(|(i, a)| {
            if i & mask == 0 {
                a.norm_sqr()
            } else {
                -a.norm_sqr()
            }
        })
        .sum()
}
