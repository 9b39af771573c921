//! Statevector simulation of small parameterized circuits.
//!
//! Conventions: wire 0 is the most significant bit of the basis index,
//! `RX(t) = [[c, -is], [-is, c]]`, `RY(t) = [[c, -s], [s, c]]` and
//! `RZ(t) = diag(e^{-it/2}, e^{it/2})` with `c = cos(t/2)`, `s = sin(t/2)`.
//! Gradients use the two-term parameter-shift rule; controlled rotations can
//! be simulated but are rejected when differentiated.

mod circuit;
mod compiled;
mod gates;
mod layers;

pub use circuit::{
    param_shift_grad, qnn_forward, quantum_attention_score, Angle, Circuit, CircuitOp, CircuitSpec,
    Entangler,
};
pub use compiled::{CompiledCircuit, MAX_COMPILED_QUBITS};
pub use gates::{Gate, Statevector};
pub use layers::{angle_squash, quantum_attention, quantum_layer, QuantumAttention, QuantumLayer};
