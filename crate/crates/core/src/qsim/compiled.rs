//! Batched evaluation with the variational block compiled to a dense unitary.
//!
//! A circuit is split into an embedding prefix (single-qubit rotations whose
//! angles are inputs or constants, so every sample starts from a product state)
//! and a variational block with no input angles. The block is compiled once per
//! parameter vector into `U`, and each readout becomes the Heisenberg-picture
//! observable `M_r = U^dag Z_r U`. Gradients are still the two-term shift rule
//! on every angle occurrence; only the bookkeeping changes:
//!
//! * input shifts re-evaluate `psi(x +- pi/2 e_i)^dag M psi(x +- pi/2 e_i)`,
//! * parameter shifts evaluate `tr(M_r(theta +- pi/2 e_p) rho_r)` against the
//!   cotangent-weighted density matrices `rho_r = sum_n c_nr psi_n psi_n^dag`.

use std::f64::consts::FRAC_PI_2;
use std::ops::Range;

use num_complex::Complex64 as C64;

use super::circuit::{Angle, Circuit, CircuitOp};
use super::gates::{mat2_vec, rx, ry, rz, wire_mask};
use crate::error::{Error, Result};
use crate::par::Execution;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

/// Largest register the dense fast path accepts.
pub const MAX_COMPILED_QUBITS: usize = 8;

#[derive(Debug, Clone)]
pub struct CompiledCircuit {
    circuit: Circuit,
    theta: Vec<f64>,
    dim: usize,
    /// Embedding op indices per wire, in application order.
    prefix: Vec<Vec<usize>>,
    block: Vec<usize>,
    unitary: Vec<C64>,
    observables: Vec<Vec<C64>>,
}

/// `Re(v^dag M v)` for a dense row-major `M`.
fn quad(m: &[C64], v: &[C64]) -> f64 {
    let d = v.len();
    let mut acc = 0.0;
    for a in 0..d {
        let row = &m[a * d..(a + 1) * d];
        let mv: C64 = row.iter().zip(v).map(|(x, y)| x * y).sum();
        acc += (v[a].conj() * mv).re;
    }
    acc
}

/// `Re tr(M rho)`.
fn trace_product(m: &[C64], rho: &[C64], d: usize) -> f64 {
    let mut acc = 0.0;
    for a in 0..d {
        for b in 0..d {
            acc += (m[a * d + b] * rho[b * d + a]).re;
        }
    }
    acc
}

fn kron_vec(a: &[C64], b: &[C64]) -> Vec<C64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for x in a {
        for y in b {
            out.push(x * y);
        }
    }
    out
}

/// `rho += w * v v^dag`.
fn add_outer(rho: &mut [C64], v: &[C64], w: f64) {
    let d = v.len();
    for a in 0..d {
        let va = v[a] * w;
        for b in 0..d {
            rho[a * d + b] += va * v[b].conj();
        }
    }
}

fn add_into(acc: &mut [C64], other: &[C64]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}

impl CompiledCircuit {
    pub fn new(circuit: &Circuit, theta: &[f64]) -> Result<Self> {
        circuit.check_shiftable()?;
        let n = circuit.n_qubits();
        if n > MAX_COMPILED_QUBITS {
            return Err(Error::InvalidSpec(format!(
                "{n} qubits exceeds the compiled limit of {MAX_COMPILED_QUBITS}"
            )));
        }
        if theta.len() != circuit.n_params() {
            return Err(Error::Shape(format!(
                "circuit takes {} parameters, got {}",
                circuit.n_params(),
                theta.len()
            )));
        }
        let mut prefix = vec![Vec::new(); n];
        let mut block = Vec::new();
        for (i, op) in circuit.ops().iter().enumerate() {
            let single = match *op {
                CircuitOp::RX(w, a) | CircuitOp::RY(w, a) | CircuitOp::RZ(w, a) => Some((w, a)),
                _ => None,
            };
            match single {
                Some((w, Angle::Input(_) | Angle::Fixed(_))) if block.is_empty() => {
                    prefix[w].push(i)
                }
                _ => {
                    if matches!(op.angle(), Some(Angle::Input(_))) {
                        return Err(Error::InvalidSpec(format!(
                            "op {i} uses an input angle after the variational block started"
                        )));
                    }
                    block.push(i);
                }
            }
        }
        let mut c = Self {
            circuit: circuit.clone(),
            theta: theta.to_vec(),
            dim: 1 << n,
            prefix,
            block,
            unitary: Vec::new(),
            observables: Vec::new(),
        };
        c.unitary = c.block_unitary(None);
        c.observables = circuit
            .readout()
            .iter()
            .map(|&w| c.observable(&c.unitary, w))
            .collect();
        Ok(c)
    }

    pub fn circuit(&self) -> &Circuit {
        &self.circuit
    }

    pub fn n_outputs(&self) -> usize {
        self.observables.len()
    }

    /// Dense unitary of the variational block, optionally with one op shifted.
    fn block_unitary(&self, shift: Option<(usize, f64)>) -> Vec<C64> {
        let d = self.dim;
        let n = self.circuit.n_qubits();
        let mut u = vec![ZERO; d * d];
        let mut col = vec![ZERO; d];
        for b in 0..d {
            col.iter_mut().for_each(|v| *v = ZERO);
            col[b] = ONE;
            for &i in &self.block {
                let delta = match shift {
                    Some((j, s)) if j == i => s,
                    _ => 0.0,
                };
                self.circuit.ops()[i]
                    .gate(&[], &self.theta, delta)
                    .apply_unchecked(&mut col, n);
            }
            for a in 0..d {
                u[a * d + b] = col[a];
            }
        }
        u
    }

    /// `U^dag Z_w U`.
    fn observable(&self, u: &[C64], wire: usize) -> Vec<C64> {
        let d = self.dim;
        let mask = wire_mask(self.circuit.n_qubits(), wire);
        let mut m = vec![ZERO; d * d];
        for c in 0..d {
            let z = if c & mask == 0 { 1.0 } else { -1.0 };
            let row = &u[c * d..(c + 1) * d];
            for a in 0..d {
                let left = row[a].conj() * z;
                for b in 0..d {
                    m[a * d + b] += left * row[b];
                }
            }
        }
        m
    }

    fn wire_factor(&self, wire: usize, x: &[f64], shift: Option<(usize, f64)>) -> [C64; 2] {
        let mut v = [ONE, ZERO];
        for &i in &self.prefix[wire] {
            let op = &self.circuit.ops()[i];
            let delta = match shift {
                Some((j, s)) if j == i => s,
                _ => 0.0,
            };
            let angle = delta
                + match op.angle() {
                    Some(Angle::Input(k)) => x[k],
                    Some(Angle::Fixed(f)) => f,
                    _ => unreachable!("prefix ops carry input or fixed angles"),
                };
            let m = match op {
                CircuitOp::RX(..) => rx(angle),
                CircuitOp::RY(..) => ry(angle),
                _ => rz(angle),
            };
            v = mat2_vec(&m, v);
        }
        v
    }

    /// Product state over `wires` (lowest wire most significant).
    fn product_state(
        &self,
        wires: Range<usize>,
        x: &[f64],
        shift: Option<(usize, f64)>,
    ) -> Vec<C64> {
        let mut s = vec![ONE];
        for w in wires {
            s = kron_vec(&s, &self.wire_factor(w, x, shift));
        }
        s
    }

    /// Embedding occurrences `(op index, input index)` on `wires`.
    fn input_occurrences(&self, wires: Range<usize>) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for w in wires {
            for &i in &self.prefix[w] {
                if let Some(Angle::Input(k)) = self.circuit.ops()[i].angle() {
                    out.push((w, i, k));
                }
            }
        }
        out
    }

    fn check_rows(&self, len: usize, width: usize, what: &str) -> Result<usize> {
        if width == 0 || len % width != 0 {
            return Err(Error::Shape(format!(
                "{what} of length {len} is not a multiple of {width}"
            )));
        }
        Ok(len / width)
    }

    /// Readout expectations for one input vector.
    pub fn expectations(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.circuit.n_inputs() {
            return Err(Error::Shape(format!(
                "circuit takes {} inputs, got {}",
                self.circuit.n_inputs(),
                x.len()
            )));
        }
        Ok(self.expect_row(x))
    }

    fn expect_row(&self, x: &[f64]) -> Vec<f64> {
        let n = self.circuit.n_qubits();
        let d = self.dim;
        let psi = self.product_state(0..n, x, None);
        let mut out = vec![ZERO; d];
        for (a, o) in out.iter_mut().enumerate() {
            *o = self.unitary[a * d..(a + 1) * d]
                .iter()
                .zip(&psi)
                .map(|(u, p)| u * p)
                .sum();
        }
        self.circuit
            .readout()
            .iter()
            .map(|&w| super::gates::expect_z(&out, n, w))
            .collect()
    }

    /// Expectations for a row-major `[rows, n_inputs]` batch, `[rows, n_outputs]` out.
    pub fn forward_batch(&self, xs: &[f64], exec: Execution) -> Result<Vec<f64>> {
        let n_in = self.circuit.n_inputs();
        let rows = self.check_rows(xs.len(), n_in, "input batch")?;
        let out = exec.map_range(rows, |r| self.expect_row(&xs[r * n_in..(r + 1) * n_in]));
        Ok(out.into_iter().flatten().collect())
    }

    /// Gradients of `sum_{n,r} cot[n, r] <Z_r>(x_n)` with respect to the batch
    /// inputs (same layout as `xs`) and the parameters.
    pub fn backward_batch(
        &self,
        xs: &[f64],
        cot: &[f64],
        exec: Execution,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let n_in = self.circuit.n_inputs();
        let n_out = self.n_outputs();
        let rows = self.check_rows(xs.len(), n_in, "input batch")?;
        if cot.len() != rows * n_out {
            return Err(Error::Shape(format!(
                "cotangent of length {} for {rows} rows of {n_out} outputs",
                cot.len()
            )));
        }
        let n = self.circuit.n_qubits();
        let d = self.dim;
        let occ = self.input_occurrences(0..n);
        const CHUNK: usize = 16;
        let parts = exec.map_range(rows.div_ceil(CHUNK), |chunk| {
            let lo = chunk * CHUNK;
            let hi = (lo + CHUNK).min(rows);
            let mut gx = vec![0.0; (hi - lo) * n_in];
            let mut rhos = vec![vec![ZERO; d * d]; n_out];
            let mut m = vec![ZERO; d * d];
            for r in lo..hi {
                let x = &xs[r * n_in..(r + 1) * n_in];
                let c = &cot[r * n_out..(r + 1) * n_out];
                let psi = self.product_state(0..n, x, None);
                m.iter_mut().for_each(|v| *v = ZERO);
                for (k, &ck) in c.iter().enumerate() {
                    if ck != 0.0 {
                        add_outer(&mut rhos[k], &psi, ck);
                        for (mv, ov) in m.iter_mut().zip(&self.observables[k]) {
                            *mv += ov * ck;
                        }
                    }
                }
                let g = &mut gx[(r - lo) * n_in..(r - lo + 1) * n_in];
                for &(_, op, k) in &occ {
                    let plus = self.product_state(0..n, x, Some((op, FRAC_PI_2)));
                    let minus = self.product_state(0..n, x, Some((op, -FRAC_PI_2)));
                    g[k] += 0.5 * (quad(&m, &plus) - quad(&m, &minus));
                }
            }
            (gx, rhos)
        });
        let mut gx = Vec::with_capacity(xs.len());
        let mut rhos = vec![vec![ZERO; d * d]; n_out];
        for (g, r) in parts {
            gx.extend(g);
            for (acc, part) in rhos.iter_mut().zip(&r) {
                add_into(acc, part);
            }
        }
        Ok((gx, self.theta_grad(&rhos)))
    }

    /// `d/d theta sum_r tr(M_r(theta) rho_r)` by shifting each parameter occurrence.
    pub(crate) fn theta_grad(&self, rhos: &[Vec<C64>]) -> Vec<f64> {
        let mut g = vec![0.0; self.circuit.n_params()];
        let readout = self.circuit.readout();
        for &i in &self.block {
            let Some(Angle::Param(p)) = self.circuit.ops()[i].angle() else {
                continue;
            };
            let mut diff = 0.0;
            for (sign, s) in [(1.0, FRAC_PI_2), (-1.0, -FRAC_PI_2)] {
                let u = self.block_unitary(Some((i, s)));
                for (r, rho) in rhos.iter().enumerate() {
                    diff += sign * trace_product(&self.observable(&u, readout[r]), rho, self.dim);
                }
            }
            g[p] += 0.5 * diff;
        }
        g
    }

    /// Number of query inputs when wires `0..split` hold the query embedding
    /// and the remaining wires hold the key embedding.
    fn pair_layout(&self, split: usize) -> Result<(usize, usize)> {
        let n = self.circuit.n_qubits();
        if split == 0 || split >= n || self.n_outputs() != 1 {
            return Err(Error::InvalidSpec(format!(
                "pairwise evaluation needs 0 < split < {n} and one readout, got split {split} and {} readouts",
                self.n_outputs()
            )));
        }
        let q: Vec<usize> = self
            .input_occurrences(0..split)
            .iter()
            .map(|o| o.2)
            .collect();
        let k: Vec<usize> = self
            .input_occurrences(split..n)
            .iter()
            .map(|o| o.2)
            .collect();
        let nq = q.iter().max().map_or(0, |m| m + 1);
        let n_in = self.circuit.n_inputs();
        if k.iter().any(|&i| i < nq) {
            return Err(Error::InvalidSpec(
                "query and key wires share input angles".into(),
            ));
        }
        Ok((nq, n_in - nq))
    }

    fn side_states(
        &self,
        wires: Range<usize>,
        values: &[f64],
        width: usize,
        offset: usize,
    ) -> Vec<Vec<C64>> {
        let mut x = vec![0.0; self.circuit.n_inputs()];
        values
            .chunks(width)
            .map(|v| {
                x[offset..offset + width].copy_from_slice(v);
                self.product_state(wires.clone(), &x, None)
            })
            .collect()
    }

    /// `B_j = <k_j| M |k_j>` contracted over the key wires.
    fn key_contractions(&self, ks: &[Vec<C64>], dq: usize, dk: usize) -> Vec<Vec<C64>> {
        let m = &self.observables[0];
        let d = self.dim;
        ks.iter()
            .map(|k| {
                let mut b = vec![ZERO; dq * dq];
                for a in 0..dq {
                    for bb in 0..dq {
                        let mut acc = ZERO;
                        for c in 0..dk {
                            let row = (a * dk + c) * d + bb * dk;
                            let inner: C64 = (0..dk).map(|e| m[row + e] * k[e]).sum();
                            acc += k[c].conj() * inner;
                        }
                        b[a * dq + bb] = acc;
                    }
                }
                b
            })
            .collect()
    }

    /// `<Z>` for every query/key pair of one sequence: `q` is `[lq, nq]`,
    /// `k` is `[lk, nk]`, the result is `[lq, lk]`.
    pub fn pair_forward(&self, split: usize, q: &[f64], k: &[f64]) -> Result<Vec<f64>> {
        let (nq, nk) = self.pair_layout(split)?;
        self.check_rows(q.len(), nq, "query block")?;
        self.check_rows(k.len(), nk, "key block")?;
        let n = self.circuit.n_qubits();
        let (dq, dk) = (1 << split, 1 << (n - split));
        let qs = self.side_states(0..split, q, nq, 0);
        let ks = self.side_states(split..n, k, nk, nq);
        let bs = self.key_contractions(&ks, dq, dk);
        let mut out = Vec::with_capacity(qs.len() * ks.len());
        for qi in &qs {
            for b in &bs {
                out.push(quad(b, qi));
            }
        }
        Ok(out)
    }

    /// Backward of [`pair_forward`](Self::pair_forward) for cotangent `cot`
    /// (`[lq, lk]`): query and key gradients plus this sequence's density
    /// matrix contribution for [`theta_grad`](Self::theta_grad).
    pub(crate) fn pair_backward(
        &self,
        split: usize,
        q: &[f64],
        k: &[f64],
        cot: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<C64>)> {
        let (nq, nk) = self.pair_layout(split)?;
        let lq = self.check_rows(q.len(), nq, "query block")?;
        let lk = self.check_rows(k.len(), nk, "key block")?;
        if cot.len() != lq * lk {
            return Err(Error::Shape(format!(
                "cotangent of length {} for {lq}x{lk} pairs",
                cot.len()
            )));
        }
        let n = self.circuit.n_qubits();
        let d = self.dim;
        let (dq, dk) = (1 << split, 1 << (n - split));
        let m = &self.observables[0];
        let qs = self.side_states(0..split, q, nq, 0);
        let ks = self.side_states(split..n, k, nk, nq);
        let bs = self.key_contractions(&ks, dq, dk);

        let mut gq = vec![0.0; q.len()];
        let mut x = vec![0.0; self.circuit.n_inputs()];
        let q_occ = self.input_occurrences(0..split);
        for i in 0..lq {
            let mut a = vec![ZERO; dq * dq];
            for (j, b) in bs.iter().enumerate() {
                let c = cot[i * lk + j];
                if c != 0.0 {
                    for (av, bv) in a.iter_mut().zip(b) {
                        *av += bv * c;
                    }
                }
            }
            x[..nq].copy_from_slice(&q[i * nq..(i + 1) * nq]);
            for &(_, op, idx) in &q_occ {
                let plus = self.product_state(0..split, &x, Some((op, FRAC_PI_2)));
                let minus = self.product_state(0..split, &x, Some((op, -FRAC_PI_2)));
                gq[i * nq + idx] += 0.5 * (quad(&a, &plus) - quad(&a, &minus));
            }
        }

        let mut gk = vec![0.0; k.len()];
        let mut x = vec![0.0; self.circuit.n_inputs()];
        let k_occ = self.input_occurrences(split..n);
        for j in 0..lk {
            let mut cq = vec![ZERO; dq * dq];
            for (i, qi) in qs.iter().enumerate() {
                let c = cot[i * lk + j];
                if c != 0.0 {
                    for a in 0..dq {
                        let left = qi[a].conj() * c;
                        for b in 0..dq {
                            cq[a * dq + b] += left * qi[b];
                        }
                    }
                }
            }
            let mut keff = vec![ZERO; dk * dk];
            for a in 0..dq {
                for b in 0..dq {
                    let w = cq[a * dq + b];
                    if w == ZERO {
                        continue;
                    }
                    for c in 0..dk {
                        let row = (a * dk + c) * d + b * dk;
                        for e in 0..dk {
                            keff[c * dk + e] += w * m[row + e];
                        }
                    }
                }
            }
            x[nq..].copy_from_slice(&k[j * nk..(j + 1) * nk]);
            for &(_, op, idx) in &k_occ {
                let plus = self.product_state(split..n, &x, Some((op, FRAC_PI_2)));
                let minus = self.product_state(split..n, &x, Some((op, -FRAC_PI_2)));
                gk[j * nk + idx - nq] += 0.5 * (quad(&keff, &plus) - quad(&keff, &minus));
            }
        }

        let mut rho = vec![ZERO; d * d];
        for (i, qi) in qs.iter().enumerate() {
            let mut kt = vec![ZERO; dk * dk];
            for (j, kj) in ks.iter().enumerate() {
                let c = cot[i * lk + j];
                if c != 0.0 {
                    add_outer(&mut kt, kj, c);
                }
            }
            for a in 0..dq {
                for b in 0..dq {
                    let qab = qi[a] * qi[b].conj();
                    for c in 0..dk {
                        let base = (a * dk + c) * d + b * dk;
                        for e in 0..dk {
                            rho[base + e] += qab * kt[c * dk + e];
                        }
                    }
                }
            }
        }
        Ok((gq, gk, rho))
    }
}
