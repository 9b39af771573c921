//! Shared building blocks: parameter initialization, affine maps, layer norm
//! with gain and bias, dropout and positional encodings.

use std::cell::RefCell;
use std::f64::consts::PI;

use rand::Rng;

use crate::autodiff::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::par::Execution;
use crate::rng::StreamRng;

/// Training mode draws dropout masks from the given stream; evaluation mode
/// is deterministic.
#[derive(Clone, Copy)]
pub enum Mode<'r> {
    Eval,
    Train(&'r RefCell<StreamRng>),
}

/// Everything a forward pass needs besides the input.
#[derive(Clone, Copy)]
pub(crate) struct Ctx<'a> {
    pub tape: &'a Tape,
    pub bound: &'a Bound,
    pub mode: Mode<'a>,
    pub exec: Execution,
}

impl Ctx<'_> {
    pub fn p(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }

    /// Inverted dropout: keep each entry with probability `1 - rate` and
    /// rescale survivors by `1 / (1 - rate)`.
    pub fn dropout(&self, x: Var, rate: f64) -> Result<Var> {
        let Mode::Train(rng) = self.mode else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let shape = self.tape.shape(x);
        let n: usize = shape.iter().product();
        let keep = 1.0 - rate;
        let mut rng = rng.borrow_mut();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let m = self.tape.constant(Tensor::new(&shape, mask)?);
        self.tape.mul(x, m)
    }
}

/// Xavier-uniform `[fan_in, fan_out]` matrix.
pub(crate) fn xavier(rng: &mut StreamRng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-a..=a))
        .collect();
    Tensor::new(&[fan_in, fan_out], data).expect("shape matches data")
}

/// Circuit parameters uniform on `[-pi, pi]`.
pub(crate) fn quantum_init(rng: &mut StreamRng, n: usize) -> Tensor {
    Tensor::vector((0..n).map(|_| rng.random_range(-PI..=PI)).collect())
}

/// `y = x W (+ b)` over the last axis.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut StreamRng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), xavier(rng, fan_in, fan_out));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])));
        Self { w, b }
    }

    pub fn forward(&self, cx: &Ctx<'_>, x: Var) -> Result<Var> {
        let y = cx.tape.matmul(x, cx.p(self.w))?;
        match self.b {
            Some(b) => cx.tape.add(y, cx.p(b)),
            None => Ok(y),
        }
    }
}

/// Layer normalization with learned gain (init 1) and bias (init 0).
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[width], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, cx: &Ctx<'_>, x: Var) -> Result<Var> {
        let n = cx.tape.layer_norm(x)?;
        let g = cx.tape.mul(n, cx.p(self.gain))?;
        cx.tape.add(g, cx.p(self.bias))
    }
}

/// Fixed sinusoidal position table `[len, width]`.
pub(crate) fn sinusoidal(len: usize, width: usize) -> Tensor {
    let mut data = vec![0.0; len * width];
    for pos in 0..len {
        for i in 0..width {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
            let a = pos as f64 / rate;
            data[pos * width + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::new(&[len, width], data).expect("shape matches data")
}

/// Row `t` of a `[B, L, H]` sequence as `[B, H]`.
pub(crate) fn time_step(tape: &Tape, x: Var, t: usize) -> Result<Var> {
    let s = tape.shape(x);
    let step = tape.slice(x, 1, t, t + 1)?;
    tape.reshape(step, &[s[0], s[2]])
}

/// Stack `[B, H]` steps into `[B, L, H]`.
pub(crate) fn stack_steps(tape: &Tape, steps: &[Var]) -> Result<Var> {
    let s = tape.shape(steps[0]);
    let parts: Vec<Var> = steps
        .iter()
        .map(|&v| tape.reshape(v, &[s[0], 1, s[1]]))
        .collect::<Result<_>>()?;
    tape.concat(&parts, 1)
}

/// Last position of a `[B, L, H]` sequence.
pub(crate) fn last_step(tape: &Tape, x: Var) -> Result<Var> {
    let l = tape.shape(x)[1];
    time_step(tape, x, l - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    #[test]
    fn xavier_bounds_and_positions() {
        let mut rng = SeedTree::new(1).stream("t");
        let w = xavier(&mut rng, 30, 10);
        let a = (6.0f64 / 40.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= a));
        let pe = sinusoidal(3, 4);
        assert_eq!(&pe.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.data()[4] - 1f64.sin()).abs() < 1e-15);
        assert!((pe.data()[6] - (1.0 / 100.0f64).sin()).abs() < 1e-15);
    }

    #[test]
    fn dropout_only_in_training() {
        let tape = Tape::new();
        let store = ParamStore::new();
        let bound = store.bind(&tape);
        let x = tape.constant(Tensor::full(&[1000], 1.0));
        let eval = Ctx {
            tape: &tape,
            bound: &bound,
            mode: Mode::Eval,
            exec: Execution::Sequential,
        };
        assert_eq!(eval.dropout(x, 0.5).unwrap(), x);
        let rng = RefCell::new(SeedTree::new(2).stream("d"));
        let train = Ctx {
            mode: Mode::Train(&rng),
            ..eval
        };
        let y = tape.value(train.dropout(x, 0.1).unwrap());
        let zeros = y.data().iter().filter(|v| **v == 0.0).count();
        assert!((50..150).contains(&zeros), "{zeros}");
        assert!(y
            .data()
            .iter()
            .all(|v| *v == 0.0 || (*v - 1.0 / 0.9).abs() < 1e-15));
    }
}
