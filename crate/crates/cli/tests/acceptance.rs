//! Acceptance suite: runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use sectorq::autodiff::{Tape, Tensor};
use sectorq::backbones::{ActorCritic, BackboneConfig, BackboneKind, Mode, Network};
use sectorq::backtest::{
    compute_metrics, max_drawdown, run_backtest, BacktestConfig, MetricsReport,
};
use sectorq::data::{synth_panel, Regime, SectorPanel, SynthSpec};
use sectorq::env::{
    EnvConfig, Observation, Policy, PolicyStep, SectorEnv, REWARD_HIT, REWARD_MISS,
};
use sectorq::experiment::{EQUITY_FILE, METRICS_FILE};
use sectorq::features::{build_features, FeatureConfig};
use sectorq::par::Execution;
use sectorq::ppo::{compute_gae, train, PpoConfig};
use sectorq::qsim::{param_shift_grad, Angle, Circuit, CircuitOp, Gate, Statevector};
use sectorq::rng::{SeedTree, StreamRng};

const BIN: &str = env!("CARGO_BIN_EXE_sectorq");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn rng(name: &str) -> StreamRng {
    SeedTree::new(20_240_601).stream(name)
}

// Quantum gradients

fn random_circuit(r: &mut StreamRng) -> Circuit {
    let n = 4;
    let mut ops = Vec::new();
    for w in 0..n {
        ops.push(CircuitOp::RX(w, Angle::Input(w)));
        ops.push(CircuitOp::RZ(w, Angle::Input(w)));
    }
    let mut p = 0;
    for _ in 0..2 {
        for w in 0..n {
            let a = Angle::Param(p);
            p += 1;
            ops.push(match r.random_range(0..3) {
                0 => CircuitOp::RX(w, a),
                1 => CircuitOp::RY(w, a),
                _ => CircuitOp::RZ(w, a),
            });
        }
        for _ in 0..r.random_range(1..=4) {
            let c = r.random_range(0..n);
            let t = (c + r.random_range(1..n)) % n;
            ops.push(CircuitOp::Cnot(c, t));
        }
    }
    Circuit::new(n, n, p, ops, (0..n).collect()).unwrap()
}

fn quantum_gradients() -> Outcome {
    let start = Instant::now();
    let mut r = rng("circuits");
    let h = 1e-4;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let c = random_circuit(&mut r);
        let x: Vec<f64> = (0..4).map(|_| r.random_range(-3.0..3.0)).collect();
        let th: Vec<f64> = (0..c.n_params())
            .map(|_| r.random_range(-3.0..3.0))
            .collect();
        let cot: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let f = |x: &[f64], th: &[f64]| -> f64 {
            c.expectations(x, th)
                .unwrap()
                .iter()
                .zip(&cot)
                .map(|(z, w)| z * w)
                .sum()
        };
        let (gx, gt) = param_shift_grad(&c, &x, &th, &cot).unwrap();
        for i in 0..x.len() {
            let (mut a, mut b) = (x.clone(), x.clone());
            a[i] += h;
            b[i] -= h;
            worst = worst.max((gx[i] - (f(&a, &th) - f(&b, &th)) / (2.0 * h)).abs());
        }
        for i in 0..th.len() {
            let (mut a, mut b) = (th.clone(), th.clone());
            a[i] += h;
            b[i] -= h;
            worst = worst.max((gt[i] - (f(&x, &a) - f(&x, &b)) / (2.0 * h)).abs());
        }
    }
    let t = start.elapsed();
    outcome(
        worst < 1e-5 && t < Duration::from_secs(10),
        format!(
            "100 circuits, max |shift - fd| = {worst:.2e}, {:.2}s",
            secs(t)
        ),
    )
}

// Statevector integrity

fn statevector_integrity() -> Outcome {
    let mut r = rng("statevector");
    let (mut worst_norm, mut worst_z) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = r.random_range(1..=6);
        let mut s = Statevector::zero(n).unwrap();
        for _ in 0..100 {
            let w = r.random_range(0..n);
            let a = r.random_range(-7.0..7.0);
            let two = n > 1;
            let other = if two {
                (w + r.random_range(1..n)) % n
            } else {
                0
            };
            let g = match r.random_range(0..if two { 5 } else { 3 }) {
                0 => Gate::RX(w, a),
                1 => Gate::RY(w, a),
                2 => Gate::RZ(w, a),
                3 => Gate::Cnot {
                    control: w,
                    target: other,
                },
                _ => Gate::Cry {
                    control: w,
                    target: other,
                    angle: a,
                },
            };
            s.apply(&g).unwrap();
            let norm: f64 = s.amplitudes().iter().map(|c| c.norm_sqr()).sum();
            worst_norm = worst_norm.max((norm - 1.0).abs());
        }
        for w in 0..n {
            let z = s.expect_z(w).unwrap();
            let bit = 1 << (n - 1 - w);
            let oracle: f64 = s
                .amplitudes()
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    if i & bit == 0 {
                        c.norm_sqr()
                    } else {
                        -c.norm_sqr()
                    }
                })
                .sum();
            if !(-1.0..=1.0).contains(&z) {
                worst_z = f64::INFINITY;
            }
            worst_z = worst_z.max((z - oracle).abs());
        }
    }
    outcome(
        worst_norm < 1e-12 && worst_z < 1e-12,
        format!(
            "1000 x 100 gates, max |norm - 1| = {worst_norm:.2e}, max <Z> error = {worst_z:.2e}"
        ),
    )
}

// Backbone gradients

fn flat(net: &Network) -> Vec<f64> {
    net.params()
        .tensors()
        .iter()
        .flat_map(|t| t.data().to_vec())
        .collect()
}

fn load(net: &mut Network, flat: &[f64]) {
    let ids: Vec<_> = net.params().ids().collect();
    let mut off = 0;
    for id in ids {
        let t = net.params_mut().get_mut(id);
        let n = t.numel();
        t.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
}

fn weighted_output(net: &Network, x: &Tensor, w: &Tensor, grad: bool) -> (f64, Vec<f64>) {
    let tape = Tape::new();
    let bound = net.params().bind(&tape);
    let xv = tape.constant(x.clone());
    let out = net.forward(&tape, &bound, xv, Mode::Eval).unwrap();
    let l = tape.sum(tape.mul(out, tape.constant(w.clone())).unwrap());
    let value = tape.value(l).item().unwrap();
    if !grad {
        return (value, Vec::new());
    }
    let mut g = tape.backward(l).unwrap();
    let grads = bound.gradients(net.params(), &mut g);
    (
        value,
        grads.iter().flat_map(|t| t.data().to_vec()).collect(),
    )
}

fn backbone_error(kind: BackboneKind, draw: u64) -> f64 {
    let mut r = SeedTree::new(draw).stream(kind.as_str());
    let cfg = BackboneConfig {
        hidden: 8,
        layers: 2,
        heads: 2,
        ..BackboneConfig::for_kind(kind)
    };
    let (b, l, d, out) = (2, 3, 4, 3);
    let mut net = Network::new(&cfg, l, d, out, &mut r).unwrap();
    let x = Tensor::new(
        &[b, l, d],
        (0..b * l * d).map(|_| r.random_range(-1.5..1.5)).collect(),
    )
    .unwrap();
    let w = Tensor::new(
        &[b, out],
        (0..b * out).map(|_| r.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let analytic = weighted_output(&net, &x, &w, true).1;
    let p0 = flat(&net);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..p0.len() {
        let mut p = p0.clone();
        p[i] = p0[i] + h;
        load(&mut net, &p);
        let up = weighted_output(&net, &x, &w, false).0;
        p[i] = p0[i] - h;
        load(&mut net, &p);
        let down = weighted_output(&net, &x, &w, false).0;
        let fd = (up - down) / (2.0 * h);
        let a = analytic[i];
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-3));
    }
    worst
}

fn backbone_gradients() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut worst = 0.0f64;
    for kind in BackboneKind::ALL {
        let e = (0..20)
            .map(|draw| backbone_error(kind, draw))
            .fold(0.0, f64::max);
        parts.push(format!("{kind} {e:.1e}"));
        worst = worst.max(e);
    }
    let t = start.elapsed();
    outcome(
        worst < 1e-4 && t < Duration::from_secs(120),
        format!(
            "20 draws each, max relative error: {}; {:.1}s",
            parts.join(", "),
            secs(t)
        ),
    )
}

// GAE

fn gae_oracle(r: &[f64], v: &[f64], g: f64, l: f64) -> Vec<f64> {
    let n = r.len();
    let next = |k: usize| if k + 1 < n { v[k + 1] } else { 0.0 };
    (0..n)
        .map(|t| {
            (t..n)
                .map(|k| (g * l).powi((k - t) as i32) * (r[k] + g * next(k) - v[k]))
                .sum()
        })
        .collect()
}

fn gae_equivalence() -> Outcome {
    let mut r = rng("gae");
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = r.random_range(1..=8);
        let rw: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let (g, l) = (r.random_range(0.0..=1.0), r.random_range(0.0..=1.0));
        let (adv, ret) = compute_gae(&rw, &v, g, l).unwrap();
        for (t, o) in gae_oracle(&rw, &v, g, l).into_iter().enumerate() {
            worst = worst
                .max((adv[t] - o).abs())
                .max((ret[t] - (o + v[t])).abs());
        }
    }
    outcome(
        worst < 1e-10,
        format!("1000 trajectories, max error {worst:.2e}"),
    )
}

// Rewards

/// Sectors in the top `n` by cap share on day `t`, ties to the lower index,
/// built by counting how many sectors outrank each one.
fn top_set(panel: &SectorPanel, t: usize, n: usize) -> Vec<bool> {
    let s = panel.n_sectors();
    (0..s)
        .map(|i| {
            let ci = panel.cap_share(i, t);
            let above = (0..s)
                .filter(|&j| {
                    let cj = panel.cap_share(j, t);
                    cj > ci || (cj == ci && j < i)
                })
                .count();
            above < n
        })
        .collect()
}

/// A panel whose cap shares are coarsely rounded so that ties are common.
fn tied_panel(base: &SectorPanel) -> SectorPanel {
    let s = base.n_sectors();
    let close = (0..s).flat_map(|i| base.close_series(i).to_vec()).collect();
    let share = (0..s)
        .flat_map(|i| {
            base.cap_share_series(i)
                .iter()
                .map(|c| (c * 40.0).floor() / 40.0)
                .collect::<Vec<_>>()
        })
        .collect();
    SectorPanel::new(
        base.dates().to_vec(),
        base.sector_ids().to_vec(),
        close,
        share,
    )
    .unwrap()
}

fn reward_equivalence() -> Outcome {
    let mut r = rng("rewards");
    let gbm = synth_panel(&SynthSpec {
        sectors: 12,
        days: 120,
        seed: 5,
        regime: Regime::Gbm,
    })
    .unwrap();
    let panels = [tied_panel(&gbm), gbm];
    let feats: Vec<_> = panels
        .iter()
        .map(|p| build_features(p, &FeatureConfig::default()).unwrap())
        .collect();
    let (mut mismatches, mut outside) = (0, 0);
    let draws = 10_000;
    for i in 0..draws {
        let k = i % 2;
        let panel = &panels[k];
        let s = panel.n_sectors();
        let n = r.random_range(1..=s);
        let cfg = EnvConfig {
            window: 5,
            top_n: n,
            ..EnvConfig::default()
        };
        let env = SectorEnv::new(panel, &feats[k], (0, panel.n_days() - 1), cfg).unwrap();
        let t = r.random_range(env.first_day()..=env.last_day());
        let a = r.random_range(0..=s);
        let obs = env.observe(t).unwrap();
        let got = env.step(&obs, a).unwrap().reward;
        let set = top_set(panel, t + 1, n);
        let expect = if a < s && set[a] { 1.0 } else { -0.1 };
        if got != expect {
            mismatches += 1;
        }
        if got != REWARD_HIT && got != REWARD_MISS {
            outside += 1;
        }
    }
    outcome(
        mismatches == 0 && outside == 0,
        format!("{draws} draws, {mismatches} mismatches, {outside} outside {{1, -0.1}}"),
    )
}

// Learning

struct LearningRun {
    sampled: f64,
    greedy: f64,
    seconds: f64,
}

fn learn(kind: BackboneKind, panel: &SectorPanel) -> LearningRun {
    let start = Instant::now();
    let features = build_features(panel, &FeatureConfig::default()).unwrap();
    let cfg = EnvConfig {
        window: 10,
        top_n: 1,
        ..EnvConfig::default()
    };
    let env = SectorEnv::new(panel, &features, (0, panel.n_days() - 1), cfg).unwrap();
    let seeds = SeedTree::new(1);
    let bb = BackboneConfig::for_kind(kind);
    let exec = Execution::Sequential;
    let model = ActorCritic::new(
        &bb,
        &bb,
        cfg.window,
        features.dim(),
        env.action_space().n_targets(),
        &seeds,
    )
    .unwrap()
    .with_execution(exec);
    let ppo = PpoConfig {
        gamma: 0.9,
        epochs: 200,
        ..PpoConfig::default()
    };
    let out = train(&env, model, &ppo, &seeds, exec, |_| {}).unwrap();
    let steps = sectorq::env::evaluate_episode(&env, &out.model, exec).unwrap();
    let greedy: f64 = steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let a = (0..s.probs.len()).fold(0, |b, j| if s.probs[j] > s.probs[b] { j } else { b });
            env.reward(env.first_day() + i, a).unwrap().0
        })
        .sum::<f64>()
        / steps.len() as f64;
    LearningRun {
        sampled: out.trailing_mean_reward(10),
        greedy,
        seconds: secs(start.elapsed()),
    }
}

fn learning_check() -> Outcome {
    let panel = synth_panel(&SynthSpec {
        sectors: 3,
        days: 300,
        seed: 1,
        regime: Regime::DeterministicLeader,
    })
    .unwrap();
    let features = build_features(&panel, &FeatureConfig::default()).unwrap();
    let env = SectorEnv::new(
        &panel,
        &features,
        (0, panel.n_days() - 1),
        EnvConfig {
            window: 10,
            top_n: 1,
            ..EnvConfig::default()
        },
    )
    .unwrap();
    let baseline = (env.first_day()..=env.last_day())
        .map(|t| (0..3).map(|a| env.reward(t, a).unwrap().0).sum::<f64>() / 3.0)
        .sum::<f64>()
        / env.n_steps() as f64;
    let mlp = learn(BackboneKind::Mlp, &panel);
    let qnn = learn(BackboneKind::Qnn, &panel);
    let pass = mlp.sampled >= 0.9 && qnn.sampled >= 0.7 && mlp.seconds + qnn.seconds < 300.0;
    outcome(
        pass,
        format!(
            "mlp {:.3} (greedy {:.3}, {:.0}s), qnn {:.3} (greedy {:.3}, {:.0}s), uniform baseline {baseline:.3}",
            mlp.sampled, mlp.greedy, mlp.seconds, qnn.sampled, qnn.greedy, qnn.seconds
        ),
    )
}

// Metrics

fn mdd_oracle(v: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..v.len() {
        for i in 0..=j {
            worst = worst.min(v[j] / v[i] - 1.0);
        }
    }
    worst
}

fn metric_correctness() -> Outcome {
    let a = compute_metrics(&[1.0, 1.1]).unwrap();
    let b = compute_metrics(&[100.0, 120.0, 90.0, 110.0]).unwrap();
    let fixtures = (a.cumulative_return - 0.1).abs() < 1e-12
        && (b.max_drawdown + 0.25).abs() < 1e-12
        && (b.cumulative_return - 0.1).abs() < 1e-12;
    let mut r = rng("curves");
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = r.random_range(2..200);
        let mut v = vec![r.random_range(0.5..2.0)];
        for _ in 1..n {
            let last = v[v.len() - 1];
            v.push(last * (1.0 + r.random_range(-0.05..0.05)));
        }
        worst = worst.max((max_drawdown(&v) - mdd_oracle(&v)).abs());
    }
    outcome(
        fixtures && worst < 1e-12,
        format!(
            "fixtures CR {:.12} MDD {:.12}; 1000 curves, max MDD error {worst:.2e}",
            a.cumulative_return, b.max_drawdown
        ),
    )
}

// AR/CR identity

/// Random but fixed probabilities for each observation day.
struct ScatterPolicy {
    seed: u64,
    n_targets: usize,
}

impl Policy for ScatterPolicy {
    fn n_targets(&self) -> usize {
        self.n_targets
    }

    fn evaluate(&self, batch: &[Observation<'_>]) -> sectorq::Result<Vec<PolicyStep>> {
        Ok(batch
            .iter()
            .map(|o| {
                let mut r = SeedTree::new(self.seed).index(o.t_index as u64).rng();
                let w: Vec<f64> = (0..self.n_targets).map(|_| r.random::<f64>()).collect();
                let s: f64 = w.iter().sum();
                PolicyStep {
                    probs: w.iter().map(|x| x / s).collect(),
                    value: 0.0,
                }
            })
            .collect())
    }
}

fn identity_error(m: &MetricsReport, n_returns: usize) -> f64 {
    ((1.0 + m.annualized_return).powf(n_returns as f64 / 252.0) - (1.0 + m.cumulative_return)).abs()
}

fn consistency_identity(run_dirs: &[PathBuf]) -> Outcome {
    let mut worst = 0.0f64;
    let mut count = 0;
    let panel = synth_panel(&SynthSpec {
        sectors: 10,
        days: 400,
        seed: 3,
        regime: Regime::Gbm,
    })
    .unwrap();
    let features = build_features(&panel, &FeatureConfig::default()).unwrap();
    for seed in 0..40u64 {
        let cfg = BacktestConfig {
            top_n: 1 + (seed as usize % 5),
            window: 10,
            cost_rate: if seed % 2 == 0 { 0.0 } else { 1e-3 },
        };
        let days = (200 + seed as usize, 399);
        let policy = ScatterPolicy {
            seed,
            n_targets: panel.n_sectors() + 1,
        };
        let bt =
            run_backtest(&policy, &panel, &features, days, &cfg, Execution::default()).unwrap();
        let m = compute_metrics(&bt.curve.values).unwrap();
        worst = worst.max(identity_error(&m, bt.curve.values.len() - 1));
        count += 1;
    }
    let mut missing = 0;
    for dir in run_dirs {
        let m = std::fs::read_to_string(dir.join(METRICS_FILE))
            .ok()
            .and_then(|t| MetricsReport::parse_key_values(&t).ok());
        let rows = std::fs::read_to_string(dir.join(EQUITY_FILE))
            .map(|t| t.lines().count().saturating_sub(1))
            .unwrap_or(0);
        match m {
            Some(m) if rows >= 2 => {
                worst = worst.max(identity_error(&m, rows - 1));
                count += 1;
            }
            _ => missing += 1,
        }
    }
    outcome(
        worst < 1e-12 && missing == 0,
        format!(
            "{count} backtests, max |(1+AR)^(n/252) - (1+CR)| = {worst:.2e}, {missing} unreadable"
        ),
    )
}

// CLI runs

fn sectorq(args: &[&str]) -> Result<String, String> {
    let out = Command::new(BIN)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "`sectorq {}` exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn reproducibility(root: &Path, run_dirs: &mut Vec<PathBuf>) -> Outcome {
    let cfg = root.join("repro.toml");
    std::fs::write(
        &cfg,
        "seed = 11\ntop_n = 3\n\n[data.synth]\nsectors = 6\ndays = 200\nseed = 2\nregime = \"gbm\"\n\n\
         [split]\ntrain_fraction = 0.7\n\n[backbone]\nkind = \"qasa\"\nhidden = 8\nheads = 2\n\n[ppo]\nepochs = 3\n",
    )
    .unwrap();
    let runs = ["a", "b", "c"].map(|r| root.join(r));
    let result = (|| -> Result<(bool, bool), String> {
        sectorq(&["train", "--config", p(&cfg), "--out", p(&runs[0])])?;
        sectorq(&["train", "--config", p(&cfg), "--out", p(&runs[1])])?;
        sectorq(&[
            "--sequential",
            "train",
            "--config",
            p(&cfg),
            "--out",
            p(&runs[2]),
        ])?;
        for r in &runs {
            sectorq(&["backtest", "--config", p(&cfg), "--out", p(r)])?;
        }
        let read = |d: &Path, f: &str| std::fs::read(d.join(f)).map_err(|e| e.to_string());
        let mut same = true;
        let mut same_seq = true;
        for f in ["model.ckpt", "rewards.csv"] {
            same &= read(&runs[0], f)? == read(&runs[1], f)?;
            same_seq &= read(&runs[0], f)? == read(&runs[2], f)?;
        }
        Ok((same, same_seq))
    })();
    run_dirs.extend(runs.iter().cloned());
    match result {
        Ok((same, same_seq)) => outcome(
            same && same_seq,
            format!(
                "checkpoints and reward curves identical: repeat {same}, sequential {same_seq}"
            ),
        ),
        Err(e) => outcome(false, e),
    }
}

fn end_to_end(root: &Path, run_dirs: &mut Vec<PathBuf>) -> Outcome {
    let start = Instant::now();
    let panel = root.join("gbm.csv");
    let dirs: Vec<PathBuf> = BackboneKind::COMPARED
        .iter()
        .map(|k| root.join(k.as_str()))
        .collect();
    let result = (|| -> Result<String, String> {
        sectorq(&[
            "synth",
            "--sectors",
            "47",
            "--days",
            "800",
            "--regime",
            "gbm",
            "--seed",
            "4",
            "--out",
            p(&panel),
        ])?;
        for (kind, dir) in BackboneKind::COMPARED.iter().zip(&dirs) {
            std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
            let cfg = dir.join("experiment.toml");
            std::fs::write(
                &cfg,
                format!(
                    "seed = 7\n\n[data]\npath = \"../gbm.csv\"\n\n[split]\ntrain_fraction = 0.8\n\n\
                     [backbone]\nkind = \"{kind}\"\n\n[ppo]\nepochs = 5\n"
                ),
            )
            .map_err(|e| e.to_string())?;
            let t = Instant::now();
            sectorq(&["train", "--config", p(&cfg), "--out", p(dir)])?;
            sectorq(&["backtest", "--config", p(&cfg)])?;
            eprintln!("  {kind}: train + backtest {:.0}s", secs(t.elapsed()));
        }
        let mut args = vec!["compare"];
        args.extend(dirs.iter().map(|d| p(d)));
        sectorq(&args)
    })();
    run_dirs.extend(dirs.iter().cloned());
    let t = start.elapsed();
    match result {
        Ok(table) => {
            let lines: Vec<&str> = table.lines().filter(|l| !l.trim().is_empty()).collect();
            let shaped = lines.len() == 6
                && lines.iter().all(|l| l.split_whitespace().count() == 7)
                && !table.contains("incomplete");
            for l in &lines {
                eprintln!("  | {l}");
            }
            outcome(
                shaped && t < Duration::from_secs(15 * 60),
                format!(
                    "5 backbones x 5 epochs, 5-row comparison: {shaped}, {:.0}s",
                    secs(t)
                ),
            )
        }
        Err(e) => outcome(false, e),
    }
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let mut run_dirs = Vec::new();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, o: Outcome| {
        println!(
            "[{}] criterion {n:>2} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, name, o));
    };
    record(1, "quantum gradient exactness", quantum_gradients());
    record(2, "statevector integrity", statevector_integrity());
    record(3, "backbone gradient correctness", backbone_gradients());
    record(4, "GAE oracle equivalence", gae_equivalence());
    record(5, "reward oracle equivalence", reward_equivalence());
    record(6, "learning check", learning_check());
    record(7, "metric correctness", metric_correctness());
    record(
        9,
        "reproducibility",
        reproducibility(root.path(), &mut run_dirs),
    );
    record(
        10,
        "end-to-end pipeline",
        end_to_end(root.path(), &mut run_dirs),
    );
    record(
        8,
        "AR/CR consistency identity",
        consistency_identity(&run_dirs),
    );

    results.sort_by_key(|r| r.0);
    println!("\nacceptance summary");
    for (n, name, o) in &results {
        println!("{} {n:>2} {name}", if o.pass { "PASS" } else { "FAIL" });
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!(
        "{} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
