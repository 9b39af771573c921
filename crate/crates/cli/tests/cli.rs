use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_sectorq");

const SMALL: &str = r#"
seed = 1
top_n = 2

[data.synth]
sectors = 4
days = 160
seed = 3
regime = "gbm"

[split]
train_fraction = 0.75

[backbone]
kind = "mlp"
hidden = 8

[ppo]
epochs = 2
batch_size = 16
ppo_epochs = 2
"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let cfg = dir.join("exp.toml");
    std::fs::write(&cfg, text).unwrap();
    cfg
}

fn trained(dir: &Path) -> std::path::PathBuf {
    let cfg = write_config(dir, SMALL);
    let o = run(&["train", "--config", p(&cfg), "--out", p(dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    cfg
}

#[test]
fn train_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let o = run(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["model.ckpt", "rewards.csv", "resolved.cfg"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let curve = std::fs::read_to_string(out.join("rewards.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);
    assert!(stdout(&o).contains("final_reward="));
    assert_eq!(stderr(&o).matches("episode ").count(), 2);
}

#[test]
fn flags_override_config_and_are_logged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = run(&[
        "train",
        "--config",
        p(&cfg),
        "--out",
        p(dir.path()),
        "--seed",
        "9",
        "--epochs",
        "1",
        "--top-n",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(
        err.contains("flag --seed = 9 overrides config value 1"),
        "{err}"
    );
    assert!(
        err.contains("flag --epochs = 1 overrides config value 2"),
        "{err}"
    );
    assert!(
        err.contains("flag --top-n = 1 overrides config value 2"),
        "{err}"
    );
    let resolved = std::fs::read_to_string(dir.path().join("resolved.cfg")).unwrap();
    assert!(resolved.contains("seed = 9"));
    let curve = std::fs::read_to_string(dir.path().join("rewards.csv")).unwrap();
    assert_eq!(curve.lines().count(), 2);
}

#[test]
fn input_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let o = run(&["train", "--data", p(&missing), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("does not exist"));

    let cfg = write_config(dir.path(), &format!("{SMALL}\n[extra]\nkey = 1\n"));
    let o = run(&["train", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = run(&["train", "--config", p(&dir.path().join("absent.toml"))]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["train", "--model", "cnn"]);
    assert_eq!(o.status.code(), Some(2));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "date,sector_id,close,cap_share\n2020-01-01,A,x,0.5\n").unwrap();
    let o = run(&[
        "features-dump",
        "--data",
        p(&bad),
        "--out",
        p(&dir.path().join("f.csv")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn backtest_writes_metrics_and_curve() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let o = run(&["backtest", "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.txt")).unwrap();
    let keys: Vec<&str> = metrics
        .lines()
        .map(|l| l.split('=').next().unwrap())
        .collect();
    assert_eq!(
        keys,
        [
            "cumulative_return",
            "annualized_return",
            "annualized_volatility",
            "sharpe_ratio",
            "max_drawdown"
        ]
    );
    let days: usize = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("test days: "))
        .unwrap()
        .parse()
        .unwrap();
    let curve = std::fs::read_to_string(dir.path().join("equity.csv")).unwrap();
    assert_eq!(curve.lines().count() - 1, days);

    let first = std::fs::read(dir.path().join("equity.csv")).unwrap();
    let o = run(&["--sequential", "backtest", "--config", p(&cfg)]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(dir.path().join("equity.csv")).unwrap(), first);
    assert_eq!(
        std::fs::read_to_string(dir.path().join("metrics.txt")).unwrap(),
        metrics
    );
}

#[test]
fn backtest_rejects_wrong_kind_and_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let o = run(&["backtest", "--config", p(&cfg), "--model", "lstm"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("kind mismatch"));

    let other = dir.path().join("other");
    let o = run(&["backtest", "--config", p(&cfg), "--out", p(&other)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("does not exist"));
}

#[test]
fn compare_tabulates_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    std::fs::create_dir(&a).unwrap();
    let cfg = trained(&a);
    assert!(run(&["backtest", "--config", p(&cfg)]).status.success());
    let b = dir.path().join("b");
    std::fs::create_dir(&b).unwrap();
    trained(&b);

    let o = run(&["compare", p(&a)]);
    assert!(o.status.success());
    let table = stdout(&o);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(
        lines[0].split_whitespace().collect::<Vec<_>>(),
        ["model", "final_reward", "CR", "AR", "AV", "SR", "MDD"]
    );
    assert_eq!(lines[1].split_whitespace().count(), 7);
    assert!(lines[1].starts_with("mlp"));

    let saved = dir.path().join("table.txt");
    let o = run(&["compare", p(&a), p(&b), "--out", p(&saved)]);
    assert_eq!(o.status.code(), Some(0));
    let table = stdout(&o);
    assert_eq!(table.lines().count(), 3);
    assert!(
        table.contains("[incomplete: missing metrics.txt]"),
        "{table}"
    );
    assert_eq!(std::fs::read_to_string(&saved).unwrap(), table);
}

#[test]
fn synth_and_features_dump() {
    let dir = tempfile::tempdir().unwrap();
    let panel = dir.path().join("panel.csv");
    let o = run(&[
        "synth",
        "--sectors",
        "3",
        "--days",
        "120",
        "--regime",
        "deterministic-leader",
        "--out",
        p(&panel),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&panel).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 120);

    let feats = dir.path().join("features.csv");
    let o = run(&["features-dump", "--data", p(&panel), "--out", p(&feats)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("set [split]"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), "[split]\ntrain_fraction = 0.8\n");
    let o = run(&[
        "features-dump",
        "--config",
        p(&cfg),
        "--data",
        p(&panel),
        "--out",
        p(&feats),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dump = std::fs::read_to_string(&feats).unwrap();
    assert_eq!(dump.lines().count(), 1 + 120 - 49);

    let o = run(&["synth", "--sectors", "1", "--out", p(&panel)]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["synth", "--regime", "chaos", "--out", p(&panel)]);
    assert_eq!(o.status.code(), Some(2));
}
