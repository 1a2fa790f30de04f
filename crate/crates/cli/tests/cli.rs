use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tformer_lab::ExperimentConfig;

const TINY: &str = r#"
task = "planted"
seed = 5
n = 8
t_f = 2
d = 8
num_options = 4
train_size = 16
val_size = 8
test_size = 8
model = "tformer"
k = 2
heads = 2
ffn_dim = 16
reasoner_layers = 1
reasoner_heads = 2
batch_size = 2
epochs = 3
iters_per_epoch = 2
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("exp.toml");
    fs::write(&p, text).unwrap();
    p
}

fn lab(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tformer-lab"));
    c.args(args).env_remove("TFORMER_LAB_THREADS");
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().unwrap()
}

fn run_ok(args: &[&str]) -> String {
    let out = lab(args, &[]);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_checksum_follows_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    let first = run_ok(&["gen", "--config", path(&cfg), "--out", path(&a)]);
    let again = run_ok(&["gen", "--config", path(&cfg), "--out", path(&b)]);
    let other = run_ok(&["gen", "--config", path(&cfg), "--out", path(&c), "--seed", "6"]);
    assert!(first.starts_with("checksum "));
    assert_eq!(first, again);
    assert_ne!(first, other);
    assert!(a.join("dataset.bin").exists());

    let echoed = ExperimentConfig::load(&c.join("config.toml")).unwrap();
    assert_eq!(echoed.seed, 6);
    assert_eq!(echoed.out.as_deref(), Some(c.as_path()));
}

#[test]
fn config_errors_exit_two_with_a_name() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    for (text, needle) in [
        (TINY.replace("k = 2\n", ""), "`k`"),
        (format!("{TINY}colour = \"red\"\n"), "colour"),
        (TINY.replace("model = \"tformer\"", "model = \"rnn\""), "rnn"),
    ] {
        let cfg = write_config(tmp.path(), &text);
        let o = lab(&["gen", "--config", path(&cfg), "--out", path(&out)], &[]);
        assert_eq!(o.status.code(), Some(2));
        assert!(String::from_utf8_lossy(&o.stderr).contains(needle), "{needle}");
    }
    let cfg = write_config(tmp.path(), TINY);
    let o = lab(&["gen", "--config", path(&cfg)], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("output directory"));
}

#[test]
fn train_smoke_for_three_kinds_and_bitwise_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    for model in ["tformer", "meanpool", "blind"] {
        let cfg = write_config(tmp.path(), &TINY.replace("\"tformer\"", &format!("\"{model}\"")));
        let (a, b) = (tmp.path().join(format!("{model}_a")), tmp.path().join(format!("{model}_b")));
        let line = run_ok(&["train", "--config", path(&cfg), "--out", path(&a)]);
        assert!(line.starts_with("best epoch"), "{line}");
        run_ok(&["train", "--config", path(&cfg), "--out", path(&b)]);
        let csv = fs::read(a.join("metrics.csv")).unwrap();
        assert_eq!(csv, fs::read(b.join("metrics.csv")).unwrap());
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1 + 3);
        for e in 1..=3 {
            assert!(a.join(format!("checkpoints/epoch_{e}.ckpt")).exists());
        }
        assert!(fs::read_to_string(a.join("train.log")).unwrap().contains("seconds="));

        let eval = run_ok(&["eval", "--config", path(&cfg), "--out", path(&a)]);
        assert!(eval.starts_with("split,overall,per_kind\ntest,"), "{eval}");
    }
}

#[test]
fn ablate_rows_and_unknown_axis() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &TINY.replace("epochs = 3", "epochs = 3\nwarmup_epochs = 1"));
    let out = tmp.path().join("sweep");
    let csv = run_ok(&["ablate", "--config", path(&cfg), "--out", path(&out), "--axis", "strategy"]);
    let settings: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(csv.lines().next().unwrap(), "setting,overall,per_kind,params_trained");
    assert_eq!(settings, vec!["kmeans", "kmedoids", "random", "uniform"]);
    assert!(!csv.contains("seconds"));
    assert!(fs::read_to_string(out.join("ablate_strategy.log")).unwrap().contains("seconds="));

    let ratio = run_ok(&["ablate", "--config", path(&cfg), "--out", path(&out), "--axis", "ratio"]);
    assert_eq!(ratio.lines().count(), 1 + 9);

    let threaded = lab(
        &["ablate", "--config", path(&cfg), "--out", path(&tmp.path().join("t2")), "--axis", "strategy"],
        &[("TFORMER_LAB_THREADS", "2")],
    );
    assert!(threaded.status.success());
    assert_eq!(String::from_utf8(threaded.stdout).unwrap(), csv);

    let bad = lab(&["ablate", "--config", path(&cfg), "--out", path(&out), "--axis", "depth"], &[]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("strategy, layers, heads, ratio, init, module, ffn"));

    let env = lab(
        &["ablate", "--config", path(&cfg), "--out", path(&out), "--axis", "init"],
        &[("TFORMER_LAB_THREADS", "zero")],
    );
    assert_eq!(env.status.code(), Some(2));
}

#[test]
fn attnmap_exports_normalized_maps() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("run");
    run_ok(&["train", "--config", path(&cfg), "--out", path(&out)]);
    let report = run_ok(&["attnmap", "--config", path(&cfg), "--out", path(&out), "--samples", "0,3", "--epochs", "1,3"]);
    assert_eq!(report.lines().count(), 4);

    let attn = out.join("attn");
    let csv = fs::read_to_string(attn.join("sample3_epoch1.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv.lines().map(|l| l.split(',').map(|c| c.parse().unwrap()).collect()).collect();
    for r in &rows {
        assert_eq!(r.len(), 8);
        assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
    let pgm = fs::read(attn.join("sample3_epoch1.pgm")).unwrap();
    let header = format!("P5\n8 {}\n255\n", rows.len());
    assert!(pgm.starts_with(header.as_bytes()));
    assert_eq!(pgm.len(), header.len() + 8 * rows.len());
    let range: serde_json::Value = serde_json::from_str(&fs::read_to_string(attn.join("sample3_epoch1.json")).unwrap()).unwrap();
    assert!(range["min"].as_f64().unwrap() <= range["max"].as_f64().unwrap());

    let missing = lab(&["attnmap", "--config", path(&cfg), "--out", path(&out), "--epochs", "7"], &[]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("epoch_7.ckpt"));
}
