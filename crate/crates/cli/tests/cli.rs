use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_lapcomplete");

const TINY: &str = r#"
seed = 11
[data]
samples = 10
partial_points = 48
complete_points = 128
[model]
input_points = 48
output_points = 64
control_points = 16
[model.gen]
depth = 2
c0 = 8
d_mid = 16
feature_dim = 16
[model.deform]
k = 4
group_size = 4
feature_widths = [8]
gcn_layers = 2
hidden = 16
[train]
epochs = 2
phase_switch = 1
batch_size = 4
[eval]
runs = 2
split = "train"
"#;

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("LAPCOMPLETE_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stdout:\n{}\nstderr:\n{}", stdout(o), String::from_utf8_lossy(&o.stderr));
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in walk(dir) {
        out.push((entry.strip_prefix(dir).unwrap().display().to_string(), fs::read(&entry).unwrap()));
    }
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut files = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files.extend(walk(&p));
        } else {
            files.push(p);
        }
    }
    files
}

fn tiny_setup() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("tiny.toml"), TINY).unwrap();
    tmp
}

#[test]
fn gen_data_is_deterministic_and_seed_sensitive() {
    let tmp = tiny_setup();
    let p = tmp.path();
    ok(&run(&["gen-data", "--config", "tiny.toml", "--data-dir", "a"], p));
    ok(&run(&["gen-data", "--config", "tiny.toml", "--data_dir", "b"], p));
    assert_eq!(dir_contents(&p.join("a")), dir_contents(&p.join("b")));
    assert!(p.join("a/manifest.json").exists());

    let o = Command::new(BIN)
        .args(["gen-data", "--config", "tiny.toml", "--data-dir", "c"])
        .current_dir(p)
        .env("LAPCOMPLETE_SEED", "12")
        .output()
        .unwrap();
    ok(&o);
    assert_ne!(dir_contents(&p.join("a")), dir_contents(&p.join("c")));
}

#[test]
fn zero_samples_is_an_error() {
    let tmp = tiny_setup();
    let o = run(&["gen-data", "--config", "tiny.toml", "--samples", "0"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn default_complete_clouds_have_2048_points() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&run(&["gen-data", "--samples", "5"], tmp.path()));
    let text = fs::read_to_string(tmp.path().join("data/clouds/00000_complete.xyz")).unwrap();
    assert_eq!(text.lines().count(), 2048);
}

#[test]
fn train_eval_complete_round_trip() {
    let tmp = tiny_setup();
    let p = tmp.path();
    ok(&run(&["gen-data", "--config", "tiny.toml"], p));
    ok(&run(&["train", "--config", "tiny.toml"], p));
    let log = fs::read_to_string(p.join("run/log.jsonl")).unwrap();
    let rows: Vec<&str> = log.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].contains("\"lambda\":0.0") && rows[3].contains("\"lambda\":3.0"));
    for key in ["epoch", "step", "cd_intermediate", "cd_final", "match", "shape", "total"] {
        assert!(rows[0].contains(&format!("\"{key}\"")), "{key}");
    }
    assert!(p.join("run/best.ckpt").exists() && p.join("run/last.ckpt").exists());

    // Training twice gives the same log.
    ok(&run(&["train", "--config", "tiny.toml", "--run-dir", "run2"], p));
    assert_eq!(log, fs::read_to_string(p.join("run2/log.jsonl")).unwrap());

    let o = run(&["eval", "--config", "tiny.toml"], p);
    ok(&o);
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.starts_with("average")), "{out}");

    // Input size need not match the training input size.
    let partial = fs::read_to_string(p.join("data/clouds/00000_partial.xyz")).unwrap();
    let fewer: String = partial.lines().take(24).map(|l| format!("{l}\n")).collect();
    fs::write(p.join("in.xyz"), fewer).unwrap();
    ok(&run(&["complete", "--config", "tiny.toml", "--input", "in.xyz", "--output", "out.xyz"], p));
    assert_eq!(fs::read_to_string(p.join("out.xyz")).unwrap().lines().count(), 64);
    assert!(!p.join("out.intermediate.xyz").exists());
    ok(&run(
        &["complete", "--config", "tiny.toml", "--input", "in.xyz", "--output", "full.xyz", "--emit-intermediate"],
        p,
    ));
    let mask = fs::read_to_string(p.join("full.mask.txt")).unwrap();
    assert_eq!(mask.lines().filter(|l| *l == "1").count(), 16);
    assert_eq!(fs::read_to_string(p.join("full.intermediate.xyz")).unwrap().lines().count(), 48);
    assert_eq!(fs::read(p.join("full.xyz")).unwrap(), fs::read(p.join("out.xyz")).unwrap());

    fs::write(p.join("bad.xyz"), "1 2\n").unwrap();
    let o = run(&["complete", "--config", "tiny.toml", "--input", "bad.xyz", "--output", "x.xyz"], p);
    assert_eq!(o.status.code(), Some(3));
}

fn read_points(path: &Path) -> Vec<[f64; 3]> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let v: Vec<f64> = l.split_whitespace().map(|f| f.parse().unwrap()).collect();
            [v[0], v[1], v[2]]
        })
        .collect()
}

#[test]
fn deform_lsq_cases() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    // Stretching a uniform chain keeps the free middle point at the midpoint.
    fs::write(p.join("chain.xyz"), "0 0 0\n1 0 0\n2 0 0\n").unwrap();
    fs::write(p.join("ends.txt"), "0 0 0 0\n# far end\n2 4 0 0\n").unwrap();
    ok(&run(
        &["deform-lsq", "--input", "chain.xyz", "--controls", "ends.txt", "--output", "o.xyz", "--k", "2"],
        p,
    ));
    let out = read_points(&p.join("o.xyz"));
    assert!((out[1][0] - 2.0).abs() < 1e-9 && out[1][1].abs() < 1e-12, "{out:?}");

    // Every point controlled at its own position reproduces the input.
    let cloud = "0 0 0\n1 0 0\n0 1 0\n0 0 1\n1 1 0\n";
    fs::write(p.join("c.xyz"), cloud).unwrap();
    let controls: String = cloud.lines().enumerate().map(|(i, l)| format!("{i} {l}\n")).collect();
    fs::write(p.join("all.txt"), controls).unwrap();
    ok(&run(&["deform-lsq", "--input", "c.xyz", "--controls", "all.txt", "--output", "c2.xyz", "--k", "3"], p));
    let a = read_points(&p.join("c.xyz"));
    let b = read_points(&p.join("c2.xyz"));
    for (x, y) in a.iter().zip(&b) {
        for d in 0..3 {
            assert!((x[d] - y[d]).abs() < 1e-9);
        }
    }

    let o = run(&["deform-lsq", "--input", "c.xyz", "--output", "x.xyz"], p);
    assert_eq!(o.status.code(), Some(1));
    fs::write(p.join("none.txt"), "").unwrap();
    let o = run(&["deform-lsq", "--input", "c.xyz", "--controls", "none.txt", "--output", "x.xyz"], p);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_report_and_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck"], tmp.path());
    ok(&o);
    let out = stdout(&o);
    let blocks: Vec<&str> = out.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).collect();
    assert_eq!(blocks.len(), 9, "{out}");
    assert!(blocks.iter().all(|l| l.starts_with("PASS")));
    let o = run(&["gradcheck", "--tolerance", "0"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["gen-data", "--no-such-field", "1"], tmp.path()).status.code(), Some(1));
    assert_eq!(run(&["gen-data", "--input_points", "5"], tmp.path()).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"], tmp.path()).status.code(), Some(1));
    assert_eq!(run(&["eval", "--checkpoint", "missing.ckpt"], tmp.path()).status.code(), Some(3));
}
