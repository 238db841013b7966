//! Drives the `mlat` binary on tiny configs.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[corpus]
samples = 24
heldout_every = 4
[vae_stage]
steps = 6
batch = 4
[lra_stage]
steps = 4
batch = 4
[flow_stage]
steps = 4
batch = 4
[eval]
samples_per_class = 2
lra_sample_steps = 3
[generator.flow]
steps = 3
"#;

fn mlat(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlat")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = mlat(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn setup(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), format!("{TINY}{extra}")).unwrap();
    dir
}

fn data_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().skip(2).map(str::to_string).collect()
}

#[test]
fn corpus_is_deterministic_and_split_by_class() {
    let dir = setup("");
    let d = dir.path();
    ok(d, &["--config", "tiny.toml", "--out", "a", "gen-corpus"]);
    ok(d, &["--config", "tiny.toml", "--out", "b", "gen-corpus"]);
    let manifest = fs::read_to_string(d.join("a/corpus/manifest.csv")).unwrap();
    assert_eq!(manifest, fs::read_to_string(d.join("b/corpus/manifest.csv")).unwrap());
    let rows: Vec<&str> = manifest.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 24);
    for class in ["walk", "wave", "squat"] {
        assert_eq!(rows.iter().filter(|r| r.contains(class)).count(), 8, "{class}");
        for e in fs::read_dir(d.join("a/corpus").join(class)).unwrap() {
            let p = e.unwrap().path();
            let q = d.join("b/corpus").join(class).join(p.file_name().unwrap());
            assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
        }
    }
}

#[test]
fn stage_prerequisites_and_config_errors() {
    let dir = setup("");
    let d = dir.path();
    let o = mlat(d, &["--config", "tiny.toml", "--out", "r", "train", "--stage", "flow"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--stage lra"));

    let o = mlat(d, &["--config", "tiny.toml", "--out", "r", "train", "--stage", "vae"]);
    assert_eq!(o.status.code(), Some(3), "vae needs a corpus");

    fs::write(d.join("bad.toml"), "[vae_stage]\nstepz = 3\n").unwrap();
    assert_eq!(mlat(d, &["--config", "bad.toml", "gen-corpus"]).status.code(), Some(2));
    fs::write(d.join("old.toml"), "schema_version = 9\n").unwrap();
    assert_eq!(mlat(d, &["--config", "old.toml", "gen-corpus"]).status.code(), Some(2));
    fs::write(d.join("small.toml"), "[corpus]\nsamples = 12\n").unwrap();
    assert_eq!(mlat(d, &["--config", "small.toml", "gen-corpus"]).status.code(), Some(2));

    let o = Command::new(env!("CARGO_BIN_EXE_mlat")).current_dir(d).env("MLAT_THREADS", "zero").args(["config"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    // constant learning rate so the schedule does not depend on the budget
    let constant = "[vae_stage]\nwarmup = 0\nfinal_lr_fraction = 1.0\n";
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = |steps: u64| TINY.replace("[vae_stage]\nsteps = 6", &format!("{constant}steps = {steps}"));
    fs::write(d.join("short.toml"), cfg(3)).unwrap();
    fs::write(d.join("long.toml"), cfg(6)).unwrap();

    ok(d, &["--config", "long.toml", "--out", "straight", "gen-corpus"]);
    ok(d, &["--config", "long.toml", "--out", "straight", "train", "--stage", "vae"]);
    ok(d, &["--config", "short.toml", "--out", "resumed", "gen-corpus"]);
    ok(d, &["--config", "short.toml", "--out", "resumed", "train", "--stage", "vae"]);
    let first = data_rows(&d.join("resumed/vae_loss.csv"));
    assert_eq!(first.len(), 3);
    let out = ok(d, &["--config", "long.toml", "--out", "resumed", "train", "--stage", "vae", "--resume", "resumed/vae.ckpt"]);
    assert!(out.contains("steps 3..6"), "{out}");

    let straight = data_rows(&d.join("straight/vae_loss.csv"));
    let resumed = data_rows(&d.join("resumed/vae_loss.csv"));
    let steps: Vec<&str> = resumed.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["0", "1", "2", "3", "4", "5"]);
    assert_eq!(straight, resumed);
}

#[test]
fn full_tiny_pipeline_is_reproducible() {
    let dir = setup("");
    let d = dir.path();
    ok(d, &["--config", "tiny.toml", "--out", "one", "run"]);
    ok(d, &["--config", "tiny.toml", "--out", "two", "run"]);
    let a = fs::read_to_string(d.join("one/metrics.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(d.join("two/metrics.csv")).unwrap());
    let hash_line = a.lines().next().unwrap().to_string();
    assert!(hash_line.starts_with("# config_hash="));
    for f in ["vae_loss.csv", "lra_loss.csv", "flow_loss.csv", "vae_recon.csv", "flow_metrics.csv", "corpus/manifest.csv"] {
        assert!(fs::read_to_string(d.join("one").join(f)).unwrap().contains(&hash_line[2..]), "{f}");
    }
    let rows = data_rows(&d.join("one/flow_loss.csv"));
    assert_eq!(rows.len(), 4);

    // sampling
    ok(d, &["--config", "tiny.toml", "--out", "one", "sample", "--count", "4", "--class", "wave"]);
    let m1 = fs::read_to_string(d.join("one/samples/manifest.csv")).unwrap();
    let first = fs::read(d.join("one/samples/0000_wave.m269")).unwrap();
    ok(d, &["--config", "tiny.toml", "--out", "one", "sample", "--count", "4", "--class", "wave"]);
    assert_eq!(m1, fs::read_to_string(d.join("one/samples/manifest.csv")).unwrap());
    assert_eq!(first, fs::read(d.join("one/samples/0000_wave.m269")).unwrap());
    let entries: Vec<&str> = m1.lines().filter(|l| l.ends_with(",wave")).collect();
    assert_eq!(entries.len(), 4);
    ok(d, &["--config", "tiny.toml", "--out", "one", "--seed", "99", "sample", "--count", "3"]);
    let m2 = fs::read_to_string(d.join("one/samples/manifest.csv")).unwrap();
    for c in ["walk", "wave", "squat"] {
        assert!(m2.contains(&format!(",{c}")));
    }
}

#[test]
fn eval_of_identical_directories_is_zero_and_pairing_is_checked() {
    let dir = setup("");
    let d = dir.path();
    ok(d, &["--config", "tiny.toml", "--out", "r", "gen-corpus"]);
    ok(d, &["--config", "tiny.toml", "--out", "e", "eval", "--pred", "r/corpus", "--gt", "r/corpus"]);
    let csv = fs::read_to_string(d.join("e/eval.csv")).unwrap();
    for metric in ["mpjpe", "pa_mpjpe", "ape", "ave", "ade", "fde"] {
        let row = csv.lines().find(|l| l.starts_with(&format!("{metric},"))).unwrap();
        let v: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
        assert!(v.abs() < 1e-9, "{row}");
    }
    ok(d, &["--config", "tiny.toml", "--out", "e", "eval", "--pred", "r/corpus", "--gt", "r/corpus"]);
    assert_eq!(csv, fs::read_to_string(d.join("e/eval.csv")).unwrap());
    assert!(d.join("e/eval_cdf.csv").is_file() && d.join("e/eval_spectrum.csv").is_file());

    fs::create_dir_all(d.join("p/walk")).unwrap();
    let src = fs::read_dir(d.join("r/corpus/walk")).unwrap().next().unwrap().unwrap().path();
    fs::copy(&src, d.join("p/walk/extra_0.m269")).unwrap();
    let o = mlat(d, &["--config", "tiny.toml", "--out", "e", "eval", "--pred", "p", "--gt", "r/corpus"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no counterpart"));
}

#[test]
fn mask_command_prints_layout() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["mask", "--layout", "text:2,motion:2"]);
    assert_eq!(out, "1...\n11..\n1111\n1111\n");
    assert_eq!(mlat(dir.path(), &["mask", "--layout", "audio:2"]).status.code(), Some(2));
}
