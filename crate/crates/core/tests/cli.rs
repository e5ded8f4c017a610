use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_worldsplat"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &[&str] = &[
    "--set",
    "synth.count=1",
    "--set",
    "synth.n_static=200",
    "--set",
    "decoder.steps=4",
    "--set",
    "decoder.checkpoint_every=0",
];

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["no-such-command"],
        vec!["infer", "--no-such-flag"],
        vec!["--set", "no.such.key=1", "infer"],
        vec!["--set", "synth.count=many", "gen-synth"],
        vec!["render", "--dy", "nan"],
        vec![],
    ] {
        let o = run_in(dir.path(), &args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(!stderr(&o).is_empty());
    }
    let o = bin().current_dir(dir.path()).env("WORLDSPLAT_THREADS", "zero").arg("selftest").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["--set", "decoder.checkpoint=nowhere/dec.gdec", "infer"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error[missing]:"), "{err}");
    assert!(err.contains("nowhere/dec.gdec"), "{err}");
}

#[test]
fn missing_config_file_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["--config", "absent.cfg", "selftest"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("absent.cfg"));
}

#[test]
fn printed_config_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["--set", "infer.dy=1,-3", "--set", "seed=9", "--print-config"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("infer.dy = 1,-3"));
    std::fs::write(dir.path().join("run.cfg"), &text).unwrap();
    let again = run_in(dir.path(), &["--config", "run.cfg", "--print-config"]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin().current_dir(dir.path()).env("WORLDSPLAT_THREADS", "1").arg("selftest").output().unwrap();
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{out}{}", stderr(&o));
    assert!(out.lines().count() >= 8 && out.lines().all(|l| l.starts_with("PASS ")), "{out}");
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn render_at_zero_offset_matches_the_original_track() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["gen-synth", "train-decoder"] {
        let o = run_in(dir.path(), &[TINY, &[cmd]].concat());
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    let o = run_in(dir.path(), &[TINY, &["render", "--dy", "0,-2"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let root = dir.path().join("out/render/scene_000");
    let original = files(&root.join("original"));
    assert!(!original.is_empty());
    assert_eq!(files(&root.join("dy_+0.00")), original);
    assert_ne!(files(&root.join("dy_-2.00")), original);

    let truth = dir.path().join("data/scenes/scene_000");
    let o = run_in(
        dir.path(),
        &[TINY, &["metrics", "--pred", root.join("original").to_str().unwrap(), "--truth", truth.to_str().unwrap()]].concat(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("psnr_mean="));
    assert!(dir.path().join("out/metrics.csv").is_file());
}
