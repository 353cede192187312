use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mmvae"))
}

fn mini() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mini")
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    let v = run(&["--version"]);
    assert_eq!(v.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&v.stdout).starts_with("mmvae "));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["bogus"]).status.code(), Some(1));
    assert_eq!(run(&["ingest"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let song = mini().join("song_01.mid");
    let out = dir.path().join("x");
    let r = run(&["render", "--input", s(&song), "--out", s(&out), "--format", "bmp"]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    assert_eq!(run(&["stats", "--data", s(&missing)]).status.code(), Some(2));
    let junk = dir.path().join("junk.mid");
    std::fs::write(&junk, b"not a midi file").unwrap();
    assert_eq!(run(&["chords", "--input", s(&junk)]).status.code(), Some(2));
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"no_such_field": 1}"#).unwrap();
    let r = run(&["--config", s(&cfg), "stats", "--data", "x"]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn ingest_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a/data.jsonl");
    let b = dir.path().join("b/data.jsonl");
    for p in [&a, &b] {
        assert!(run(&["ingest", "--input", s(&mini()), "--out", s(p), "--seed", "11"])
            .status
            .success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let stats: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("a/data.stats.json")).unwrap()).unwrap();
    assert_eq!(stats["files_seen"], 10);
    assert!(dir.path().join("a/run_config.json").exists());
}

#[test]
fn chords_of_a_pop_song() {
    let song = mini().join("song_01.mid");
    let r = run(&["chords", "--input", s(&song)]);
    assert!(r.status.success());
    let text = String::from_utf8(r.stdout).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["measure"], 0);
    assert_eq!(first["chords"].as_array().unwrap().len(), 2);
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("ds/data.jsonl");
    assert!(
        run(&["ingest", "--input", s(&mini()), "--out", s(&data), "--seed", "1"])
            .status
            .success()
    );

    let runs = d.join("run");
    let r = run(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&runs),
        "--seed",
        "2",
        "--steps",
        "6",
    ]);
    assert!(r.status.success());
    let metrics = std::fs::read_to_string(runs.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    let ckpt = runs.join("checkpoint.bin");
    assert!(ckpt.exists());

    let resumed = d.join("run2");
    let r = run(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&resumed),
        "--seed",
        "2",
        "--steps",
        "8",
        "--resume",
        s(&ckpt),
    ]);
    assert!(r.status.success());
    let resumed_metrics = std::fs::read_to_string(resumed.join("metrics.jsonl")).unwrap();
    assert_eq!(resumed_metrics.lines().count(), 2);
    let last: serde_json::Value = serde_json::from_str(resumed_metrics.lines().last().unwrap()).unwrap();
    // metrics carry the zero-based index of the update
    assert_eq!(last["step"], 7);

    let samples = d.join("samples");
    let r = run(&[
        "sample",
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&samples),
        "--seed",
        "3",
        "--count",
        "2",
        "--chords",
        "C,G",
    ]);
    assert!(r.status.success());
    assert!(samples.join("sample_00.mid").exists());
    assert_eq!(
        std::fs::read_to_string(samples.join("latents.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    let a = mini().join("song_00.mid");
    let b = mini().join("song_02.mid");
    let interp = d.join("interp");
    let r = run(&[
        "interp",
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&interp),
        "--a",
        s(&a),
        "--b",
        s(&b),
        "--steps",
        "3",
        "--seed",
        "4",
    ]);
    assert!(r.status.success());
    assert_eq!(
        std::fs::read_to_string(interp.join("interp.jsonl"))
            .unwrap()
            .lines()
            .count(),
        3
    );

    let attr = d.join("attr");
    let r = run(&[
        "attr",
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&attr),
        "--vector",
        "note_density",
        "--data",
        s(&data),
        "--seed",
        "5",
    ]);
    assert!(r.status.success());
    assert!(attr.join("note_density.vector.json").exists());
    let r = run(&[
        "attr",
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&attr),
        "--vector",
        "loudness",
        "--data",
        s(&data),
    ]);
    assert_eq!(r.status.code(), Some(1));

    let prog = d.join("prog");
    let r = run(&[
        "progression",
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&prog),
        "--chords",
        "C,C,Am,Am,F,G",
        "--seed",
        "6",
    ]);
    assert!(r.status.success());
    assert!(prog.join("progression.mid").exists());
    let r = run(&[
        "progression",
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&prog),
        "--chords",
        "C,G,F",
    ]);
    assert_eq!(r.status.code(), Some(1));

    let svg = d.join("roll.svg");
    assert!(
        run(&["render", "--input", s(&samples.join("sample.mid")), "--out", s(&svg)])
            .status
            .success()
    );
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
    let txt = d.join("roll.txt");
    let r = run(&[
        "render",
        "--input",
        s(&data),
        "--out",
        s(&txt),
        "--format",
        "text",
        "--strip-drums",
    ]);
    assert!(r.status.success());
    assert!(std::fs::read_to_string(&txt).unwrap().starts_with("pianoroll steps="));

    let r = run(&["stats", "--data", s(&data)]);
    assert!(r.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&r.stdout).unwrap();
    assert!(summary["measures"].as_u64().unwrap() > 0);
}

#[test]
fn documented_flag_spellings() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let stats = dir.path().join("s.json");
    let r = run(&[
        "ingest",
        "--input",
        s(&mini()),
        "--output",
        s(&data),
        "--seed",
        "3",
        "--stats",
        s(&stats),
    ]);
    assert!(r.status.success());
    let parsed: serde_json::Value = serde_json::from_slice(&std::fs::read(&stats).unwrap()).unwrap();
    assert_eq!(parsed["files_seen"], 10);

    let chords = dir.path().join("c.json");
    let song = mini().join("song_03.mid");
    assert!(run(&["chords", "--input", s(&song), "--output", s(&chords)])
        .status
        .success());
    let parsed: serde_json::Value = serde_json::from_slice(&std::fs::read(&chords).unwrap()).unwrap();
    assert!(!parsed.as_array().unwrap().is_empty());
}
