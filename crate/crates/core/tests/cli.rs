use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ctxpaste(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxpaste"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn error_kind(out: &Output) -> String {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr
        .lines()
        .rev()
        .find(|l| l.starts_with('{'))
        .expect("json error line");
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    v["error"]["kind"].as_str().unwrap().to_string()
}

#[test]
fn synth_is_byte_identical_across_runs_and_jobs() {
    let tmp = tempfile::tempdir().unwrap();
    for (out, jobs) in [("a", "1"), ("b", "4")] {
        let o = ctxpaste(
            &["--seed", "3", "--jobs", jobs, "--out", out, "synth", "--count", "12"],
            tmp.path(),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(
        fs::read(a.join("manifest.json")).unwrap(),
        fs::read(b.join("manifest.json")).unwrap()
    );
    for sub in ["images", "masks"] {
        let mut names: Vec<_> = fs::read_dir(a.join(sub))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        assert_eq!(names.len(), 12);
        for n in names {
            assert_eq!(
                fs::read(a.join(sub).join(&n)).unwrap(),
                fs::read(b.join(sub).join(&n)).unwrap()
            );
        }
    }
}

#[test]
fn pipeline_commands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let ok = |args: &[&str]| {
        let o = ctxpaste(args, d);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    ok(&["--out", "corpus", "synth", "--count", "60"]);
    ok(&["--out", "bank", "harvest", "--manifest", "corpus/manifest.json"]);
    ok(&[
        "--out",
        "aug",
        "augment",
        "--manifest",
        "corpus/manifest.json",
        "--bank",
        "bank",
        "--count",
        "4",
    ]);
    ok(&[
        "--out",
        "model",
        "train",
        "--manifest",
        "corpus/manifest.json",
        "--bank",
        "bank",
    ]);
    ok(&[
        "--out",
        "eval",
        "eval",
        "--manifest",
        "corpus/manifest.json",
        "--model",
        "model/model.json",
    ]);
    ok(&[
        "--out",
        "cams",
        "dump-cam",
        "--manifest",
        "corpus/manifest.json",
        "--model",
        "model/model.json",
        "--ids",
        "scene_00000",
    ]);
    assert!(d.join("aug/placements.json").is_file());
    assert!(d.join("cams/scene_00000_mask.png").is_file());
    let eval: serde_json::Value = serde_json::from_slice(&fs::read(d.join("eval/eval.json")).unwrap()).unwrap();
    assert!(eval["miou"].as_f64().unwrap() > 0.0);
}

#[test]
fn empty_bank_is_a_pipeline_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert!(ctxpaste(&["--out", "corpus", "synth", "--count", "10"], d)
        .status
        .success());
    fs::write(d.join("strict.toml"), "[harvest]\neps1 = 0.98\neps2 = 0.99\n").unwrap();
    let o = ctxpaste(
        &[
            "--config",
            "strict.toml",
            "--out",
            "bank",
            "harvest",
            "--manifest",
            "corpus/manifest.json",
        ],
        d,
    );
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_kind(&o), "empty_bank");
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ctxpaste(&["frobnicate"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_kind(&o), "usage");
    let o = ctxpaste(&["--jobs", "0", "synth"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_config_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("typo.toml"), "train_sise = 10\n").unwrap();
    let o = ctxpaste(&["--config", "typo.toml", "synth"], d);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_kind(&o), "config");
    fs::write(d.join("range.toml"), "[harvest]\neps1 = 0.8\neps2 = 0.2\n").unwrap();
    let o = ctxpaste(&["--config", "range.toml", "synth"], d);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_kind(&o), "config");
    let o = ctxpaste(&["--config", "missing.toml", "synth"], d);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn corrupt_manifest_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("manifest.json"), "{\"version\": 1, \"categories\": []}").unwrap();
    let o = ctxpaste(&["--out", "bank", "harvest", "--manifest", "manifest.json"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(["manifest", "json"].contains(&error_kind(&o).as_str()));
}
