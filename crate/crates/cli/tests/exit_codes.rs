use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn vimo<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vimo"))
        .args(args)
        .env_remove("VIMO_CONFIG")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn no_subcommand_prints_usage() {
    let o = vimo::<&str>(&[]);
    assert_eq!(code(&o), 1);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("Usage") && text.contains("symbolize"), "{text}");
}

#[test]
fn unknown_flag_is_usage() {
    assert_eq!(code(&vimo(&["detect", "--nope"])), 1);
    assert_eq!(code(&vimo(&["--help"])), 0);
}

#[test]
fn missing_ocr_file_is_validation() {
    let f = fixtures();
    let dir = tempfile::tempdir().unwrap();
    let o = vimo(&["symbolize", "--image", s(&f.join("screen.png")), "--ocr", "/no/such.jsonl", "--out-dir", s(dir.path())]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn malformed_ocr_is_validation() {
    let f = fixtures();
    let dir = tempfile::tempdir().unwrap();
    let ocr = dir.path().join("bad.jsonl");
    fs::write(&ocr, "{\"x\": 1}\n").unwrap();
    let o = vimo(&["symbolize", "--image", s(&f.join("screen.png")), "--ocr", s(&ocr), "--out-dir", s(dir.path())]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
}

#[test]
fn symbolize_writes_valid_table() {
    let f = fixtures();
    let dir = tempfile::tempdir().unwrap();
    let o = vimo(&["symbolize", "--image", s(&f.join("screen.png")), "--ocr", s(&f.join("screen_ocr.jsonl")), "--out-dir", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("symbols.json")).unwrap()).unwrap();
    let golden: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.join("golden/symbols.json")).unwrap()).unwrap();
    assert_eq!(table, golden);
    let syms = table["symbols"].as_array().unwrap();
    assert!(!syms.is_empty());
    for (i, sym) in syms.iter().enumerate() {
        assert_eq!(sym["id"], i);
        for k in ["x", "y", "w", "h"] {
            assert!(sym[k].is_u64(), "{sym}");
        }
    }
    assert_eq!(fs::read(dir.path().join("str.png")).unwrap(), fs::read(f.join("golden/str.png")).unwrap());
    let trace: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("trace.json")).unwrap()).unwrap();
    assert_eq!(trace["seed"], 0);
}

#[test]
fn no_static_filter_masks_every_box() {
    let f = fixtures();
    let dir = tempfile::tempdir().unwrap();
    let ocr = dir.path().join("ocr.jsonl");
    let lines: Vec<String> = fs::read_to_string(f.join("screen_ocr.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["is_static"] = true.into();
            v.to_string()
        })
        .collect();
    fs::write(&ocr, lines.join("\n")).unwrap();
    let run = |extra: &[&str], out: &str| {
        let out = dir.path().join(out);
        let image = f.join("screen.png");
        let mut args = vec!["symbolize", "--image", s(&image), "--ocr", s(&ocr), "--out-dir", s(&out)];
        args.extend(extra);
        let o = vimo(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let t: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("symbols.json")).unwrap()).unwrap();
        t["symbols"].as_array().unwrap().len()
    };
    assert_eq!(run(&[], "flags"), 0);
    assert_eq!(run(&["--no-static-filter"], "all"), lines.len());
}

#[test]
fn cassette_miss_is_backend_error_with_key() {
    let f = fixtures();
    let dir = tempfile::tempdir().unwrap();
    let o = vimo(&[
        "--config",
        s(&f.join("config.toml")),
        "--replay",
        "predict",
        "--image",
        s(&f.join("screen.png")),
        "--ocr",
        s(&f.join("screen_ocr.jsonl")),
        "--action",
        "an action nobody recorded",
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let err = stderr(&o);
    let key = err.rsplit("key ").next().unwrap().trim();
    assert_eq!(key.len(), 64, "{err}");
    assert!(key.chars().all(|c| c.is_ascii_hexdigit()));
}

#[test]
fn bad_config_is_validation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "cassette_dir = \"x\"\n[llm]\nmode = \"replay\"\nendpoint = \"http://a\"\n").unwrap();
    let o = vimo(&["--config", s(&cfg), "eval", "gain", "--new", "1", "--base", "1"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    fs::write(&cfg, "[llm]\nmode = \"remote\"\nendpoint = \"not a url\"\n").unwrap();
    let o = vimo(&["--config", s(&cfg), "eval", "gain", "--new", "1", "--base", "1"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn backend_commands_without_config_are_validation() {
    let f = fixtures();
    let dir = tempfile::tempdir().unwrap();
    let o = vimo(&["predict", "--image", s(&f.join("screen.png")), "--action", "a", "--out-dir", s(dir.path())]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn config_from_environment() {
    let f = fixtures();
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_vimo"))
        .args(["--replay", "predict", "--image", s(&f.join("screen.png")), "--ocr", s(&f.join("screen_ocr.jsonl"))])
        .args(["--action", "open inbox", "--out-dir", s(dir.path())])
        .env("VIMO_CONFIG", f.join("config.toml"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn eval_report_matches_harmonic_oracle() {
    let f = fixtures();
    let dir = tempfile::tempdir().unwrap();
    let o = vimo(&["eval", "report", "--runs", s(&f.join("runs.json")), "--out-dir", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    for run in m["runs"].as_array().unwrap() {
        let (g, i, a) = (run["s_gc"].as_f64().unwrap(), run["s_ia"].as_f64().unwrap(), run["s_ar"].as_f64().unwrap());
        let oracle = 3.0 / (1.0 / g + 100.0 / i + 100.0 / a);
        assert!((run["s_h"].as_f64().unwrap() - oracle).abs() < 1e-12);
    }
    let std_h = m["std"]["s_h"].as_f64().unwrap();
    assert!((std_h - 0.0025).abs() < 1e-4, "{std_h}");
    let md = fs::read_to_string(dir.path().join("metrics.md")).unwrap();
    assert!(md.contains("| r3 | 0.7423 | 75.39 | 78.68 | 0.7605 |"), "{md}");
}

#[test]
fn eval_report_rejects_out_of_range() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs.json");
    fs::write(&runs, r#"[{"s_gc": 1.5, "s_ia": 50, "s_ar": 50}]"#).unwrap();
    let o = vimo(&["eval", "report", "--runs", s(&runs), "--out-dir", s(dir.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gain_and_reference_arithmetic() {
    let o = vimo(&["eval", "gain", "--new", "49.20", "--base", "43.13"]);
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "14.0737");
    let o = vimo(&["dataset", "reference"]);
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().filter(|l| l.starts_with("ok")).count(), 3);
}

#[test]
fn dataset_build_accounts_for_every_episode() {
    let f = fixtures();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ds");
    let o = vimo(&[
        "--config",
        s(&f.join("config.toml")),
        "--replay",
        "dataset",
        "build",
        "--manifest",
        s(&f.join("dataset/manifest.jsonl")),
        "--out",
        s(&out),
        "--ratios",
        "0.5,0.25,0.25",
        "--convert-commands",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let sum: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let sp = &sum["splits"];
    for k in ["episodes", "images", "instructions"] {
        let parts: u64 = ["train", "val", "test"].iter().map(|s| sp[s][k].as_u64().unwrap()).sum();
        assert_eq!(parts, sp["all"][k].as_u64().unwrap(), "{k}");
    }
    assert_eq!(sp["all"]["episodes"], 8);
    // the two command-only steps were turned into instructions
    assert_eq!(sum["commands"]["converted"], 2);
    assert_eq!(sum["seed"], 7);
    let layout = fs::read_to_string(out.join("layout.jsonl")).unwrap();
    assert_eq!(layout.lines().count(), 8);
}
