//! Replayed commands are byte-identical across runs and match the goldens.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

/// Relative path to contents for every file under `dir`.
fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Runs `vimo --config fixtures/config.toml --replay <args> --out-dir <tmp>`
/// and returns stdout with the written tree.
fn replay(args: &[&str]) -> (String, BTreeMap<String, Vec<u8>>) {
    let f = fixtures();
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_vimo"))
        .arg("--config")
        .arg(f.join("config.toml"))
        .arg("--replay")
        .args(args)
        .arg("--image")
        .arg(f.join("screen.png"))
        .arg("--ocr")
        .arg(f.join("screen_ocr.jsonl"))
        .arg("--out-dir")
        .arg(dir.path())
        .env_remove("VIMO_CONFIG")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap().replace(dir.path().to_str().unwrap(), "<out>");
    (stdout, tree(dir.path()))
}

fn check(golden: &str, args: &[&str]) {
    let want = tree(&fixtures().join("golden/cli").join(golden));
    assert!(!want.is_empty());
    let first = replay(args);
    for _ in 0..2 {
        let again = replay(args);
        assert_eq!(again.0, first.0, "stdout differs between runs");
        assert!(again.1 == first.1, "outputs differ between runs");
    }
    assert_eq!(first.1.keys().collect::<Vec<_>>(), want.keys().collect::<Vec<_>>());
    for (k, v) in &want {
        assert!(&first.1[k] == v, "{golden}/{k} differs from the golden");
    }
}

#[test]
fn predict_is_stable() {
    check("predict", &["predict", "--action", "open inbox"]);
}

#[test]
fn predict_chain_is_stable() {
    check("predict_chain", &["predict", "--action", "open inbox", "--goal", "check the inbox", "--iterations", "3"]);
}

#[test]
fn agent_step_is_stable() {
    let h = fixtures().join("history.json");
    check("agent_step", &["agent-step", "--goal", "check the inbox", "--history", h.to_str().unwrap()]);
}

#[test]
fn rollout_is_stable() {
    let h = fixtures().join("history.json");
    check("rollout", &["rollout", "--goal", "check the inbox", "--history", h.to_str().unwrap()]);
}

fn actions(out: &BTreeMap<String, Vec<u8>>) -> Vec<String> {
    let trace: serde_json::Value = serde_json::from_slice(&out["trace.json"]).unwrap();
    trace["actions"].as_array().unwrap().iter().map(|a| a.as_str().unwrap().to_string()).collect()
}

#[test]
fn chain_length_follows_iterations_and_stop() {
    let base = ["predict", "--action", "open inbox", "--goal", "check the inbox", "--iterations"];
    let (_, two) = replay(&[&base[..], &["2"]].concat());
    assert_eq!(actions(&two), ["open inbox", "scroll down"]);
    assert!(two.contains_key("step_02/next.png") && !two.contains_key("step_03/next.png"));
    // the follow-up prompt answers "Stop." once two actions are in the chain
    let (_, three) = replay(&[&base[..], &["3"]].concat());
    assert_eq!(actions(&three), actions(&two));
    assert_eq!(three["next.png"], two["next.png"]);

    let (_, one) = replay(&["predict", "--action", "open inbox"]);
    assert_eq!(actions(&one), ["open inbox"]);
}
