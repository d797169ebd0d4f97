//! Regenerates the shared fixture tree: a synthetic screen with OCR boxes, a
//! small episode manifest, recorded cassettes and pipeline goldens.
//!
//! ```text
//! cargo run -p vimo-core --example make_fixtures [-- <dir>]
//! ```
//!
//! Cassettes are recorded from the scripted stand-in backends by running the
//! same calls the CLI makes for the commands exercised in tests.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use vimo_core::agent::{Agent, History};
use vimo_core::backend::{LlmBackend, RecordingLlm, RecordingStrPredictor, StrPredictor};
use vimo_core::config::Config;
use vimo_core::dataset;
use vimo_core::eval;
use vimo_core::render::{overlay_id_labels, overlay_text, FontRenderer, TextAssignment, TextEntry};
use vimo_core::symbols::{detect_symbols, symbolize};
use vimo_core::synthetic::{synthetic_gui, ScriptedLlm, SyntheticStrPredictor};
use vimo_core::world_model::{Screen, WorldModel};
use vimo_core::{ActionInstruction, Result, TextBox};

const WIDTH: u32 = 200;
const HEIGHT: u32 = 320;

pub const CONFIG: &str = r#"seed = 7
cassette_dir = "cassettes"
parallelism = 4

[llm]
mode = "replay"

[str_predictor]
mode = "replay"

[agent]
n = 3
iterations = 2
"#;

fn write_ocr(path: &Path, boxes: &[TextBox]) -> Result<()> {
    let mut body = String::new();
    for b in boxes {
        let line = json!({"x": b.bbox.x, "y": b.bbox.y, "w": b.bbox.w, "h": b.bbox.h, "text": b.text});
        body.push_str(&line.to_string());
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| vimo_core::Error::io(path, e))
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").map_err(|e| vimo_core::Error::io(path, e))
}

struct Episodes {
    id: &'static str,
    app: &'static str,
    goal: &'static str,
    actions: &'static [&'static str],
    /// Steps whose instruction is withheld so only the command is logged.
    command_only: &'static [usize],
}

const EPISODES: &[Episodes] = &[
    Episodes { id: "g1", app: "Gmail", goal: "check the inbox", actions: &["open inbox", "scroll down", "open message"], command_only: &[] },
    Episodes { id: "g2", app: "Gmail", goal: "write a draft", actions: &["tap compose", "type hello", "go back"], command_only: &[1] },
    Episodes { id: "g3", app: "Gmail", goal: "search for invoices", actions: &["tap the search bar", "type invoice", "open result"], command_only: &[] },
    Episodes { id: "g4", app: "Gmail", goal: "archive mail", actions: &["open inbox", "long press a message", "tap archive"], command_only: &[] },
    Episodes { id: "c1", app: "Chrome", goal: "open a new tab", actions: &["tap the tabs button", "tap new tab", "type news"], command_only: &[] },
    Episodes { id: "c2", app: "Chrome", goal: "view the history", actions: &["open menu", "open history"], command_only: &[] },
    Episodes { id: "s1", app: "Settings", goal: "turn on wi-fi", actions: &["open network", "tap wi-fi", "toggle wi-fi"], command_only: &[2] },
    Episodes { id: "s2", app: "Settings", goal: "check the battery", actions: &["open battery", "scroll down", "open usage"], command_only: &[] },
];

fn build_episodes(dir: &Path, wm: &WorldModel, font: &FontRenderer) -> Result<()> {
    let root = dir.join("dataset");
    let mut manifest = String::new();
    for (n, e) in EPISODES.iter().enumerate() {
        let ep_dir = root.join(e.id);
        fs::create_dir_all(&ep_dir).map_err(|err| vimo_core::Error::io(&ep_dir, err))?;
        let mut rng = ChaCha8Rng::seed_from_u64(100 + n as u64);
        let g = synthetic_gui(&mut rng, WIDTH, HEIGHT, 5..=8, font)?;
        let mut screen = Screen::new(g.image, g.boxes)?;
        let mut steps = Vec::new();
        for k in 0..=e.actions.len() {
            let image = format!("{}/{k}.png", e.id);
            let ocr = format!("{}/{k}.jsonl", e.id);
            screen.image.save(root.join(&image))?;
            write_ocr(&root.join(&ocr), &screen.text_boxes)?;
            let mut step = json!({"image": image, "ocr": ocr});
            if let Some(a) = e.actions.get(k) {
                let cmd = if a.contains("scroll") {
                    json!({"kind": "scroll", "touch": [0.5, 0.7], "lift": [0.5, 0.3]})
                } else {
                    json!({"kind": "click", "x": 0.5, "y": 0.3 + 0.1 * k as f64})
                };
                step["command"] = cmd;
                if !e.command_only.contains(&k) {
                    step["instruction"] = json!(a);
                }
                let p = wm.predict_next_gui(&screen, &ActionInstruction::new(*a)?)?;
                screen = p.next_screen(&screen);
            }
            steps.push(step);
        }
        let source = if n % 2 == 0 { "aitw" } else { "android_control" };
        let rec = json!({"episode_id": e.id, "source": source, "app_name": e.app, "goal": e.goal, "steps": steps});
        manifest.push_str(&rec.to_string());
        manifest.push('\n');
    }
    let path = root.join("manifest.jsonl");
    fs::write(&path, manifest).map_err(|err| vimo_core::Error::io(&path, err))
}

fn goldens(dir: &Path, screen: &Screen, font: &FontRenderer) -> Result<()> {
    let out = dir.join("golden");
    fs::create_dir_all(&out).map_err(|e| vimo_core::Error::io(&out, e))?;
    let (str_img, table) = symbolize(&screen.image, &screen.text_boxes)?;
    str_img.image.save(out.join("str.png"))?;
    write_json(&out.join("symbols.json"), &serde_json::to_value(&table)?)?;
    assert_eq!(detect_symbols(&str_img), table, "fixture screen must round-trip");
    let asg = TextAssignment {
        entries: table
            .symbols
            .iter()
            .map(|s| TextEntry { id: s.id, text: format!("Item {}", s.id), role: String::new() })
            .collect(),
    };
    write_json(&out.join("texts.json"), &serde_json::to_value(&asg)?)?;
    overlay_text(&str_img, &table, &asg, font)?.save(out.join("rendered.png"))?;
    overlay_id_labels(&str_img, &table, font)?.image.save(out.join("labels.png"))?;
    Ok(())
}

/// Runs every backend-using call the tests replay.
fn record(dir: &Path, agent: &Agent, screen: &Screen, history: &History) -> Result<()> {
    let inbox = ActionInstruction::new("open inbox")?;
    agent.predict_chain(screen, "", &inbox, 1)?;
    agent.predict_chain(screen, "check the inbox", &inbox, 2)?;
    agent.predict_chain(screen, "check the inbox", &inbox, 3)?;
    agent.rollout(screen, "check the inbox", history, 1)?;
    agent.rollout(screen, "check the inbox", history, agent.config.iterations)?;

    let manifest = dir.join("dataset/manifest.jsonl");
    let mut episodes: Vec<_> = dataset::ingest(&manifest)?.episodes.into_iter().map(|(_, e)| e).collect();
    let llm = agent.judge.as_ref();
    for l in 1..=3 {
        eval::trajectory_accuracy(&episodes, l, agent, llm)?;
    }
    for ep in &episodes {
        for (k, s) in ep.steps.iter().enumerate() {
            if let Some(a) = &s.instruction {
                let p = agent.world_model.predict_next_gui(&Screen::new(s.image.clone(), s.text_boxes.clone())?, a)?;
                eval::instructional_accuracy(
                    &[eval::AccuracySample { current: s.image.clone(), predicted: p.rendered.clone(), action: a.clone() }],
                    llm,
                    1,
                )?;
                if let Some(next) = &ep.steps[k + 1].instruction {
                    eval::action_readiness(
                        &[eval::ReadinessSample { predicted: p.rendered, goal: ep.goal.clone(), next_action: next.clone() }],
                        llm,
                        1,
                    )?;
                }
            }
        }
    }
    dataset::convert_instructions(&mut episodes, llm, 1)?;
    Ok(())
}

fn main() -> Result<()> {
    let dir: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures"));
    let cassettes = dir.join("cassettes");
    if cassettes.exists() {
        fs::remove_dir_all(&cassettes).map_err(|e| vimo_core::Error::io(&cassettes, e))?;
    }
    fs::create_dir_all(&dir).map_err(|e| vimo_core::Error::io(&dir, e))?;
    fs::write(dir.join("config.toml"), CONFIG).map_err(|e| vimo_core::Error::io(&dir, e))?;
    let cfg = Config::load(&dir.join("config.toml"))?;

    let font = FontRenderer::bundled().shared();
    let plain = WorldModel::new(Arc::new(SyntheticStrPredictor), Arc::new(ScriptedLlm), font.clone());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = synthetic_gui(&mut rng, WIDTH, HEIGHT, 6..=9, &font)?;
    g.image.save(dir.join("screen.png"))?;
    write_ocr(&dir.join("screen_ocr.jsonl"), &g.boxes)?;
    let screen = Screen::new(g.image, g.boxes)?;
    goldens(&dir, &screen, &font)?;

    write_json(&dir.join("history.json"), &json!([{"action": "open the app", "summary": "the app opened"}]))?;
    let mut history = History::new(cfg.agent.history_cap);
    history.push("open the app", "the app opened");
    write_json(
        &dir.join("runs.json"),
        &json!([
            {"s_gc": 0.7421, "s_ia": 75.08, "s_ar": 78.29},
            {"s_gc": 0.7323, "s_ia": 75.63, "s_ar": 77.64},
            {"s_gc": 0.7423, "s_ia": 75.39, "s_ar": 78.68}
        ]),
    )?;

    build_episodes(&dir, &plain, &font)?;

    let llm: Arc<dyn LlmBackend> = Arc::new(RecordingLlm::new(ScriptedLlm, &cassettes));
    let pred: Arc<dyn StrPredictor> = Arc::new(RecordingStrPredictor::new(SyntheticStrPredictor, &cassettes));
    let mut wm = WorldModel::new(pred, llm.clone(), font);
    wm.options = cfg.world_model;
    let agent = Agent::new(wm, llm, cfg.agent_config());
    record(&dir, &agent, &screen, &history)?;
    println!("fixtures written to {}", dir.display());
    Ok(())
}
