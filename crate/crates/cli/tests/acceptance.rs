//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Runs offline against stub backends and the shipped
//! cassettes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vimo_core::agent::{select_top2, Agent, AgentConfig, ChooserOutcome, History, Judgment, Verdict};
use vimo_core::backend::{FnLlm, FnStrPredictor, LlmBackend, LlmRequest};
use vimo_core::dataset::{self, REFERENCE_SPLIT_COUNTS};
use vimo_core::eval::{harmonic_score, relative_gain, trajectory_accuracy};
use vimo_core::prompts::PromptKind;
use vimo_core::render::{overlay_text, FontRenderer, TextAssignment, TextEntry};
use vimo_core::symbols::{black_components, detect_symbols, symbolize, Provenance, StrImage};
use vimo_core::synthetic::{synthetic_gui, ScriptedLlm, SyntheticStrPredictor};
use vimo_core::world_model::{Screen, WorldModel};
use vimo_core::{ActionInstruction, BBox, Episode, GuiImage, Rgb, TextBox};

type Outcome = Result<String, String>;
type Check = fn() -> Outcome;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn round_trip() -> Outcome {
    let font = FontRenderer::bundled();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut elapsed = Duration::ZERO;
    let (mut boxes, mut worst) = (0, 1.0f64);
    for case in 0..100 {
        let g = synthetic_gui(&mut rng, 360, 640, 5..=20, &font).map_err(|e| e.to_string())?;
        ensure((5..=20).contains(&g.boxes.len()), || format!("case {case}: generator placed {} boxes", g.boxes.len()))?;
        let start = Instant::now();
        let (str_img, _) = symbolize(&g.image, &g.boxes).map_err(|e| e.to_string())?;
        let found = detect_symbols(&str_img);
        elapsed += start.elapsed();
        ensure(found.len() == g.boxes.len(), || format!("case {case}: {} boxes, {} detected", g.boxes.len(), found.len()))?;
        let mut used = BTreeSet::new();
        for b in &g.boxes {
            let (id, iou) = found
                .symbols
                .iter()
                .map(|s| (s.id, s.bbox.iou(&b.bbox)))
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            ensure(iou >= 0.95 && used.insert(id), || format!("case {case}: box {:?} best IoU {iou:.3}", b.bbox))?;
            worst = worst.min(iou);
        }
        boxes += g.boxes.len();
    }
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("100 screens, {boxes} boxes, min IoU {worst:.3}, 0 spurious, {:.2}s", elapsed.as_secs_f64()))
}

const BLACK: Rgb = Rgb([0, 0, 0]);
const WHITE: Rgb = Rgb([255, 255, 255]);
const GREY: Rgb = Rgb([128, 128, 128]);

fn canvas() -> GuiImage {
    GuiImage::new(40, 40, Rgb([150, 170, 190])).unwrap()
}

fn detected(img: GuiImage) -> bool {
    let s = StrImage { image: img, provenance: Provenance::PredictedByBackend };
    detect_symbols(&s).len() == 1
}

/// A 14x14 frame whose 10x10 interior holds `white` white pixels, grey elsewhere.
fn frame_with_white(white: usize) -> GuiImage {
    let mut img = canvas();
    img.fill_rect(&BBox::new(5, 5, 14, 14), BLACK).unwrap();
    img.fill_rect(&BBox::new(7, 7, 10, 10), GREY).unwrap();
    for i in 0..white {
        img.set(7 + (i % 10) as u32, 7 + (i / 10) as u32, WHITE);
    }
    img
}

/// A 20x20 black block missing a corner notch, with a white hole, so the
/// filled area is `400 - nw * nh`.
fn notched(nw: u32, nh: u32) -> GuiImage {
    let mut img = canvas();
    img.fill_rect(&BBox::new(5, 5, 20, 20), BLACK).unwrap();
    img.fill_rect(&BBox::new(5 + 20 - nw, 5, nw, nh), Rgb([150, 170, 190])).unwrap();
    img.fill_rect(&BBox::new(8, 8, 7, 14), WHITE).unwrap();
    img
}

fn thresholds() -> Outcome {
    let mut notes = Vec::new();
    for (white, want) in [(49, false), (50, false), (51, true)] {
        let img = frame_with_white(white);
        let c = black_components(&img)[0];
        ensure((c.white_ratio() - white as f64 / 100.0).abs() < 1e-12, || format!("white ratio {}", c.white_ratio()))?;
        ensure(detected(img) == want, || format!("{white}% white: accepted={}", !want))?;
        notes.push(format!("{white}%:{}", if want { "keep" } else { "drop" }));
    }
    for ((nw, nh), ratio, want) in [((7, 12), 0.79, false), ((8, 10), 0.80, false), ((4, 19), 0.81, true)] {
        let img = notched(nw, nh);
        let c = black_components(&img)[0];
        ensure((c.area_ratio() - ratio).abs() < 1e-12, || format!("area ratio {} for notch {nw}x{nh}", c.area_ratio()))?;
        ensure(detected(img) == want, || format!("ratio {ratio}: accepted={}", !want))?;
        notes.push(format!("{ratio}:{}", if want { "keep" } else { "drop" }));
    }
    Ok(format!("{} (boundaries are exclusive)", notes.join(" ")))
}

fn overlay_locality() -> Outcome {
    let font = FontRenderer::bundled();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let words = ["Inbox", "", "Settings", "a much longer line of text", "9", "Wi-Fi"];
    let mut checked = 0u64;
    for case in 0..50 {
        let g = synthetic_gui(&mut rng, 240, 400, 3..=12, &font).map_err(|e| e.to_string())?;
        let (str_img, table) = symbolize(&g.image, &g.boxes).map_err(|e| e.to_string())?;
        let mut ids: Vec<u32> = table.symbols.iter().map(|s| s.id).collect();
        ids.shuffle(&mut rng);
        ids.truncate(rng.gen_range(0..=ids.len()));
        let entries = ids
            .iter()
            .map(|&id| TextEntry { id, text: words[rng.gen_range(0..words.len())].into(), role: String::new() })
            .collect();
        let asg = TextAssignment { entries };
        let out = overlay_text(&str_img, &table, &asg, &font).map_err(|e| e.to_string())?;
        let boxes: Vec<BBox> = ids.iter().map(|&id| table.get(id).unwrap().bbox).collect();
        let (w, h) = out.dims();
        for y in 0..h {
            for x in 0..w {
                if boxes.iter().any(|b| b.contains(x, y)) {
                    continue;
                }
                ensure(out.get(x, y) == str_img.image.get(x, y), || format!("case {case}: pixel ({x},{y}) changed"))?;
                checked += 1;
            }
        }
    }
    Ok(format!("50 assignments, {checked} outside pixels unchanged"))
}

fn harmonic() -> Outcome {
    let h = harmonic_score(0.74, 75.39, 78.68);
    ensure((h - 0.76).abs() <= 0.005, || format!("got {h:.4}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let x: f64 = rng.gen_range(1e-3..=1.0);
        let y = harmonic_score(x, 100.0 * x, 100.0 * x);
        ensure((y - x).abs() <= 1e-12 * x.max(1.0), || format!("equal inputs {x} gave {y}"))?;
    }
    Ok(format!("{h:.4}, 1000 equal-input identities"))
}

fn random_judgments(rng: &mut ChaCha8Rng) -> Vec<Judgment> {
    let n = rng.gen_range(1..=6);
    (0..n)
        .map(|_| {
            // a coarse grid half the time so ties are common
            let confidence = if rng.gen_bool(0.5) { rng.gen_range(0..=4) as f64 / 4.0 } else { rng.gen_range(0.0..=1.0) };
            let verdict = if rng.gen_bool(0.5) { Verdict::Valid } else { Verdict::Invalid };
            Judgment { reason: String::new(), verdict, confidence, clamped: false }
        })
        .collect()
}

fn selection_properties() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(10_000);
    for case in 0..10_000 {
        let js = random_judgments(&mut rng);
        let scores: Vec<(usize, f64)> = js.iter().enumerate().map(|(i, j)| (i, j.score())).collect();
        for (j, (_, s)) in js.iter().zip(&scores) {
            let want = if j.verdict == Verdict::Valid { j.confidence } else { -j.confidence };
            ensure(*s == want, || format!("case {case}: sign rule broken"))?;
        }
        let (a, b) = select_top2(&scores).map_err(|e| e.to_string())?;
        ensure(a < js.len() && b < js.len(), || format!("case {case}: top2 out of range"))?;
        ensure((a != b) == (js.len() > 1), || format!("case {case}: top2 ({a},{b}) of {}", js.len()))?;
        let s = |i: usize| scores[i].1;
        for i in 0..js.len() {
            // nothing outside the pair beats it, and equal scores go to the lower index
            ensure(s(a) > s(i) || (s(a) == s(i) && a <= i), || format!("case {case}: {i} should lead"))?;
            if i != a {
                ensure(s(b) > s(i) || (s(b) == s(i) && b <= i), || format!("case {case}: {i} should be second"))?;
            }
        }
        // raising a score never pushes a candidate out of the pair
        let k = rng.gen_range(0..js.len());
        if k == a || k == b {
            let mut up = scores.clone();
            up[k].1 += rng.gen_range(0.0..=1.0);
            let (c, d) = select_top2(&up).map_err(|e| e.to_string())?;
            ensure(c == k || d == k, || format!("case {case}: raising {k} dropped it"))?;
        }
    }
    Ok(())
}

fn hand_trace() -> Result<(), String> {
    let llm = FnLlm(|r: &LlmRequest| {
        let judged = |p: &str| {
            let start = p.find("latest step: ").unwrap() + "latest step: ".len();
            let end = p[start..].find(", whose semantic").unwrap();
            p[start..start + end].to_string()
        };
        Ok(match r.kind {
            PromptKind::ActionOptions => "open inbox\nOpen Inbox\ngo back\nscroll down\nsearch".to_string(),
            PromptKind::UnchangedSymbols => "['0']".into(),
            PromptKind::SemanticRoles => r#"{"Mail": {"List": [{"id": 1, "Role": "preview"}]}}"#.into(),
            PromptKind::PredictText => r#"{"Mail": {"List": [{"id": 1, "text": "new"}]}}"#.into(),
            PromptKind::JudgeAction => match judged(&r.prompt).as_str() {
                "go back" => r#"{Reason: leaves, Judgement: "invalid", Confidence: 0.2}"#.into(),
                _ => r#"{Reason: fine, Judgement: "valid", Confidence: 0.7}"#.into(),
            },
            PromptKind::ChooseAction => "{Reason: reveals more, Choice: Action 2}".into(),
            k => return Err(vimo_core::Error::Backend(format!("unexpected {k}"))),
        })
    });
    let llm = Arc::new(llm);
    let pred = FnStrPredictor(|i: &GuiImage, _: &ActionInstruction| Ok(i.clone()));
    let wm = WorldModel::new(Arc::new(pred), llm.clone(), FontRenderer::bundled().shared());
    let agent = Agent::new(wm, llm, AgentConfig { n: 3, ..AgentConfig::default() });
    let screen = Screen::new(
        GuiImage::new(120, 200, Rgb([180, 200, 220])).unwrap(),
        vec![
            TextBox { bbox: BBox::new(4, 4, 40, 12), text: "Mail".into(), is_static: false },
            TextBox { bbox: BBox::new(4, 80, 60, 14), text: "Hello".into(), is_static: false },
        ],
    )
    .unwrap();
    let r = agent.run_step(&screen, "read mail", &History::new(20)).map_err(|e| e.to_string())?;
    let opts: Vec<&str> = r.options.options.iter().map(|a| a.as_str()).collect();
    ensure(opts == ["open inbox", "go back", "scroll down"], || format!("options {opts:?}"))?;
    let scores: Vec<Option<f64>> = r.candidates.iter().map(|c| c.score()).collect();
    ensure(scores == [Some(0.7), Some(-0.2), Some(0.7)], || format!("scores {scores:?}"))?;
    ensure(r.top2 == (0, 2), || format!("top2 {:?}", r.top2))?;
    ensure(matches!(r.chooser, ChooserOutcome::Chosen { slot: 2, .. }), || format!("chooser {:?}", r.chooser))?;
    ensure(r.selected_index == 2 && r.selected.as_str() == "scroll down", || format!("selected {}", r.selected.as_str()))
}

fn scoring() -> Outcome {
    selection_properties()?;
    hand_trace()?;
    Ok("10000 random judgment sets, hand trace selects \"scroll down\"".into())
}

fn gain() -> Outcome {
    let g = relative_gain(49.20, 43.13).map_err(|e| e.to_string())?;
    ensure((g - 14.07).abs() <= 0.01, || format!("got {g:.4}"))?;
    Ok(format!("{g:.4}%"))
}

/// Runs a replayed command three times; every run must match the golden tree.
fn replay_case(golden: &str, args: &[&str]) -> Result<usize, String> {
    let f = fixtures();
    let want = tree(&f.join("golden/cli").join(golden));
    ensure(!want.is_empty(), || format!("no goldens for {golden}"))?;
    for run in 1..=3 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
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
            .map_err(|e| e.to_string())?;
        ensure(o.status.success(), || format!("{golden} run {run}: {}", String::from_utf8_lossy(&o.stderr)))?;
        let got = tree(dir.path());
        ensure(got == want, || {
            let diff: Vec<&String> = want.keys().chain(got.keys()).filter(|k| got.get(*k) != want.get(*k)).collect();
            format!("{golden} run {run} differs in {diff:?}")
        })?;
    }
    Ok(want.len())
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        let Ok(rd) = fs::read_dir(dir) else { return };
        for e in rd.flatten() {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if let Ok(bytes) = fs::read(&p) {
                out.insert(p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), bytes);
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn replay_determinism() -> Outcome {
    let history = fixtures().join("history.json");
    let history = history.to_str().unwrap();
    let a = replay_case("predict", &["predict", "--action", "open inbox"])?;
    let b = replay_case("agent_step", &["agent-step", "--goal", "check the inbox", "--history", history])?;
    Ok(format!("predict ({a} files) and agent-step ({b} files) identical over 3 runs"))
}

fn fixture_episodes() -> Result<Vec<Episode>, String> {
    let ing = dataset::ingest(&fixtures().join("dataset/manifest.jsonl")).map_err(|e| e.to_string())?;
    Ok(ing.episodes.into_iter().map(|(_, e)| e).collect())
}

fn dataset_accounting() -> Outcome {
    let eps = fixture_episodes()?;
    let n = eps.len();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..20 {
        let a: f64 = rng.gen_range(0.0..=1.0);
        let b: f64 = rng.gen_range(0.0..=1.0 - a);
        let ratios = if trial == 0 { [0.8, 0.1, 0.1] } else { [a, b, 1.0 - a - b] };
        let (s, _) = dataset::build_splits(eps.clone(), ratios, trial).map_err(|e| e.to_string())?;
        ensure(s.is_consistent() && s.all.episodes == n, || format!("ratios {ratios:?}: {s:?}"))?;
    }
    let [tr, va, te, all] = REFERENCE_SPLIT_COUNTS;
    ensure(tr.episodes + va.episodes + te.episodes == all.episodes, || "episode sum".into())?;
    ensure(tr.images + va.images + te.images == all.images, || "image sum".into())?;
    ensure(tr.instructions + va.instructions + te.instructions == all.instructions, || "instruction sum".into())?;
    Ok(format!(
        "{n} episodes over 20 ratio draws; {}+{}+{}={}, {}+{}+{}={}, {}+{}+{}={}",
        tr.episodes, va.episodes, te.episodes, all.episodes, tr.images, va.images, te.images, all.images,
        tr.instructions, va.instructions, te.instructions, all.instructions
    ))
}

fn field<'a>(prompt: &'a str, key: &str) -> &'a str {
    prompt.lines().rev().find_map(|l| l.strip_prefix(key)).unwrap_or("").trim()
}

/// Fails the alignment check of each goal at its chosen 1-based step.
fn faulty_judge(faults: BTreeMap<String, usize>) -> impl LlmBackend {
    FnLlm(move |r: &LlmRequest| {
        if r.kind != PromptKind::TrajectoryAlignment {
            return ScriptedLlm.complete(r);
        }
        let hist = field(&r.prompt, "Action History:");
        let step = if hist == "None" { 1 } else { hist.split(';').count() + 1 };
        Ok(if faults.get(field(&r.prompt, "User Intent:")) == Some(&step) {
            "{Reason: differs, Status: failure}".to_string()
        } else {
            "{Reason: same, Status: success}".to_string()
        })
    })
}

fn trajectory_monotone() -> Outcome {
    let eps = fixture_episodes()?;
    let llm: Arc<dyn LlmBackend> = Arc::new(ScriptedLlm);
    let wm = WorldModel::new(Arc::new(SyntheticStrPredictor), llm.clone(), FontRenderer::bundled().shared());
    let agent = Agent::new(wm, llm, AgentConfig::default());
    let mut sets: BTreeMap<String, Vec<Episode>> = BTreeMap::new();
    for e in &eps {
        sets.entry(e.app_name.clone()).or_default().push(e.clone());
    }
    sets.insert("all".into(), eps.clone());
    let mut runs = 0;
    for (name, set) in &sets {
        for seed in 0..12 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let faults: BTreeMap<String, usize> = set
                .iter()
                .filter_map(|e| {
                    let step = rng.gen_range(1..=3);
                    rng.gen_bool(0.6).then(|| (e.goal.clone(), step))
                })
                .collect();
            let r = trajectory_accuracy(set, 3, &agent, &faulty_judge(faults)).map_err(|e| e.to_string())?;
            ensure(r.rates.windows(2).all(|w| w[1] <= w[0]), || format!("{name} seed {seed}: {:?}", r.rates))?;
            runs += 1;
        }
    }
    Ok(format!("{runs} fault patterns over {} fixture sets", sets.len()))
}

fn main() {
    let checks: [(&str, Check); 9] = [
        ("symbolize/detect round trip", round_trip),
        ("detection threshold fidelity", thresholds),
        ("overlay locality", overlay_locality),
        ("harmonic score", harmonic),
        ("scoring and selection", scoring),
        ("relative gain", gain),
        ("replay determinism", replay_determinism),
        ("dataset accounting", dataset_accounting),
        ("trajectory prefix monotonicity", trajectory_monotone),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
