use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use vimo_core::agent::History;
use vimo_core::config::Config;
use vimo_core::dataset::{self, SplitCounts, REFERENCE_SPLIT_COUNTS};
use vimo_core::eval::{self, AccuracySample, MetricsRecord, ReadinessSample, SampleCounts};
use vimo_core::parallel::map_bounded;
use vimo_core::render::{overlay_id_labels, overlay_text, TextAssignment};
use vimo_core::symbols::{detect_symbols, filter_static_text, load_ocr_boxes, symbolize, Provenance, StrImage, SymbolTable};
use vimo_core::world_model::{NextGuiPrediction, Screen};
use vimo_core::{ActionInstruction, Episode, Error, GuiImage, TextBox};

use crate::{AgentStepArgs, Command, DatasetCommand, EvalCommand, Failure, PredictArgs, RenderArgs, ScreenArgs, SymbolizeArgs};

type CmdResult = std::result::Result<(), Failure>;

pub struct Context {
    pub config_path: Option<PathBuf>,
    pub replay: bool,
}

impl Context {
    /// The loaded config, or defaults when none was given. Backends built
    /// from the defaults fail with a validation error.
    fn config(&self) -> std::result::Result<Config, Failure> {
        let mut cfg = match &self.config_path {
            Some(p) => Config::load(p).map_err(|e| Failure::Validation(format!("config {}: {e}", p.display())))?,
            None => Config::default(),
        };
        if self.replay {
            cfg.force_replay()
                .map_err(|e| Failure::Validation(format!("--replay: {e}")))?;
        }
        Ok(cfg)
    }
}

pub fn run(ctx: &Context, command: Command) -> CmdResult {
    // a broken config is reported even by commands that never read it
    if ctx.config_path.is_some() {
        ctx.config()?;
    }
    match command {
        Command::Symbolize(a) => cmd_symbolize(ctx, a),
        Command::Detect(a) => cmd_detect(a),
        Command::Render(a) => cmd_render(ctx, a),
        Command::Predict(a) => cmd_predict(ctx, a),
        Command::AgentStep(a) => cmd_agent_step(ctx, a, None),
        Command::Rollout(a) => cmd_agent_step(ctx, a.step, Some(a.iterations)),
        Command::Eval(e) => match e {
            EvalCommand::Report { runs, out_dir } => cmd_eval_report(&runs, &out_dir),
            EvalCommand::WorldModel { manifest, out_dir } => cmd_eval_world_model(ctx, &manifest, &out_dir),
            EvalCommand::Trajectory { manifest, max_l, out } => cmd_eval_trajectory(ctx, &manifest, max_l, &out),
            EvalCommand::Gain { new, base } => {
                let g = eval::relative_gain(new, base)?;
                println!("{g:.4}");
                Ok(())
            }
        },
        Command::Dataset(d) => match d {
            DatasetCommand::Build {
                manifest,
                out,
                ratios,
                convert_commands,
                static_filter,
            } => cmd_dataset_build(ctx, &manifest, &out, &ratios, convert_commands, static_filter),
            DatasetCommand::Reference => cmd_dataset_reference(),
        },
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let body = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

fn read_ocr(path: &Path, image: &GuiImage) -> Result<Vec<TextBox>, Error> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    load_ocr_boxes(BufReader::new(f), image.width(), image.height())
}

fn load_screen(a: &ScreenArgs) -> Result<Screen, Error> {
    let image = GuiImage::load(&a.image)?;
    let boxes = match &a.ocr {
        Some(p) => read_ocr(p, &image)?,
        None => Vec::new(),
    };
    Screen::new(image, boxes)
}

fn cmd_symbolize(ctx: &Context, a: SymbolizeArgs) -> CmdResult {
    let cfg = ctx.config()?;
    let gui = GuiImage::load(&a.image)?;
    let mut boxes = read_ocr(&a.ocr, &gui)?;
    let mut filter = json!("flags");
    if a.no_static_filter {
        for b in &mut boxes {
            b.is_static = false;
        }
        filter = json!("off");
    } else if cfg.world_model.filter_static_text {
        let llm = cfg.build_llm()?;
        let out = filter_static_text(&gui, &boxes, llm.as_ref(), cfg.world_model.static_filter_fallback)?;
        filter = json!({"provenance": out.provenance, "response": out.raw_response});
        boxes = out.dynamic;
    }
    let (str_img, table) = symbolize(&gui, &boxes)?;
    table.validate()?;
    create_dir(&a.out_dir)?;
    str_img.image.save(a.out_dir.join("str.png"))?;
    write_json(&a.out_dir.join("symbols.json"), &table)?;
    write_json(
        &a.out_dir.join("trace.json"),
        &json!({"seed": cfg.seed, "command": "symbolize", "static_filter": filter, "symbols": table.len()}),
    )?;
    println!("{} symbols", table.len());
    Ok(())
}

fn load_str(path: &Path) -> Result<StrImage, Error> {
    Ok(StrImage {
        image: GuiImage::load(path)?,
        provenance: Provenance::PredictedByBackend,
    })
}

fn cmd_detect(a: crate::DetectArgs) -> CmdResult {
    let str_img = load_str(&a.str_image)?;
    let table = detect_symbols(&str_img);
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json(&a.out, &table)?;
    println!("{} symbols", table.len());
    Ok(())
}

fn cmd_render(ctx: &Context, a: RenderArgs) -> CmdResult {
    let cfg = ctx.config()?;
    let font = cfg.build_font()?;
    let str_img = load_str(&a.str_image)?;
    let table: SymbolTable = match &a.symbols {
        Some(p) => read_json(p)?,
        None => detect_symbols(&str_img),
    };
    table.validate()?;
    if table.width != str_img.image.width() || table.height != str_img.image.height() {
        return Err(Failure::Validation(format!(
            "symbol table is {}x{}, image is {}x{}",
            table.width,
            table.height,
            str_img.image.width(),
            str_img.image.height()
        )));
    }
    let texts: TextAssignment = read_json(&a.texts)?;
    let gui = overlay_text(&str_img, &table, &texts, &font)?;
    gui.save(&a.out)?;
    if let Some(p) = &a.labels {
        overlay_id_labels(&str_img, &table, &font)?.image.save(p)?;
    }
    Ok(())
}

fn prediction_record(action: &ActionInstruction, p: &NextGuiPrediction) -> serde_json::Value {
    json!({
        "action": action,
        "table": p.table,
        "unchanged_ids": p.unchanged_ids,
        "roles": p.roles,
        "assignment": p.assignment,
        "trace": p.trace.clone().without_timings(),
    })
}

fn save_prediction(dir: &Path, p: &NextGuiPrediction) -> Result<(), Error> {
    create_dir(dir)?;
    p.str_current.image.save(dir.join("str_current.png"))?;
    p.str_next.image.save(dir.join("str_next.png"))?;
    p.str_next_labeled.image.save(dir.join("str_next_labeled.png"))?;
    p.rendered.save(dir.join("next.png"))
}

fn cmd_predict(ctx: &Context, a: PredictArgs) -> CmdResult {
    if a.iterations == 0 {
        return Err(Failure::Usage("--iterations must be at least 1".into()));
    }
    let cfg = ctx.config()?;
    let screen = load_screen(&a.screen)?;
    let action = ActionInstruction::new(a.action)?;
    let agent = cfg.build_agent()?;
    let chain = agent.predict_chain(&screen, &a.goal, &action, a.iterations)?;
    create_dir(&a.out_dir)?;
    let mut steps = Vec::new();
    for (i, (act, p)) in chain.actions.iter().zip(&chain.predictions).enumerate() {
        save_prediction(&a.out_dir.join(format!("step_{:02}", i + 1)), p)?;
        steps.push(prediction_record(act, p));
    }
    let last = chain.predictions.last().expect("chain has a first prediction");
    last.rendered.save(a.out_dir.join("next.png"))?;
    write_json(
        &a.out_dir.join("trace.json"),
        &json!({
            "seed": cfg.seed,
            "command": "predict",
            "iterations": a.iterations,
            "goal": a.goal,
            "actions": chain.actions,
            "steps": steps,
        }),
    )?;
    println!("{} prediction(s) written to {}", chain.predictions.len(), a.out_dir.display());
    Ok(())
}

#[derive(Deserialize)]
struct HistoryEntry {
    action: String,
    #[serde(default)]
    summary: String,
}

fn cmd_agent_step(ctx: &Context, a: AgentStepArgs, iterations: Option<Option<usize>>) -> CmdResult {
    let cfg = ctx.config()?;
    let screen = load_screen(&a.screen)?;
    let mut history = History::new(cfg.agent.history_cap);
    if let Some(p) = &a.history {
        let entries: Vec<HistoryEntry> = read_json(p)?;
        for e in entries {
            history.push(e.action, e.summary);
        }
    }
    let agent = cfg.build_agent()?;
    let (name, iters) = match iterations {
        None => ("agent-step", 1),
        Some(n) => ("rollout", n.unwrap_or(cfg.agent.iterations)),
    };
    if iters == 0 {
        return Err(Failure::Usage("--iterations must be at least 1".into()));
    }
    let result = agent.rollout(&screen, &a.goal, &history, iters)?;
    create_dir(&a.out_dir)?;
    for (i, p) in result.predictions.iter().enumerate() {
        if let Some(p) = p {
            p.rendered.save(a.out_dir.join(format!("candidate_{i}.png")))?;
        }
    }
    let selected = result.selected.clone();
    write_json(
        &a.out_dir.join("step.json"),
        &json!({
            "seed": cfg.seed,
            "command": name,
            "iterations": iters,
            "result": result.without_timings(),
        }),
    )?;
    println!("{selected}");
    Ok(())
}

#[derive(Deserialize)]
struct RunInput {
    s_gc: f64,
    s_ia: f64,
    s_ar: f64,
    #[serde(default)]
    n: SampleCounts,
}

fn cmd_eval_report(runs: &Path, out_dir: &Path) -> CmdResult {
    let inputs: Vec<RunInput> = read_json(runs)?;
    let records = inputs
        .into_iter()
        .map(|r| MetricsRecord::new(r.s_gc, r.s_ia, r.s_ar, r.n))
        .collect::<Result<Vec<_>, _>>()?;
    let report = eval::emit_report(&records, out_dir)?;
    print!("{}", eval::render_table(&report));
    Ok(())
}

fn load_episodes(manifest: &Path) -> Result<Vec<Episode>, Error> {
    let ingested = dataset::ingest(manifest)?;
    for (id, why) in &ingested.skipped {
        log::warn!("episode {id} skipped: {why}");
    }
    Ok(ingested.episodes.into_iter().map(|(_, e)| e).collect())
}

fn cmd_eval_world_model(ctx: &Context, manifest: &Path, out_dir: &Path) -> CmdResult {
    let cfg = ctx.config()?;
    let episodes = load_episodes(manifest)?;
    let wm = cfg.build_world_model()?;
    let embedder = cfg.build_embedder()?;
    let llm = cfg.build_llm()?;
    let jobs: Vec<(usize, usize)> = episodes
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| ep.steps.iter().enumerate().filter(|(_, s)| s.instruction.is_some()).map(move |(k, _)| (e, k)))
        .collect();
    if jobs.is_empty() {
        return Err(Failure::Validation("manifest has no instructed steps".into()));
    }
    let predicted = map_bounded(&jobs, cfg.parallelism, |_, &(e, k)| {
        let step = &episodes[e].steps[k];
        let screen = Screen::new(step.image.clone(), step.text_boxes.clone())?;
        let action = step.instruction.as_ref().expect("instructed step");
        wm.predict_next_gui(&screen, action).map(|p| p.rendered)
    });
    let predicted: Vec<GuiImage> = predicted.into_iter().collect::<Result<_, _>>()?;

    let mut pairs = Vec::new();
    let mut ia = Vec::new();
    let mut ar = Vec::new();
    let mut samples = Vec::new();
    for (&(e, k), pred) in jobs.iter().zip(predicted) {
        let ep = &episodes[e];
        let action = ep.steps[k].instruction.clone().expect("instructed step");
        pairs.push((ep.steps[k + 1].image.clone(), pred.clone()));
        ia.push(AccuracySample {
            current: ep.steps[k].image.clone(),
            predicted: pred.clone(),
            action,
        });
        if let Some(next) = &ep.steps[k + 1].instruction {
            ar.push(ReadinessSample {
                predicted: pred,
                goal: ep.goal.clone(),
                next_action: next.clone(),
            });
        }
        samples.push(json!({"episode": ep.id, "step": k}));
    }
    if ar.is_empty() {
        return Err(Failure::Validation("no step has a following instructed step to judge readiness".into()));
    }
    let s_gc = eval::mean_gui_consistency(&pairs, embedder.as_ref(), cfg.parallelism)?;
    let s_ia = eval::instructional_accuracy(&ia, llm.as_ref(), cfg.parallelism)?;
    let s_ar = eval::action_readiness(&ar, llm.as_ref(), cfg.parallelism)?;
    let n = SampleCounts {
        s_gc: pairs.len(),
        s_ia: ia.len(),
        s_ar: ar.len(),
    };
    let record = MetricsRecord::new(s_gc, s_ia.percent, s_ar.percent, n)?;
    let report = eval::emit_report(&[record], out_dir)?;
    write_json(
        &out_dir.join("judgments.json"),
        &json!({"seed": cfg.seed, "samples": samples, "instructional_accuracy": s_ia, "action_readiness": s_ar}),
    )?;
    print!("{}", eval::render_table(&report));
    Ok(())
}

fn cmd_eval_trajectory(ctx: &Context, manifest: &Path, max_l: usize, out: &Path) -> CmdResult {
    if max_l == 0 {
        return Err(Failure::Usage("--max-l must be at least 1".into()));
    }
    let cfg = ctx.config()?;
    let episodes = load_episodes(manifest)?;
    let agent = cfg.build_agent()?;
    let judge = cfg.build_llm()?;
    let report = eval::trajectory_accuracy(&episodes, max_l, &agent, judge.as_ref())?;
    write_json(out, &json!({"seed": cfg.seed, "max_l": max_l, "report": report}))?;
    for (l, r) in report.rates.iter().enumerate() {
        println!("T+{}: {r:.2}%", l + 1);
    }
    Ok(())
}

fn cmd_dataset_build(
    ctx: &Context,
    manifest: &Path,
    out: &Path,
    ratios: &[f64],
    convert_commands: bool,
    static_filter: bool,
) -> CmdResult {
    let cfg = ctx.config()?;
    let ratios: [f64; 3] = ratios
        .try_into()
        .map_err(|_| Failure::Usage("--ratios takes three values".into()))?;
    let ingested = dataset::ingest(manifest)?;
    let mut episodes: Vec<Episode> = ingested.episodes.into_iter().map(|(_, e)| e).collect();
    let llm = if convert_commands || static_filter { Some(cfg.build_llm()?) } else { None };
    let mut converted = json!(null);
    if convert_commands {
        let llm = llm.as_deref().expect("llm built");
        let (ok, empty) = dataset::convert_instructions(&mut episodes, llm, cfg.parallelism)?;
        converted = json!({"converted": ok, "empty": empty});
    }
    let (summary, episodes) = dataset::build_splits(episodes, ratios, cfg.seed)?;
    create_dir(out)?;
    let filter = if static_filter { llm.as_deref() } else { None };
    let built = dataset::build_str_pairs(&episodes, out, filter, cfg.parallelism)?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "seed": cfg.seed,
            "ratios": ratios,
            "splits": summary,
            "pairs": built.pairs,
            "commands": converted,
            "skipped_ingest": ingested.skipped,
            "skipped_build": built.skipped,
        }),
    )?;
    println!("split     apps episodes images instructions");
    for (name, c) in [("train", summary.train), ("val", summary.val), ("test", summary.test), ("all", summary.all)] {
        println!("{name:<9} {:>4} {:>8} {:>6} {:>12}", c.apps, c.episodes, c.images, c.instructions);
    }
    if !summary.is_consistent() {
        return Err(Failure::Internal("split counts do not add up".into()));
    }
    Ok(())
}

fn cmd_dataset_reference() -> CmdResult {
    let [tr, va, te, all] = REFERENCE_SPLIT_COUNTS;
    let field = |name: &str, f: fn(&SplitCounts) -> usize| {
        let sum = f(&tr) + f(&va) + f(&te);
        let ok = sum == f(&all);
        println!("{} {name}: {} + {} + {} = {sum} (recorded {})", if ok { "ok  " } else { "FAIL" }, f(&tr), f(&va), f(&te), f(&all));
        ok
    };
    let ok = [
        field("episodes", |c| c.episodes),
        field("images", |c| c.images),
        field("instructions", |c| c.instructions),
    ];
    if ok.iter().all(|&b| b) {
        Ok(())
    } else {
        Err(Failure::Internal("reference counts do not add up".into()))
    }
}
