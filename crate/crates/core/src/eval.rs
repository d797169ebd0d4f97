//! Quality metrics for predicted screens and for agents that use them.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::Agent;
use crate::backend::{EmbeddingBackend, LlmBackend, LlmRequest};
use crate::error::{Error, Result, StageExt};
use crate::image::{ActionInstruction, Episode, GuiImage};
use crate::parallel::map_bounded;
use crate::parse;
use crate::prompts::PromptKind;
use crate::world_model::Screen;

/// Cosine similarity of the two images' embeddings, clamped to [0, 1].
pub fn gui_consistency(gt: &GuiImage, pred: &GuiImage, e: &dyn EmbeddingBackend) -> Result<f64> {
    let a = e.embed(gt)?;
    let b = e.embed(pred)?;
    if a.len() != b.len() {
        return Err(Error::Backend(format!("embedding sizes differ: {} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Backend("zero-length embedding".into()));
    }
    Ok((dot / (na * nb)).clamp(0.0, 1.0))
}

/// Mean consistency over (ground truth, prediction) pairs.
pub fn mean_gui_consistency(pairs: &[(GuiImage, GuiImage)], e: &dyn EmbeddingBackend, parallelism: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no image pairs to compare".into()));
    }
    let scores = map_bounded(pairs, parallelism, |_, (gt, pred)| gui_consistency(gt, pred, e));
    let scores: Vec<f64> = scores.into_iter().collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Outcome of one judged sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleVerdict {
    Success,
    Failure,
    /// The response could not be read; counted as a failure.
    Unparsable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgedRate {
    pub percent: f64,
    pub n: usize,
    pub successes: usize,
    pub unparsable: usize,
    pub verdicts: Vec<SampleVerdict>,
    /// For readiness only: samples judged to still be in the right app.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub in_right_app: Option<usize>,
    pub responses: Vec<String>,
}

fn yes_no(v: Option<&str>) -> Option<bool> {
    let t = v?.trim().trim_matches(['"', '\'']).trim().to_lowercase();
    if t.starts_with("yes") {
        Some(true)
    } else if t.starts_with("no") {
        Some(false)
    } else {
        None
    }
}

/// Reads a `Status` field: "success" (or "yes") passes, "failure" (or "no") fails.
pub fn parse_status(raw: &str) -> Option<bool> {
    let f = parse::loose_fields(raw, &[&["status"]]);
    let t = f[0].as_deref()?.trim().trim_matches(['"', '\'']).trim().to_lowercase();
    if t.starts_with("success") || t.starts_with("yes") {
        Some(true)
    } else if t.starts_with("fail") || t.starts_with("no") {
        Some(false)
    } else {
        None
    }
}

/// Verdict, optional in-app verdict and the raw response of one judgment.
type Judged = (Option<bool>, Option<bool>, String);

fn tally(results: Vec<Result<Judged>>) -> Result<JudgedRate> {
    let mut verdicts = Vec::new();
    let mut responses = Vec::new();
    let mut in_app = 0;
    let mut saw_app = false;
    for r in results {
        let (ok, app, raw) = r?;
        if let Some(a) = app {
            saw_app = true;
            in_app += a as usize;
        }
        verdicts.push(match ok {
            Some(true) => SampleVerdict::Success,
            Some(false) => SampleVerdict::Failure,
            None => SampleVerdict::Unparsable,
        });
        responses.push(raw);
    }
    let n = verdicts.len();
    if n == 0 {
        return Err(Error::InvalidInput("no samples to judge".into()));
    }
    let unparsable = verdicts.iter().filter(|v| **v == SampleVerdict::Unparsable).count();
    if unparsable == n {
        return Err(Error::parse("judge batch", "no judge response could be read"));
    }
    if unparsable > 0 {
        log::warn!("{unparsable} of {n} judge responses unreadable, counted as failures");
    }
    let successes = verdicts.iter().filter(|v| **v == SampleVerdict::Success).count();
    Ok(JudgedRate {
        percent: 100.0 * successes as f64 / n as f64,
        n,
        successes,
        unparsable,
        verdicts,
        in_right_app: saw_app.then_some(in_app),
        responses,
    })
}

/// One sample for instruction-following: the screen, the prediction, the action.
pub struct AccuracySample {
    pub current: GuiImage,
    pub predicted: GuiImage,
    pub action: ActionInstruction,
}

/// Percent of predictions the judge says follow their action.
pub fn instructional_accuracy(samples: &[AccuracySample], judge: &dyn LlmBackend, parallelism: usize) -> Result<JudgedRate> {
    let results = map_bounded(samples, parallelism, |_, s| {
        let prompt = format!("{}\nHuman instruction: {}\n", PromptKind::InstructionalAccuracy.template(), s.action);
        let raw = judge.complete(&LlmRequest::new(PromptKind::InstructionalAccuracy, prompt, &[&s.current, &s.predicted]))?;
        Ok((parse_status(&raw), None, raw))
    });
    tally(results)
}

/// One sample for readiness: the prediction, the goal, the real next action.
pub struct ReadinessSample {
    pub predicted: GuiImage,
    pub goal: String,
    pub next_action: ActionInstruction,
}

/// Percent of predictions on which the judge says the next action can be taken.
pub fn action_readiness(samples: &[ReadinessSample], judge: &dyn LlmBackend, parallelism: usize) -> Result<JudgedRate> {
    let results = map_bounded(samples, parallelism, |_, s| {
        let prompt = format!(
            "{}\nUser intent: {}\nNext action: {}\n",
            PromptKind::ActionReadiness.template(),
            s.goal,
            s.next_action
        );
        let raw = judge.complete(&LlmRequest::new(PromptKind::ActionReadiness, prompt, &[&s.predicted]))?;
        let f = parse::loose_fields(&raw, &[&["in the right app"], &["ready for action"]]);
        Ok((yes_no(f[1].as_deref()), yes_no(f[0].as_deref()), raw))
    });
    tally(results)
}

/// Harmonic mean of consistency (a fraction) and two percentages, after
/// scaling the percentages to fractions. Zero if any input is zero.
pub fn harmonic_score(s_gc: f64, s_ia: f64, s_ar: f64) -> f64 {
    let parts = [s_gc, s_ia / 100.0, s_ar / 100.0];
    if parts.iter().any(|&p| p <= 0.0) {
        return 0.0;
    }
    3.0 / parts.iter().map(|p| 1.0 / p).sum::<f64>()
}

pub fn step_accuracy(correct: &[bool]) -> Result<f64> {
    if correct.is_empty() {
        return Err(Error::InvalidInput("no steps to score".into()));
    }
    Ok(100.0 * correct.iter().filter(|c| **c).count() as f64 / correct.len() as f64)
}

/// Gain of `new` over `base`, in percent of `base`.
pub fn relative_gain(new: f64, base: f64) -> Result<f64> {
    if base == 0.0 {
        return Err(Error::InvalidInput("baseline is zero".into()));
    }
    Ok(100.0 * (new - base) / base)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentVerdict {
    pub simulated: String,
    pub ground_truth: String,
    pub success: bool,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrajectory {
    pub episode_id: String,
    /// Verdicts in step order; stops at the first failure.
    pub verdicts: Vec<AlignmentVerdict>,
}

impl EpisodeTrajectory {
    /// Whether the first `l` steps all aligned.
    pub fn success_at(&self, l: usize) -> bool {
        self.verdicts.len() >= l && self.verdicts[..l].iter().all(|v| v.success)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    /// Success rate in percent for horizons 1..=max.
    pub rates: Vec<f64>,
    pub episodes: Vec<EpisodeTrajectory>,
    pub skipped: Vec<String>,
}

/// Success rate per horizon from per-episode verdicts.
pub fn trajectory_rates(episodes: &[EpisodeTrajectory], max_l: usize) -> Vec<f64> {
    (1..=max_l)
        .map(|l| {
            if episodes.is_empty() {
                0.0
            } else {
                100.0 * episodes.iter().filter(|e| e.success_at(l)).count() as f64 / episodes.len() as f64
            }
        })
        .collect()
}

fn judge_alignment(
    screen: &GuiImage,
    goal: &str,
    history: &[ActionInstruction],
    simulated: &ActionInstruction,
    truth: &ActionInstruction,
    judge: &dyn LlmBackend,
) -> Result<AlignmentVerdict> {
    let hist: Vec<&str> = history.iter().map(ActionInstruction::as_str).collect();
    let prompt = format!(
        "{}\nUser Intent: {goal}\nAction History: {}\nAgent Simulated Action: {simulated}\nGround Truth Action: {truth}\n",
        PromptKind::TrajectoryAlignment.template(),
        if hist.is_empty() { "None".to_string() } else { hist.join("; ") }
    );
    let raw = judge.complete(&LlmRequest::new(PromptKind::TrajectoryAlignment, prompt, &[screen]))?;
    let success = parse_status(&raw).unwrap_or_else(|| {
        log::warn!("unreadable alignment verdict counted as failure");
        false
    });
    Ok(AlignmentVerdict {
        simulated: simulated.to_string(),
        ground_truth: truth.to_string(),
        success,
        response: raw,
    })
}

fn trajectory_for(ep: &Episode, steps: &[(usize, ActionInstruction)], agent: &Agent, judge: &dyn LlmBackend) -> Result<EpisodeTrajectory> {
    let first = &ep.steps[0];
    let initial = first.image.clone();
    let mut screen = Screen::new(first.image.clone(), first.text_boxes.clone())?;
    let mut taken: Vec<ActionInstruction> = Vec::new();
    let mut verdicts = Vec::new();
    for (k, (_, truth)) in steps.iter().enumerate() {
        let simulated = agent.next_action(&initial, &screen.image, &ep.goal, &taken).stage("next_action")?;
        let v = judge_alignment(&screen.image, &ep.goal, &taken, &simulated, truth, judge).stage("judge_alignment")?;
        let ok = v.success;
        verdicts.push(v);
        if !ok || k + 1 == steps.len() {
            break;
        }
        // advance along the ground truth, observing only generated screens
        let pred = agent.world_model.predict_next_gui(&screen, truth)?;
        screen = pred.next_screen(&screen);
        taken.push(truth.clone());
    }
    Ok(EpisodeTrajectory {
        episode_id: ep.id.clone(),
        verdicts,
    })
}

/// Success rate of agent actions over horizons 1..=`max_l`, where each step
/// after the first is taken on the world model's prediction instead of a
/// real screenshot. Episodes with fewer than `max_l` instructed steps are
/// skipped so every horizon is measured on the same episodes.
pub fn trajectory_accuracy(episodes: &[Episode], max_l: usize, agent: &Agent, judge: &dyn LlmBackend) -> Result<TrajectoryReport> {
    if max_l == 0 {
        return Err(Error::InvalidInput("horizon must be at least 1".into()));
    }
    let mut skipped = Vec::new();
    let mut usable: Vec<(&Episode, Vec<(usize, ActionInstruction)>)> = Vec::new();
    for ep in episodes {
        let steps: Vec<(usize, ActionInstruction)> = ep
            .steps
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.instruction.clone().map(|a| (i, a)))
            .take(max_l)
            .collect();
        if steps.len() < max_l || ep.steps.is_empty() {
            log::info!("skipping episode {}: {} instructed steps, need {max_l}", ep.id, steps.len());
            skipped.push(ep.id.clone());
        } else {
            usable.push((ep, steps));
        }
    }
    let results = map_bounded(&usable, agent.config.parallelism, |_, (ep, steps)| trajectory_for(ep, steps, agent, judge));
    let episodes: Vec<EpisodeTrajectory> = results.into_iter().collect::<Result<_>>()?;
    Ok(TrajectoryReport {
        rates: trajectory_rates(&episodes, max_l),
        episodes,
        skipped,
    })
}

/// Counts behind one run's metrics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub s_gc: usize,
    pub s_ia: usize,
    pub s_ar: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub s_gc: f64,
    pub s_ia: f64,
    pub s_ar: f64,
    pub s_h: f64,
    pub n: SampleCounts,
}

impl MetricsRecord {
    pub fn new(s_gc: f64, s_ia: f64, s_ar: f64, n: SampleCounts) -> Result<Self> {
        if !(0.0..=1.0).contains(&s_gc) || !(0.0..=100.0).contains(&s_ia) || !(0.0..=100.0).contains(&s_ar) {
            return Err(Error::InvalidInput(format!("metric out of range: {s_gc}, {s_ia}, {s_ar}")));
        }
        Ok(MetricsRecord {
            s_gc,
            s_ia,
            s_ar,
            s_h: harmonic_score(s_gc, s_ia, s_ar),
            n,
        })
    }

    fn values(&self) -> [f64; 4] {
        [self.s_gc, self.s_ia, self.s_ar, self.s_h]
    }
}

/// Standard deviation with divisor n.
pub fn population_std(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    Some((xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpread {
    pub s_gc: f64,
    pub s_ia: f64,
    pub s_ar: f64,
    pub s_h: f64,
}

impl MetricSpread {
    fn from(v: [f64; 4]) -> Self {
        MetricSpread {
            s_gc: v[0],
            s_ia: v[1],
            s_ar: v[2],
            s_h: v[3],
        }
    }
}

/// The metrics file: the mean of all runs at top level, plus each run and,
/// for two or more runs, the population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub s_gc: f64,
    pub s_ia: f64,
    pub s_ar: f64,
    pub s_h: f64,
    pub n: SampleCounts,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<MetricSpread>,
    pub runs: Vec<MetricsRecord>,
}

pub fn summarize(runs: &[MetricsRecord]) -> Result<Report> {
    if runs.is_empty() {
        return Err(Error::InvalidInput("no runs to report".into()));
    }
    let column = |i: usize| runs.iter().map(|r| r.values()[i]).collect::<Vec<_>>();
    let mean = |i: usize| column(i).iter().sum::<f64>() / runs.len() as f64;
    let std = (runs.len() > 1).then(|| MetricSpread::from([0, 1, 2, 3].map(|i| population_std(&column(i)).unwrap_or(0.0))));
    let n = SampleCounts {
        s_gc: runs.iter().map(|r| r.n.s_gc).sum(),
        s_ia: runs.iter().map(|r| r.n.s_ia).sum(),
        s_ar: runs.iter().map(|r| r.n.s_ar).sum(),
    };
    Ok(Report {
        s_gc: mean(0),
        s_ia: mean(1),
        s_ar: mean(2),
        s_h: mean(3),
        n,
        std,
        runs: runs.to_vec(),
    })
}

pub fn render_table(report: &Report) -> String {
    let mut out = String::from("| Run | s_gc | s_ia | s_ar | s_h |\n|---|---|---|---|---|\n");
    let row = |out: &mut String, name: &str, v: [f64; 4]| {
        let _ = writeln!(out, "| {name} | {:.4} | {:.2} | {:.2} | {:.4} |", v[0], v[1], v[2], v[3]);
    };
    if report.runs.len() > 1 {
        for (i, r) in report.runs.iter().enumerate() {
            row(&mut out, &format!("r{}", i + 1), r.values());
        }
    }
    row(&mut out, "mean", [report.s_gc, report.s_ia, report.s_ar, report.s_h]);
    if let Some(s) = &report.std {
        row(&mut out, "STD", [s.s_gc, s.s_ia, s.s_ar, s.s_h]);
    }
    out
}

/// Writes `metrics.json` and `metrics.md` into `dir`.
pub fn emit_report(runs: &[MetricsRecord], dir: &Path) -> Result<Report> {
    let report = summarize(runs)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join("metrics.json");
    let body = serde_json::to_string_pretty(&report)?;
    std::fs::write(&json_path, body + "\n").map_err(|e| Error::io(&json_path, e))?;
    let md_path = dir.join("metrics.md");
    std::fs::write(&md_path, render_table(&report)).map_err(|e| Error::io(&md_path, e))?;
    Ok(report)
}
