//! Action selection with a world model in the loop: propose options, predict
//! each one's outcome, judge and score them, then pick between the best two.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backend::{LlmBackend, LlmRequest};
use crate::error::{Error, Result, StageExt};
use crate::image::{ActionInstruction, GuiImage};
use crate::parallel::map_bounded;
use crate::parse;
use crate::prompts::{PromptKind, DEFAULT_ACTION_SPACE};
use crate::world_model::{NextGuiPrediction, Screen, Trace, WorldModel};

pub const DEFAULT_OPTIONS: usize = 3;
pub const DEFAULT_HISTORY_CAP: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    /// Options requested from the proposer per step.
    pub n: usize,
    /// World-model calls chained per option; only the last prediction is judged.
    pub iterations: usize,
    pub history_cap: usize,
    /// Extra hints placed in the chooser prompt.
    pub guidance: String,
    /// Judge options whose prediction failed against the current screen alone
    /// instead of dropping them.
    pub allow_unpredicted: bool,
    pub parallelism: usize,
    pub action_space: String,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            n: DEFAULT_OPTIONS,
            iterations: 1,
            history_cap: DEFAULT_HISTORY_CAP,
            guidance: String::new(),
            allow_unpredicted: false,
            parallelism: 4,
            action_space: DEFAULT_ACTION_SPACE.to_string(),
        }
    }
}

/// Past (action, judge summary) pairs, newest last, bounded.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    entries: VecDeque<(String, String)>,
    cap: usize,
}

impl History {
    pub fn new(cap: usize) -> Self {
        History {
            entries: VecDeque::new(),
            cap: cap.max(1),
        }
    }

    pub fn push(&mut self, action: impl Into<String>, summary: impl Into<String>) {
        self.entries.push_back((action.into(), summary.into()));
        while self.entries.len() > self.cap {
            self.entries.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn render(&self) -> String {
        if self.entries.is_empty() {
            return " None".to_string();
        }
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (a, s))| {
                if s.is_empty() {
                    format!("\nStep {}: {a}", i + 1)
                } else {
                    format!("\nStep {}: {a} ({s})", i + 1)
                }
            })
            .collect()
    }
}

/// Lists the screen's OCR text as indexed UI elements.
pub fn describe_elements(screen: &Screen) -> String {
    if screen.text_boxes.is_empty() {
        return " None".to_string();
    }
    screen
        .text_boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            format!(
                "\n{i}: {} at [{}, {}, {}, {}]",
                serde_json::to_string(&b.text).unwrap_or_default(),
                b.bbox.x,
                b.bbox.y,
                b.bbox.w,
                b.bbox.h
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionOptionSet {
    pub options: Vec<ActionInstruction>,
    pub requested: usize,
}

fn clean_option_line(line: &str) -> &str {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"^\s*(?:[-*•]+|\d+[.)]|\(\d+\))?\s*").unwrap());
    let rest = &line[re.find(line).map_or(0, |m| m.end())..];
    rest.trim().trim_matches(['"', '\'', '`']).trim()
}

/// Parses up to `n` distinct options, one per line, keeping first occurrences.
pub fn parse_action_options(raw: &str, n: usize) -> Result<ActionOptionSet> {
    let mut options: Vec<ActionInstruction> = Vec::new();
    for line in parse::strip_fences(raw).lines() {
        let Ok(a) = ActionInstruction::new(clean_option_line(line)) else {
            continue;
        };
        if options.iter().any(|o| o.as_str().eq_ignore_ascii_case(a.as_str())) {
            continue;
        }
        options.push(a);
        if options.len() == n {
            break;
        }
    }
    if options.is_empty() {
        return Err(Error::parse("action options", format!("no options in {:?}", parse::snippet(raw))));
    }
    if options.len() < n {
        log::info!("proposer returned {} of {n} requested options", options.len());
    }
    Ok(ActionOptionSet { options, requested: n })
}

pub fn generate_action_options(
    current: &Screen,
    goal: &str,
    history: &History,
    proposer: &dyn LlmBackend,
    n: usize,
) -> Result<(ActionOptionSet, String)> {
    if n == 0 {
        return Err(Error::InvalidInput("at least one action option is required".into()));
    }
    let n_text = n.to_string();
    let hist = history.render();
    let elems = describe_elements(current);
    let prompt = PromptKind::ActionOptions.render(&[
        ("goal", goal),
        ("history", &hist),
        ("before_elements", &elems),
        ("n", &n_text),
    ])?;
    let raw = proposer.complete(&LlmRequest::new(PromptKind::ActionOptions, prompt, &[&current.image]))?;
    let set = parse_action_options(&raw, n)?;
    Ok((set, raw))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Valid,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub reason: String,
    pub verdict: Verdict,
    pub confidence: f64,
    /// The model insisted on a confidence outside [0, 1] and it was clamped.
    #[serde(default)]
    pub clamped: bool,
}

impl Judgment {
    /// Confidence with the sign of the verdict.
    pub fn score(&self) -> f64 {
        match self.verdict {
            Verdict::Valid => self.confidence,
            Verdict::Invalid => -self.confidence,
        }
    }
}

fn first_number(text: &str) -> Option<f64> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?").unwrap());
    re.find(text).and_then(|m| m.as_str().parse().ok())
}

/// Reads `{Reason, Judgement, Confidence}`; the confidence is returned as given.
pub fn parse_judgment(raw: &str) -> Result<Judgment> {
    let keys: &[&[&str]] = &[&["reason"], &["judgement", "judgment"], &["confidence"]];
    let f = parse::loose_fields(raw, keys);
    let verdict_text = f[1]
        .as_deref()
        .ok_or_else(|| Error::parse("judgment", format!("no verdict in {:?}", parse::snippet(raw))))?
        .trim_matches(|c: char| c == '"' || c == '\'' || c.is_whitespace())
        .to_lowercase();
    let verdict = match verdict_text.as_str() {
        "valid" => Verdict::Valid,
        "invalid" => Verdict::Invalid,
        other => return Err(Error::parse("judgment", format!("verdict {other:?} is neither valid nor invalid"))),
    };
    let confidence = f[2]
        .as_deref()
        .and_then(first_number)
        .filter(|c| c.is_finite())
        .ok_or_else(|| Error::parse("judgment", format!("no confidence in {:?}", parse::snippet(raw))))?;
    Ok(Judgment {
        reason: f[0].clone().unwrap_or_default(),
        verdict,
        confidence,
        clamped: false,
    })
}

/// Inputs of one judge query.
pub struct JudgeInput<'a> {
    pub current: &'a Screen,
    /// The predicted screen after the action, if there is one.
    pub predicted: Option<&'a GuiImage>,
    pub action: &'a ActionInstruction,
    pub goal: &'a str,
    pub history: &'a History,
    pub action_space: &'a str,
}

/// Asks the judge about one action. A malformed answer or a confidence
/// outside [0, 1] gets one more query; a confidence still out of range is
/// clamped and flagged.
pub fn judge_action(input: &JudgeInput<'_>, judge: &dyn LlmBackend) -> Result<(Judgment, Vec<String>)> {
    let hist = input.history.render();
    let elems = describe_elements(input.current);
    let prompt = PromptKind::JudgeAction.render(&[
        ("action options from the dataset", input.action_space),
        ("goal", input.goal),
        ("history", &hist),
        ("action", input.action.as_str()),
        ("sum", input.action.as_str()),
        ("before_elements", &elems),
    ])?;
    let mut images: Vec<&GuiImage> = vec![&input.current.image];
    if let Some(p) = input.predicted {
        images.push(p);
    }
    let mut raws = Vec::new();
    let first = judge.complete(&LlmRequest::new(PromptKind::JudgeAction, prompt.clone(), &images))?;
    raws.push(first.clone());
    match parse_judgment(&first) {
        Ok(j) if (0.0..=1.0).contains(&j.confidence) => return Ok((j, raws)),
        Ok(j) => log::info!("judge confidence {} out of range, asking again", j.confidence),
        Err(e) => log::info!("judge answer unusable ({e}), asking again"),
    }
    let retry = format!(
        "{prompt}\nYour previous answer did not follow the required structure or gave a confidence outside 0.0 to 1.0. Answer again.\n"
    );
    let second = judge.complete(&LlmRequest::new(PromptKind::JudgeAction, retry, &images))?;
    raws.push(second.clone());
    let mut j = parse_judgment(&second)?;
    if !(0.0..=1.0).contains(&j.confidence) {
        j.confidence = j.confidence.clamp(0.0, 1.0);
        j.clamped = true;
    }
    Ok((j, raws))
}

/// Indices of the two highest scores; ties go to the earlier index. A single
/// candidate fills both slots.
pub fn select_top2(scores: &[(usize, f64)]) -> Result<(usize, usize)> {
    let mut order: Vec<&(usize, f64)> = scores.iter().collect();
    // partial_cmp so that -0.0 (invalid at zero confidence) ties with 0.0
    order.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or_else(|| b.1.total_cmp(&a.1))
            .then(a.0.cmp(&b.0))
    });
    match order.as_slice() {
        [] => Err(Error::InvalidInput("no scored candidates".into())),
        [only] => Ok((only.0, only.0)),
        [first, second, ..] => Ok((first.0, second.0)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CandidateOutcome {
    Scored {
        score: f64,
        judgment: Judgment,
        predicted: bool,
    },
    Failed {
        stage: String,
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub index: usize,
    pub action: ActionInstruction,
    /// Follow-up actions chained after this one during synthesis.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub chain: Vec<ActionInstruction>,
    #[serde(flatten)]
    pub outcome: CandidateOutcome,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub judge_responses: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub traces: Vec<Trace>,
}

impl CandidateRecord {
    pub fn score(&self) -> Option<f64> {
        match &self.outcome {
            CandidateOutcome::Scored { score, .. } => Some(*score),
            CandidateOutcome::Failed { .. } => None,
        }
    }

    pub fn reason(&self) -> &str {
        match &self.outcome {
            CandidateOutcome::Scored { judgment, .. } => &judgment.reason,
            CandidateOutcome::Failed { .. } => "",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ChooserOutcome {
    /// Only one candidate, so there was nothing to choose.
    Skipped,
    Chosen { slot: u8, reason: String, raw: String },
    /// The chooser's answer was unusable; the higher score was taken.
    Fallback { reason: String, raw: Option<String> },
}

#[derive(Debug, Clone, Serialize)]
pub struct StepResult {
    pub goal: String,
    pub options: ActionOptionSet,
    pub proposer_response: String,
    pub candidates: Vec<CandidateRecord>,
    pub top2: (usize, usize),
    pub chooser: ChooserOutcome,
    pub selected_index: usize,
    pub selected: ActionInstruction,
    /// Final prediction per option, when synthesis succeeded.
    #[serde(skip)]
    pub predictions: Vec<Option<Arc<NextGuiPrediction>>>,
}

impl StepResult {
    pub fn selected_score(&self) -> Option<f64> {
        self.candidates[self.selected_index].score()
    }

    /// Drops wall-clock timings from every embedded trace.
    pub fn without_timings(mut self) -> Self {
        for c in &mut self.candidates {
            c.traces = std::mem::take(&mut c.traces).into_iter().map(Trace::without_timings).collect();
        }
        self
    }
}

/// Parses `Choice: Action 1` / `Action 2` into slot 0 or 1.
pub fn parse_choice(raw: &str) -> Result<(u8, String)> {
    let keys: &[&[&str]] = &[&["reason"], &["choice"]];
    let f = parse::loose_fields(raw, keys);
    let choice = f[1]
        .as_deref()
        .ok_or_else(|| Error::parse("choice", format!("no choice in {:?}", parse::snippet(raw))))?;
    let has1 = choice.contains('1');
    let has2 = choice.contains('2');
    let slot = match (has1, has2) {
        (true, false) => 0,
        (false, true) => 1,
        _ => return Err(Error::parse("choice", format!("ambiguous choice {choice:?}"))),
    };
    Ok((slot, f[0].clone().unwrap_or_default()))
}

/// Receives structured events as a step progresses.
pub trait TraceSink: Send + Sync {
    fn record(&self, event: serde_json::Value);
}

/// Keeps events in memory, in arrival order.
#[derive(Debug, Default)]
pub struct MemorySink(Mutex<Vec<serde_json::Value>>);

impl MemorySink {
    pub fn events(&self) -> Vec<serde_json::Value> {
        self.0.lock().expect("sink lock").clone()
    }
}

impl TraceSink for MemorySink {
    fn record(&self, event: serde_json::Value) {
        self.0.lock().expect("sink lock").push(event);
    }
}

fn is_stop(a: &ActionInstruction) -> bool {
    a.as_str().trim().trim_end_matches('.').eq_ignore_ascii_case("stop")
}

/// The world model plus the three model roles of a step.
#[derive(Clone)]
pub struct Agent {
    pub world_model: WorldModel,
    pub proposer: Arc<dyn LlmBackend>,
    pub judge: Arc<dyn LlmBackend>,
    pub chooser: Arc<dyn LlmBackend>,
    pub config: AgentConfig,
    pub sink: Option<Arc<dyn TraceSink>>,
}

/// Predictions along one chain of actions, the first given and the rest
/// proposed by the agent.
pub struct PredictionChain {
    pub actions: Vec<ActionInstruction>,
    /// One per action; `predictions[i]` is the screen after `actions[i]`.
    pub predictions: Vec<NextGuiPrediction>,
}

impl Agent {
    pub fn new(world_model: WorldModel, llm: Arc<dyn LlmBackend>, config: AgentConfig) -> Self {
        Agent {
            world_model,
            proposer: llm.clone(),
            judge: llm.clone(),
            chooser: llm,
            config,
            sink: None,
        }
    }

    fn emit(&self, event: serde_json::Value) {
        if let Some(s) = &self.sink {
            s.record(event);
        }
    }

    /// Asks the agent model for the action after `previous`, given the
    /// initial screen and the current (predicted) one.
    pub fn next_action(
        &self,
        initial: &GuiImage,
        current: &GuiImage,
        goal: &str,
        previous: &[ActionInstruction],
    ) -> Result<ActionInstruction> {
        let prev: Vec<&str> = previous.iter().map(ActionInstruction::as_str).collect();
        let prompt = format!(
            "{}\nUser Objective: {goal}\nPrevious Action: {}\n",
            PromptKind::NextAction.template(),
            prev.join("; ")
        );
        let raw = self
            .proposer
            .complete(&LlmRequest::new(PromptKind::NextAction, prompt, &[initial, current]))?;
        let line = parse::strip_fences(&raw).lines().map(clean_option_line).find(|l| !l.is_empty()).unwrap_or("");
        ActionInstruction::new(line).map_err(|_| Error::parse("next action", "empty response"))
    }

    /// Predicts the outcome of `action`, then keeps predicting along the
    /// agent's own follow-up actions until `iterations` predictions exist or
    /// the agent says stop.
    pub fn predict_chain(
        &self,
        current: &Screen,
        goal: &str,
        action: &ActionInstruction,
        iterations: usize,
    ) -> Result<PredictionChain> {
        let first = self.world_model.predict_next_gui(current, action)?;
        let mut screen = first.next_screen(current);
        let mut out = PredictionChain {
            actions: vec![action.clone()],
            predictions: vec![first],
        };
        for _ in 1..iterations {
            let next = self
                .next_action(&current.image, &screen.image, goal, &out.actions)
                .stage("next_action")?;
            if is_stop(&next) {
                break;
            }
            let pred = self.world_model.predict_next_gui(&screen, &next)?;
            screen = pred.next_screen(&screen);
            out.actions.push(next);
            out.predictions.push(pred);
        }
        Ok(out)
    }

    fn evaluate_option(
        &self,
        index: usize,
        current: &Screen,
        goal: &str,
        history: &History,
        action: &ActionInstruction,
        iterations: usize,
    ) -> (CandidateRecord, Option<Arc<NextGuiPrediction>>) {
        let mut record = CandidateRecord {
            index,
            action: action.clone(),
            chain: Vec::new(),
            outcome: CandidateOutcome::Failed {
                stage: String::new(),
                error: String::new(),
            },
            judge_responses: Vec::new(),
            traces: Vec::new(),
        };
        let synthesis = self.predict_chain(current, goal, action, iterations);
        let prediction = match synthesis {
            Ok(mut c) => {
                record.chain = c.actions.split_off(1);
                record.traces = c.predictions.iter().map(|p| p.trace.clone()).collect();
                c.predictions.pop().map(Arc::new)
            }
            Err(e) => {
                log::warn!("prediction for option {index} failed: {e}");
                if !self.config.allow_unpredicted {
                    record.outcome = CandidateOutcome::Failed {
                        stage: e.stage().unwrap_or("synthesize_outcomes").to_string(),
                        error: e.to_string(),
                    };
                    return (record, None);
                }
                None
            }
        };
        let input = JudgeInput {
            current,
            predicted: prediction.as_ref().map(|p| &p.rendered),
            action,
            goal,
            history,
            action_space: &self.config.action_space,
        };
        match judge_action(&input, self.judge.as_ref()) {
            Ok((judgment, raws)) => {
                record.judge_responses = raws;
                record.outcome = CandidateOutcome::Scored {
                    score: judgment.score(),
                    judgment,
                    predicted: prediction.is_some(),
                };
            }
            Err(e) => {
                log::warn!("judging option {index} failed: {e}");
                record.outcome = CandidateOutcome::Failed {
                    stage: "judge_action".into(),
                    error: e.to_string(),
                };
            }
        }
        (record, prediction)
    }

    fn final_choice(
        &self,
        current: &Screen,
        goal: &str,
        history: &History,
        candidates: &[CandidateRecord],
        top2: (usize, usize),
    ) -> (usize, ChooserOutcome) {
        if top2.0 == top2.1 {
            return (top2.0, ChooserOutcome::Skipped);
        }
        let (a, b) = (&candidates[top2.0], &candidates[top2.1]);
        let hist = history.render();
        let elems = describe_elements(current);
        let prompt = PromptKind::ChooseAction.render(&[
            ("action options from the dataset", &self.config.action_space),
            ("goal", goal),
            ("history", &hist),
            ("before_elements", &elems),
            ("action_0", a.action.as_str()),
            ("sum_0", a.action.as_str()),
            ("act_re_0", a.reason()),
            ("action_1", b.action.as_str()),
            ("sum_1", b.action.as_str()),
            ("act_re_1", b.reason()),
            ("GUIDANCE", &self.config.guidance),
        ]);
        let raw = prompt.and_then(|p| {
            self.chooser
                .complete(&LlmRequest::new(PromptKind::ChooseAction, p, &[&current.image]))
        });
        let raw = match raw {
            Ok(r) => r,
            Err(e) => {
                log::warn!("chooser failed, taking the higher score: {e}");
                return (top2.0, ChooserOutcome::Fallback { reason: e.to_string(), raw: None });
            }
        };
        match parse_choice(&raw) {
            Ok((slot, reason)) => {
                let idx = if slot == 0 { top2.0 } else { top2.1 };
                (idx, ChooserOutcome::Chosen { slot: slot + 1, reason, raw })
            }
            Err(e) => {
                log::warn!("chooser answer unusable, taking the higher score: {e}");
                (top2.0, ChooserOutcome::Fallback { reason: e.to_string(), raw: Some(raw) })
            }
        }
    }

    /// One decision: propose, predict each option's outcome, judge, take the
    /// top two and let the chooser decide.
    pub fn run_step(&self, current: &Screen, goal: &str, history: &History) -> Result<StepResult> {
        self.rollout(current, goal, history, 1)
    }

    /// Like `run_step`, with each option's outcome predicted `iterations`
    /// steps ahead; only the last prediction is judged.
    pub fn rollout(&self, current: &Screen, goal: &str, history: &History, iterations: usize) -> Result<StepResult> {
        if iterations == 0 {
            return Err(Error::InvalidInput("iterations must be at least 1".into()));
        }
        let (options, proposer_response) =
            generate_action_options(current, goal, history, self.proposer.as_ref(), self.config.n)
                .stage("generate_action_options")?;
        self.emit(json!({"event": "options", "options": options.options}));

        let branches = map_bounded(&options.options, self.config.parallelism, |i, a| {
            let out = self.evaluate_option(i, current, goal, history, a, iterations);
            self.emit(json!({"event": "candidate", "record": out.0}));
            out
        });
        let (candidates, predictions): (Vec<_>, Vec<_>) = branches.into_iter().unzip();

        let scores: Vec<(usize, f64)> = candidates.iter().filter_map(|c| c.score().map(|s| (c.index, s))).collect();
        if scores.is_empty() {
            let first = candidates.iter().find_map(|c| match &c.outcome {
                CandidateOutcome::Failed { stage, error } => Some((stage.clone(), error.clone())),
                _ => None,
            });
            let (stage, error) = first.unwrap_or_default();
            return Err(Error::Backend(format!("every option failed; first failure in {stage}: {error}")))
                .stage("synthesize_outcomes");
        }
        let top2 = select_top2(&scores)?;
        let (selected_index, chooser) = self.final_choice(current, goal, history, &candidates, top2);
        self.emit(json!({"event": "choice", "top2": [top2.0, top2.1], "chooser": chooser, "selected": selected_index}));

        Ok(StepResult {
            goal: goal.to_string(),
            selected: options.options[selected_index].clone(),
            options,
            proposer_response,
            candidates,
            top2,
            chooser,
            selected_index,
            predictions,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{FnLlm, FnStrPredictor};
    use crate::image::{BBox, Rgb, TextBox};
    use crate::render::FontRenderer;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn option_parsing() {
        let s = parse_action_options("click A\nclick B\nscroll down", 3).unwrap();
        assert_eq!(s.options.len(), 3);
        let s = parse_action_options("1. click A\n- click A\n2) click B", 3).unwrap();
        let texts: Vec<_> = s.options.iter().map(|o| o.as_str()).collect();
        assert_eq!(texts, ["click A", "click B"]);
        assert_eq!(s.requested, 3);
        assert!(parse_action_options("\n  \n", 3).is_err());
        assert_eq!(parse_action_options("a\nb\nc\nd", 2).unwrap().options.len(), 2);
    }

    #[test]
    fn judgment_parsing_and_scores() {
        let j = parse_judgment(r#"{Reason: fine, Judgement: "valid", Confidence: 0.8}"#).unwrap();
        assert_eq!((j.verdict, j.confidence, j.score()), (Verdict::Valid, 0.8, 0.8));
        let j = parse_judgment(r#"{"Reason": "no", "Judgment": "invalid", "Confidence": 0.8}"#).unwrap();
        assert_eq!(j.score(), -0.8);
        let j = parse_judgment(r#"{Reason: x, Judgement: "valid", Confidence: 0.0}"#).unwrap();
        assert_eq!(j.score(), 0.0);
        assert!(parse_judgment(r#"{Reason: x, Judgement: "maybe", Confidence: 0.5}"#).is_err());
        assert!(parse_judgment("whatever").is_err());
    }

    fn screen() -> Screen {
        let img = GuiImage::new(40, 40, Rgb([90, 90, 90])).unwrap();
        Screen::new(img, vec![TextBox { bbox: BBox::new(2, 2, 20, 8), text: "Mail".into(), is_static: false }]).unwrap()
    }

    #[test]
    fn judge_requery_then_clamp() {
        let sc = screen();
        let h = History::new(5);
        let a = ActionInstruction::new("tap mail").unwrap();
        let input = JudgeInput { current: &sc, predicted: None, action: &a, goal: "g", history: &h, action_space: "x" };
        let calls = AtomicUsize::new(0);
        let high = FnLlm(|_: &LlmRequest| {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok(r#"{Reason: sure, Judgement: "valid", Confidence: 1.7}"#.to_string())
        });
        let (j, raws) = judge_action(&input, &high).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 2);
        assert_eq!(raws.len(), 2);
        assert!(j.clamped && j.confidence == 1.0);

        let maybe = FnLlm(|_: &LlmRequest| Ok(r#"{Reason: ?, Judgement: "maybe", Confidence: 0.5}"#.to_string()));
        assert!(judge_action(&input, &maybe).is_err());

        let ok = FnLlm(|_: &LlmRequest| Ok(r#"{Reason: ok, Judgement: "valid", Confidence: 0.8}"#.to_string()));
        let (j, raws) = judge_action(&input, &ok).unwrap();
        assert_eq!((j.confidence, j.clamped, raws.len()), (0.8, false, 1));
    }

    #[test]
    fn top2_examples() {
        assert_eq!(select_top2(&[(0, 0.9), (1, 0.85), (2, -0.2)]).unwrap(), (0, 1));
        assert_eq!(select_top2(&[(0, 0.5), (1, 0.5)]).unwrap(), (0, 1));
        assert_eq!(select_top2(&[(2, 0.1)]).unwrap(), (2, 2));
        assert_eq!(select_top2(&[(0, -0.9), (1, -0.1), (2, -0.5)]).unwrap(), (1, 2));
        assert_eq!(select_top2(&[(0, -0.0), (1, 0.0)]).unwrap(), (0, 1));
        assert!(select_top2(&[]).is_err());
    }

    #[test]
    fn choice_parsing() {
        assert_eq!(parse_choice("{Reason: better, Choice: Action 2}").unwrap().0, 1);
        assert_eq!(parse_choice(r#"{"Reason": "r", "Choice": "Action 1"}"#).unwrap().0, 0);
        assert!(parse_choice("I like both").is_err());
        assert!(parse_choice("{Reason: r, Choice: Action 1 or Action 2}").is_err());
    }

    #[test]
    fn history_is_bounded() {
        let mut h = History::new(2);
        assert_eq!(h.render(), " None");
        for i in 0..5 {
            h.push(format!("a{i}"), "");
        }
        assert_eq!(h.len(), 2);
        assert_eq!(h.render(), "\nStep 1: a3\nStep 2: a4");
    }

    fn agent(llm: impl LlmBackend + 'static, wm_calls: Arc<AtomicUsize>, fail_on: Option<&'static str>) -> Agent {
        let pred = FnStrPredictor(move |img: &GuiImage, a: &ActionInstruction| {
            wm_calls.fetch_add(1, Ordering::SeqCst);
            if Some(a.as_str()) == fail_on {
                return Err(Error::ReplayMiss { key: "abc".into() });
            }
            Ok(img.clone())
        });
        let llm: Arc<dyn LlmBackend> = Arc::new(llm);
        let wm = WorldModel::new(Arc::new(pred), llm.clone(), FontRenderer::bundled().shared());
        Agent::new(wm, llm, AgentConfig::default())
    }

    fn scripted(confidences: &'static [(&'static str, &'static str, f64)], choice: &'static str) -> impl LlmBackend {
        FnLlm(move |r: &LlmRequest| {
            Ok(match r.kind {
                PromptKind::ActionOptions => confidences.iter().map(|c| c.0).collect::<Vec<_>>().join("\n"),
                PromptKind::UnchangedSymbols => "['0']".into(),
                PromptKind::JudgeAction => {
                    let (_, v, c) = confidences.iter().find(|c| r.prompt.contains(&format!("latest step: {},", c.0))).unwrap();
                    format!("{{Reason: because {v}, Judgement: \"{v}\", Confidence: {c}}}")
                }
                PromptKind::ChooseAction => choice.into(),
                k => panic!("unexpected {k}"),
            })
        })
    }

    #[test]
    fn step_budget_and_choice() {
        let calls = Arc::new(AtomicUsize::new(0));
        let llm = scripted(&[("open mail", "valid", 0.9), ("go home", "invalid", 0.7), ("scroll down", "valid", 0.6)], "{Reason: r, Choice: Action 2}");
        let r = agent(llm, calls.clone(), None).run_step(&screen(), "read mail", &History::new(20)).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 3);
        assert_eq!(r.top2, (0, 2));
        assert_eq!(r.selected.as_str(), "scroll down");
        assert!(matches!(r.chooser, ChooserOutcome::Chosen { slot: 2, .. }));
    }

    #[test]
    fn all_invalid_still_selects_and_gibberish_falls_back() {
        let calls = Arc::new(AtomicUsize::new(0));
        let llm = scripted(&[("a", "invalid", 0.9), ("b", "invalid", 0.2), ("c", "invalid", 0.5)], "no idea");
        let r = agent(llm, calls, None).run_step(&screen(), "g", &History::new(20)).unwrap();
        assert_eq!(r.top2, (1, 2));
        assert_eq!(r.selected.as_str(), "b");
        assert!(matches!(r.chooser, ChooserOutcome::Fallback { .. }));
    }

    #[test]
    fn failed_option_is_recorded() {
        let calls = Arc::new(AtomicUsize::new(0));
        let llm = scripted(&[("a", "valid", 0.3), ("b", "valid", 0.9), ("c", "valid", 0.5)], "{Reason: r, Choice: Action 1}");
        let r = agent(llm, calls, Some("b")).run_step(&screen(), "g", &History::new(20)).unwrap();
        assert!(matches!(&r.candidates[1].outcome, CandidateOutcome::Failed { stage, .. } if stage == "predict_next_str"));
        assert_eq!(r.top2, (2, 0));
        assert_eq!(r.selected.as_str(), "c");
        assert!(r.predictions[1].is_none());
    }

    #[test]
    fn rollout_chains_and_stops() {
        let calls = Arc::new(AtomicUsize::new(0));
        let next_calls = Arc::new(AtomicUsize::new(0));
        let nc = next_calls.clone();
        let llm = FnLlm(move |r: &LlmRequest| {
            Ok(match r.kind {
                PromptKind::ActionOptions => "a\nb".into(),
                PromptKind::UnchangedSymbols => "['0']".into(),
                PromptKind::NextAction => {
                    nc.fetch_add(1, Ordering::SeqCst);
                    if r.prompt.contains("Previous Action: b") { "Stop.".into() } else { "then c".into() }
                }
                PromptKind::JudgeAction => "{Reason: r, Judgement: \"valid\", Confidence: 0.5}".into(),
                PromptKind::ChooseAction => "{Reason: r, Choice: Action 1}".into(),
                k => panic!("unexpected {k}"),
            })
        });
        let ag = agent(llm, calls.clone(), None);
        assert!(ag.rollout(&screen(), "g", &History::new(20), 0).is_err());
        let r = ag.rollout(&screen(), "g", &History::new(20), 3).unwrap();
        // option a: a, then c, then c again; option b: stops after b
        assert_eq!(calls.load(Ordering::SeqCst), 3 + 1);
        assert_eq!(next_calls.load(Ordering::SeqCst), 2 + 1);
        assert_eq!(r.candidates[0].chain.len(), 2);
        assert!(r.candidates[1].chain.is_empty());
        assert_eq!(r.candidates[0].traces.len(), 3);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn oracle_top2(scores: &[(usize, f64)]) -> (usize, usize) {
            // exhaustive: best = max score, lowest index among maxima; second likewise over the rest
            let best = |skip: Option<usize>| {
                scores
                    .iter()
                    .filter(|(i, _)| Some(*i) != skip)
                    .fold(None::<(usize, f64)>, |acc, &(i, s)| match acc {
                        Some((bi, bs)) if bs > s || (bs == s && bi < i) => Some((bi, bs)),
                        _ => Some((i, s)),
                    })
            };
            let first = best(None).unwrap().0;
            (first, best(Some(first)).map_or(first, |b| b.0))
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(2000))]
            #[test]
            fn sign_rule(valid in any::<bool>(), c in 0.0f64..=1.0) {
                let j = Judgment { reason: String::new(), verdict: if valid { Verdict::Valid } else { Verdict::Invalid }, confidence: c, clamped: false };
                prop_assert_eq!(j.score().abs(), c);
                if c > 0.0 { prop_assert_eq!(j.score() > 0.0, valid); }
            }

            #[test]
            fn top2_matches_oracle(raw in proptest::collection::vec((any::<bool>(), 0u8..=10), 1..8)) {
                let scores: Vec<(usize, f64)> = raw.iter().enumerate()
                    .map(|(i, (v, c))| (i, if *v { *c as f64 / 10.0 } else { -(*c as f64) / 10.0 }))
                    .collect();
                prop_assert_eq!(select_top2(&scores).unwrap(), oracle_top2(&scores));
            }
        }
    }
}
