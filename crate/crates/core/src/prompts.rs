//! Prompt templates shipped as text assets.
//!
//! Placeholders are written `{name}`, where a name is letters, digits,
//! underscores and inner spaces. Braces around anything else (JSON examples,
//! `{Reason: ..., ...}` format hints) are literal text.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every prompt the toolkit sends to a language model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    StaticTextFilter,
    UnchangedSymbols,
    SemanticRoles,
    PredictText,
    ActionOptions,
    JudgeAction,
    ChooseAction,
    CommandToInstruction,
    InstructionalAccuracy,
    ActionReadiness,
    NextAction,
    TrajectoryAlignment,
}

impl PromptKind {
    pub const ALL: [PromptKind; 12] = [
        PromptKind::StaticTextFilter,
        PromptKind::UnchangedSymbols,
        PromptKind::SemanticRoles,
        PromptKind::PredictText,
        PromptKind::ActionOptions,
        PromptKind::JudgeAction,
        PromptKind::ChooseAction,
        PromptKind::CommandToInstruction,
        PromptKind::InstructionalAccuracy,
        PromptKind::ActionReadiness,
        PromptKind::NextAction,
        PromptKind::TrajectoryAlignment,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PromptKind::StaticTextFilter => "static_text_filter",
            PromptKind::UnchangedSymbols => "unchanged_symbols",
            PromptKind::SemanticRoles => "semantic_roles",
            PromptKind::PredictText => "predict_text",
            PromptKind::ActionOptions => "action_options",
            PromptKind::JudgeAction => "judge_action",
            PromptKind::ChooseAction => "choose_action",
            PromptKind::CommandToInstruction => "command_to_instruction",
            PromptKind::InstructionalAccuracy => "instructional_accuracy",
            PromptKind::ActionReadiness => "action_readiness",
            PromptKind::NextAction => "next_action",
            PromptKind::TrajectoryAlignment => "trajectory_alignment",
        }
    }

    pub fn template(self) -> &'static str {
        match self {
            PromptKind::StaticTextFilter => include_str!("../assets/prompts/static_text_filter.txt"),
            PromptKind::UnchangedSymbols => include_str!("../assets/prompts/unchanged_symbols.txt"),
            PromptKind::SemanticRoles => include_str!("../assets/prompts/semantic_roles.txt"),
            PromptKind::PredictText => include_str!("../assets/prompts/predict_text.txt"),
            PromptKind::ActionOptions => include_str!("../assets/prompts/action_options.txt"),
            PromptKind::JudgeAction => include_str!("../assets/prompts/judge_action.txt"),
            PromptKind::ChooseAction => include_str!("../assets/prompts/choose_action.txt"),
            PromptKind::CommandToInstruction => {
                include_str!("../assets/prompts/command_to_instruction.txt")
            }
            PromptKind::InstructionalAccuracy => {
                include_str!("../assets/prompts/instructional_accuracy.txt")
            }
            PromptKind::ActionReadiness => include_str!("../assets/prompts/action_readiness.txt"),
            PromptKind::NextAction => include_str!("../assets/prompts/next_action.txt"),
            PromptKind::TrajectoryAlignment => {
                include_str!("../assets/prompts/trajectory_alignment.txt")
            }
        }
    }

    /// Fills the template's placeholders; every placeholder must be bound and
    /// every binding must be used.
    pub fn render(self, vars: &[(&str, &str)]) -> Result<String> {
        render_template(self.template(), vars)
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Participant instructions for the human preference study, kept for reference.
pub const USER_STUDY_INSTRUCTIONS: &str = include_str!("../assets/prompts/user_study.txt");

/// Default description of the agent's action space, substituted into the
/// judging and choosing templates.
pub const DEFAULT_ACTION_SPACE: &str = r#"- Click/tap on an element on the screen: {"action_type": "click", "index": <target_index>}
- Long press on an element on the screen: {"action_type": "long_press", "index": <target_index>}
- Type text into a text field: {"action_type": "input_text", "text": <text_input>, "index": <target_index>}
- Scroll the screen or a scrollable UI element in one of the four directions: {"action_type": "scroll", "direction": <up, down, left, or right>, "index": <optional_target_index>}
- Open an app: {"action_type": "open_app", "app_name": <name>}
- Navigate to the home screen: {"action_type": "navigate_home"}
- Navigate back: {"action_type": "navigate_back"}
- Wait for the screen to update: {"action_type": "wait"}
- Answer the user's question: {"action_type": "answer", "text": <answer_text>}
- Finish the task: {"action_type": "status", "goal_status": "complete"}"#;

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_ ]*)\}").unwrap())
}

pub fn placeholders(template: &str) -> BTreeSet<String> {
    placeholder_re()
        .captures_iter(template)
        .map(|c| c[1].to_string())
        .collect()
}

pub fn render_template(template: &str, vars: &[(&str, &str)]) -> Result<String> {
    let wanted = placeholders(template);
    for (name, _) in vars {
        if !wanted.contains(*name) {
            return Err(Error::InvalidInput(format!(
                "template has no placeholder {{{name}}}"
            )));
        }
    }
    let mut missing = Vec::new();
    let out = placeholder_re().replace_all(template, |c: &regex::Captures| {
        match vars.iter().find(|(n, _)| *n == &c[1]) {
            Some((_, v)) => v.to_string(),
            None => {
                missing.push(c[1].to_string());
                c[0].to_string()
            }
        }
    });
    if !missing.is_empty() {
        return Err(Error::InvalidInput(format!(
            "unbound template placeholders: {}",
            missing.join(", ")
        )));
    }
    Ok(out.into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placeholder_sets() {
        let judge = placeholders(PromptKind::JudgeAction.template());
        let expect: BTreeSet<String> = ["action options from the dataset", "goal", "history", "action", "sum", "before_elements"]
            .into_iter()
            .map(String::from)
            .collect();
        assert_eq!(judge, expect);

        let choose = placeholders(PromptKind::ChooseAction.template());
        for p in ["action_0", "sum_0", "act_re_0", "action_1", "sum_1", "act_re_1", "GUIDANCE"] {
            assert!(choose.contains(p), "{p}");
        }
        for kind in [
            PromptKind::UnchangedSymbols,
            PromptKind::SemanticRoles,
            PromptKind::PredictText,
            PromptKind::CommandToInstruction,
            PromptKind::InstructionalAccuracy,
            PromptKind::ActionReadiness,
            PromptKind::NextAction,
            PromptKind::TrajectoryAlignment,
            PromptKind::StaticTextFilter,
        ] {
            assert!(placeholders(kind.template()).is_empty(), "{kind}");
        }
    }

    #[test]
    fn render_binds_and_rejects() {
        let t = "goal={goal} json={\"a\": 1} fmt={Reason: ..., x}";
        assert_eq!(
            render_template(t, &[("goal", "send mail")]).unwrap(),
            "goal=send mail json={\"a\": 1} fmt={Reason: ..., x}"
        );
        assert!(render_template(t, &[]).is_err());
        assert!(render_template(t, &[("goal", "g"), ("other", "x")]).is_err());
    }

    #[test]
    fn templates_keep_format_hints() {
        assert!(PromptKind::JudgeAction
            .template()
            .contains(r#"{Reason: ..., Judgement: "valid" or "invalid", Confidence: ...}"#));
        assert!(PromptKind::UnchangedSymbols.template().contains("['id1','id2',...]"));
        assert!(PromptKind::CommandToInstruction
            .template()
            .contains("please return an empty string as \"\""));
    }
}
