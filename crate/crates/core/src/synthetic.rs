//! Synthetic screens and deterministic stand-in backends.
//!
//! The stand-ins answer from the request alone, so they can be recorded into
//! cassettes and replayed. They are for fixtures, demos and tests; nothing
//! here models a real app.

use std::ops::RangeInclusive;
use std::sync::OnceLock;

use rand::Rng;
use regex::Regex;
use sha2::{Digest, Sha256};

use crate::backend::{LlmBackend, LlmRequest, StrPredictor};
use crate::error::Result;
use crate::image::{ActionInstruction, BBox, GuiImage, Rgb, TextBox};
use crate::prompts::PromptKind;
use crate::render::{overlay_text, FontRenderer, TextAssignment, TextEntry};
use crate::symbols::{detect_symbols, paint_symbol, Provenance, StrImage, SymbolTable};

const WORDS: &[&str] = &[
    "Inbox", "Settings", "Search", "Send", "Compose", "Wi-Fi", "Battery", "Display", "Cart", "Profile", "Home",
    "Recent", "Photos", "Share", "Download", "Maps", "Alarm", "Notes", "Calendar", "Music",
];

/// Gap kept between boxes so their symbols never touch.
const BOX_GAP: u32 = 3;
const MARGIN: u32 = 2;

/// A screenshot with its ground-truth text boxes.
#[derive(Debug, Clone)]
pub struct SyntheticGui {
    pub image: GuiImage,
    pub boxes: Vec<TextBox>,
}

fn light(rng: &mut impl Rng) -> Rgb {
    Rgb([rng.gen_range(170..=255), rng.gen_range(170..=255), rng.gen_range(170..=255)])
}

fn mid(rng: &mut impl Rng) -> Rgb {
    Rgb([rng.gen_range(60..=200), rng.gen_range(60..=200), rng.gen_range(60..=200)])
}

/// A screen with a header bar, a few coloured blocks and `boxes` text boxes
/// that neither overlap nor touch. Text is drawn with `font`.
pub fn synthetic_gui(
    rng: &mut impl Rng,
    width: u32,
    height: u32,
    boxes: RangeInclusive<usize>,
    font: &FontRenderer,
) -> Result<SyntheticGui> {
    let mut img = GuiImage::new(width, height, light(rng))?;
    img.fill_rect(&BBox::new(0, 0, width, (height / 8).max(1)), mid(rng))?;
    for _ in 0..rng.gen_range(1..=4) {
        let w = rng.gen_range(8..=(width / 3).max(9));
        let h = rng.gen_range(8..=(height / 4).max(9));
        let b = BBox::new(rng.gen_range(0..width.saturating_sub(w).max(1)), rng.gen_range(0..height.saturating_sub(h).max(1)), w, h);
        if b.fits_in(width, height) {
            img.fill_rect(&b, mid(rng))?;
        }
    }

    let want = rng.gen_range(boxes);
    let mut placed: Vec<BBox> = Vec::new();
    let max_w = (width / 2).clamp(16, 140);
    let max_h = (height / 10).clamp(12, 32);
    for _ in 0..want * 200 {
        if placed.len() == want {
            break;
        }
        let w = rng.gen_range(16..=max_w);
        let h = rng.gen_range(12..=max_h);
        if w + 2 * MARGIN > width || h + 2 * MARGIN > height {
            break;
        }
        let b = BBox::new(
            rng.gen_range(MARGIN..=width - w - MARGIN),
            rng.gen_range(MARGIN..=height - h - MARGIN),
            w,
            h,
        );
        let grown = BBox::new(b.x.saturating_sub(BOX_GAP), b.y.saturating_sub(BOX_GAP), b.w + 2 * BOX_GAP, b.h + 2 * BOX_GAP);
        if placed.iter().all(|p| grown.intersection(p).is_none()) {
            placed.push(b);
        }
    }

    let table = SymbolTable::from_boxes(width, height, placed);
    let entries: Vec<TextEntry> = table
        .symbols
        .iter()
        .map(|s| TextEntry {
            id: s.id,
            text: WORDS[rng.gen_range(0..WORDS.len())].to_string(),
            role: String::new(),
        })
        .collect();
    let canvas = StrImage {
        image: img,
        provenance: Provenance::ConstructedFromGui,
    };
    let asg = TextAssignment { entries };
    let image = overlay_text(&canvas, &table, &asg, font)?;
    let boxes = table
        .symbols
        .iter()
        .zip(&asg.entries)
        .map(|(s, e)| TextBox {
            bbox: s.bbox,
            text: e.text.clone(),
            is_static: false,
        })
        .collect();
    Ok(SyntheticGui { image, boxes })
}

fn digest(s: &str) -> [u8; 32] {
    Sha256::digest(s.as_bytes()).into()
}

/// Height of the band that the stand-in predictor leaves untouched.
pub fn header_height(height: u32) -> u32 {
    height / 5
}

/// Keeps the header band, clears the rest and lays out a new list of
/// symbols whose count and widths follow from the action text.
#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticStrPredictor;

impl StrPredictor for SyntheticStrPredictor {
    fn predict(&self, str_image: &GuiImage, action: &ActionInstruction) -> Result<GuiImage> {
        let (w, h) = str_image.dims();
        let top = header_height(h);
        let mut out = str_image.clone();
        let d = digest(action.as_str());
        if h <= top + 8 || w < 24 {
            return Ok(out);
        }
        out.fill_rect(&BBox::new(0, top, w, h - top), Rgb([236, 240, 244]))?;
        let rows = 2 + (d[0] % 3) as u32;
        let pitch = (h - top) / (rows + 1);
        let row_h = pitch.saturating_sub(6).clamp(8, 18);
        for i in 0..rows {
            let y = top + 4 + i * pitch;
            if y + row_h + 2 > h {
                break;
            }
            let icon = BBox::new(2, y, (w / 10).max(4).min(row_h), row_h);
            out.fill_rect(&icon, Rgb([80 + d[1 + i as usize] / 2, 130, 200]))?;
            let x = icon.right() + 4;
            let max_w = w.saturating_sub(x + 2);
            let bw = (max_w * (45 + d[5 + i as usize] as u32 % 50) / 100).max(8).min(max_w);
            if bw >= 8 {
                paint_symbol(&mut out, &BBox::new(x, y, bw, row_h))?;
            }
        }
        Ok(out)
    }
}

fn re(cell: &'static OnceLock<Regex>, pat: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pat).expect("valid regex"))
}

/// Last match, since the context lines follow the template text.
fn capture<'a>(re: &Regex, text: &'a str) -> Option<&'a str> {
    re.captures_iter(text).last().and_then(|c| c.get(1)).map(|m| m.as_str().trim())
}

fn goal_word(goal: &str) -> String {
    goal.split_whitespace()
        .rev()
        .find(|w| w.len() > 2)
        .unwrap_or("item")
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

/// Answers every prompt kind with a well-formed, content-derived response.
///
/// Goals favour options naming the goal's last word; the header band of the
/// predicted STR is reported unchanged; new text is "<Word> <n>" after the
/// action's last word. Follow-up proposals say stop after two actions.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedLlm;

impl ScriptedLlm {
    fn options(prompt: &str) -> String {
        static GOAL: OnceLock<Regex> = OnceLock::new();
        let goal = capture(re(&GOAL, r"goal/request is: (.*)"), prompt).unwrap_or("");
        let w = goal_word(goal);
        [format!("open {w}"), "scroll down".into(), "go back".into(), format!("tap the {w} tab")].join("\n")
    }

    fn judge(prompt: &str) -> String {
        static GOAL: OnceLock<Regex> = OnceLock::new();
        static ACT: OnceLock<Regex> = OnceLock::new();
        let goal = capture(re(&GOAL, r"goal/request is: (.*)"), prompt).unwrap_or("");
        let action = capture(re(&ACT, r"latest step: (.*?), whose semantic"), prompt).unwrap_or("");
        let d = digest(action);
        let conf = 0.55 + (d[0] % 40) as f64 / 100.0;
        if action.contains(&goal_word(goal)) {
            format!("{{Reason: the action moves towards {}, Judgement: \"valid\", Confidence: {conf:.2}}}", goal_word(goal))
        } else {
            format!("{{Reason: the action does not reach the goal, Judgement: \"invalid\", Confidence: {conf:.2}}}")
        }
    }

    fn unchanged(req: &LlmRequest) -> Result<String> {
        let Some(png) = req.images_png.get(1) else {
            return Ok("[]".into());
        };
        let img = GuiImage::decode_png(png)?;
        let top = header_height(img.height());
        let table = detect_symbols(&StrImage {
            image: img,
            provenance: Provenance::PredictedByBackend,
        });
        let ids: Vec<String> = table
            .symbols
            .iter()
            .filter(|s| s.bbox.bottom() <= top)
            .map(|s| format!("'{}'", s.id))
            .collect();
        Ok(format!("[{}]", ids.join(",")))
    }

    fn roles(prompt: &str) -> String {
        static LOC: OnceLock<Regex> = OnceLock::new();
        let items: Vec<String> = re(&LOC, r"'id': (\d+), 'Location'")
            .captures_iter(prompt)
            .map(|c| format!("{{\"id\": {}, \"Role\": \"list entry\"}}", &c[1]))
            .collect();
        format!("{{\"Screen\": {{\"List\": [{}]}}}}", items.join(", "))
    }

    fn texts(prompt: &str) -> String {
        static ID: OnceLock<Regex> = OnceLock::new();
        static ACT: OnceLock<Regex> = OnceLock::new();
        let action = capture(re(&ACT, r"User Instruction: (.*)"), prompt).unwrap_or("");
        let mut word = goal_word(action);
        if let Some(c) = word.get(..1) {
            word = c.to_uppercase() + &word[1..];
        }
        let mut ids: Vec<u32> = re(&ID, r#""id":\s*(\d+)"#)
            .captures_iter(prompt)
            .filter_map(|c| c[1].parse().ok())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        let items: Vec<String> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| format!("{{\"id\": {id}, \"text\": \"{word} {}\"}}", i + 1))
            .collect();
        format!("{{\"Screen\": {{\"List\": [{}]}}}}", items.join(", "))
    }

    fn next_action(prompt: &str) -> String {
        static PREV: OnceLock<Regex> = OnceLock::new();
        let prev = capture(re(&PREV, r"Previous Action: (.*)"), prompt).unwrap_or("");
        let taken = prev.split(';').filter(|s| !s.trim().is_empty()).count();
        if taken >= 2 {
            "Stop.".into()
        } else {
            "scroll down".into()
        }
    }
}

impl LlmBackend for ScriptedLlm {
    fn complete(&self, req: &LlmRequest) -> Result<String> {
        let p = req.prompt.as_str();
        Ok(match req.kind {
            PromptKind::StaticTextFilter => "[]".into(),
            PromptKind::UnchangedSymbols => Self::unchanged(req)?,
            PromptKind::SemanticRoles => Self::roles(p),
            PromptKind::PredictText => Self::texts(p),
            PromptKind::ActionOptions => Self::options(p),
            PromptKind::JudgeAction => Self::judge(p),
            PromptKind::ChooseAction => "{Reason: it is more direct, Choice: Action 1}".into(),
            PromptKind::CommandToInstruction => {
                if p.contains("scroll") {
                    "Scroll down the list.".into()
                } else {
                    "Tap the highlighted item.".into()
                }
            }
            PromptKind::InstructionalAccuracy => "{Reason: the screen follows the instruction, Status: success}".into(),
            PromptKind::ActionReadiness => "{In the right app: yes, Ready for action: yes}".into(),
            PromptKind::NextAction => Self::next_action(p),
            PromptKind::TrajectoryAlignment => "{Reason: same intent, Status: success}".into(),
        })
    }
}
