//! Next-screen prediction: predict the next STR with a backend, then recover
//! its text with three model queries and render it.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::backend::{LlmBackend, LlmRequest, StrPredictor};
use crate::error::{Error, Result, StageExt};
use crate::image::{ActionInstruction, GuiImage, TextBox};
use crate::parse;
use crate::prompts::PromptKind;
use crate::render::{overlay_id_labels, overlay_text, FontRenderer, TextAssignment, TextEntry};
use crate::symbols::{detect_symbols, filter_static_text, symbolize, Provenance, StrImage, SymbolTable};

pub const UNKNOWN_ROLE: &str = "unknown";

/// A screenshot with its OCR text.
#[derive(Debug, Clone, PartialEq)]
pub struct Screen {
    pub image: GuiImage,
    pub text_boxes: Vec<TextBox>,
}

impl Screen {
    pub fn new(image: GuiImage, text_boxes: Vec<TextBox>) -> Result<Self> {
        for b in &text_boxes {
            image.check_box(&b.bbox)?;
        }
        Ok(Screen { image, text_boxes })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleEntry {
    pub id: u32,
    pub window: String,
    pub category: String,
    pub role: String,
}

/// Semantic roles of symbols, grouped by window and category.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleMap {
    pub entries: Vec<RoleEntry>,
}

impl RoleMap {
    pub fn get(&self, id: u32) -> Option<&RoleEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn ids(&self) -> BTreeSet<u32> {
        self.entries.iter().map(|e| e.id).collect()
    }

    /// The nested `{window: {category: [{"id", "Role"}]}}` form used in prompts.
    pub fn to_nested_json(&self) -> Value {
        let mut windows: Map<String, Value> = Map::new();
        for e in &self.entries {
            let cats = windows
                .entry(e.window.clone())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("window is an object");
            cats.entry(e.category.clone())
                .or_insert_with(|| Value::Array(Vec::new()))
                .as_array_mut()
                .expect("category is a list")
                .push(json!({"id": e.id, "Role": e.role}));
        }
        Value::Object(windows)
    }
}

/// One model exchange made by a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub responses: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub stages: Vec<StageRecord>,
    /// Symbols the model never supplied text for; they stay as placeholders.
    pub unresolved: Vec<u32>,
}

impl Trace {
    fn push(&mut self, stage: &str, started: Instant, responses: Vec<String>, notes: Vec<String>) {
        self.stages.push(StageRecord {
            stage: stage.to_string(),
            elapsed_ms: Some(started.elapsed().as_secs_f64() * 1e3),
            responses,
            notes,
        });
    }

    /// Drops wall-clock timings so traces from replayed runs compare equal.
    pub fn without_timings(mut self) -> Self {
        for s in &mut self.stages {
            s.elapsed_ms = None;
        }
        self
    }
}

#[derive(Debug, Clone)]
pub struct NextGuiPrediction {
    /// The current screen as an STR, as sent to the STR predictor.
    pub str_current: StrImage,
    pub str_next: StrImage,
    pub str_next_labeled: StrImage,
    pub table: SymbolTable,
    pub unchanged_ids: BTreeSet<u32>,
    pub roles: RoleMap,
    pub assignment: TextAssignment,
    pub rendered: GuiImage,
    pub trace: Trace,
}

impl NextGuiPrediction {
    /// The predicted screen as input for a further prediction. Text of
    /// unchanged symbols is taken from the best-overlapping box of `current`.
    pub fn next_screen(&self, current: &Screen) -> Screen {
        let texts = self.assignment.texts();
        let mut boxes = Vec::new();
        for s in &self.table.symbols {
            let text = if let Some(t) = texts.get(&s.id) {
                Some(t.to_string())
            } else if self.unchanged_ids.contains(&s.id) {
                current
                    .text_boxes
                    .iter()
                    .map(|b| (b.bbox.iou(&s.bbox), b))
                    .filter(|(iou, _)| *iou > 0.0)
                    .max_by(|a, b| a.0.total_cmp(&b.0))
                    .map(|(_, b)| b.text.clone())
            } else {
                None
            };
            if let Some(text) = text.filter(|t| !t.trim().is_empty()) {
                boxes.push(TextBox {
                    bbox: s.bbox,
                    text,
                    is_static: false,
                });
            }
        }
        Screen {
            image: self.rendered.clone(),
            text_boxes: boxes,
        }
    }

    /// Counts that must add up to the table size.
    pub fn coverage(&self) -> (usize, usize, usize) {
        (self.unchanged_ids.len(), self.assignment.entries.len(), self.trace.unresolved.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldModelOptions {
    /// Ask the model which OCR boxes are static before masking. When off,
    /// the boxes' own `is_static` flags are used.
    pub filter_static_text: bool,
    /// On static-filter failure, mask everything instead of failing.
    pub static_filter_fallback: bool,
}

impl Default for WorldModelOptions {
    fn default() -> Self {
        WorldModelOptions {
            filter_static_text: false,
            static_filter_fallback: true,
        }
    }
}

/// The predicted-next-screen function, with its backends.
#[derive(Clone)]
pub struct WorldModel {
    pub str_predictor: Arc<dyn StrPredictor>,
    pub llm: Arc<dyn LlmBackend>,
    pub font: Arc<FontRenderer>,
    pub options: WorldModelOptions,
}

/// Runs the STR backend and marks its output as predicted.
pub fn predict_next_str(str_k: &StrImage, a: &ActionInstruction, backend: &dyn StrPredictor) -> Result<StrImage> {
    let image = backend.predict(&str_k.image, a)?;
    if image.dims() != str_k.image.dims() {
        return Err(Error::Backend(format!(
            "STR predictor returned {}x{} for a {}x{} input",
            image.width(),
            image.height(),
            str_k.image.width(),
            str_k.image.height()
        )));
    }
    Ok(StrImage {
        image,
        provenance: Provenance::PredictedByBackend,
    })
}

/// Raw model output plus what was made of it.
#[derive(Debug, Clone)]
pub struct Queried<T> {
    pub value: T,
    pub responses: Vec<String>,
    pub notes: Vec<String>,
}

/// Asks which symbols keep their content; ids not in `table` are dropped.
pub fn find_unchanged_symbols(
    x_k: &GuiImage,
    str_id_next: &StrImage,
    a: &ActionInstruction,
    table: &SymbolTable,
    llm: &dyn LlmBackend,
) -> Result<Queried<BTreeSet<u32>>> {
    let prompt = format!("{}\n\nUse action: {}\n", PromptKind::UnchangedSymbols.template(), a);
    let req = LlmRequest::new(PromptKind::UnchangedSymbols, prompt, &[x_k, &str_id_next.image]);
    let raw = llm.complete(&req)?;
    let ids = parse::parse_id_list(&raw, "unchanged symbol ids")?;
    let known = table.ids();
    let mut notes = Vec::new();
    let mut out = BTreeSet::new();
    for id in ids {
        if known.contains(&id) {
            out.insert(id);
        } else {
            log::warn!("dropping unknown symbol id {id} from unchanged list");
            notes.push(format!("dropped unknown id {id}"));
        }
    }
    Ok(Queried {
        value: out,
        responses: vec![raw],
        notes,
    })
}

/// Replaces each listed symbol's region with the same region of `x_k`.
pub fn copy_unchanged_pixels(
    x_k: &GuiImage,
    str_next: &StrImage,
    table: &SymbolTable,
    ids: &BTreeSet<u32>,
) -> Result<StrImage> {
    if x_k.dims() != str_next.image.dims() {
        return Err(Error::InvalidInput("current screen and STR differ in size".into()));
    }
    let mut image = str_next.image.clone();
    for &id in ids {
        let s = table.get(id).ok_or(Error::UnknownSymbol(id))?;
        image.copy_region_from(x_k, &s.bbox)?;
    }
    Ok(StrImage {
        image,
        provenance: str_next.provenance,
    })
}

/// Walks any nesting of objects and lists, collecting objects that carry an
/// `id` key together with the two enclosing object keys.
fn collect_items(v: &Value, path: &mut Vec<String>, out: &mut Vec<(Vec<String>, Map<String, Value>)>) {
    match v {
        Value::Object(obj) => {
            if parse::get_ci(obj, "id").is_some() {
                out.push((path.clone(), obj.clone()));
                return;
            }
            for (k, child) in obj {
                path.push(k.trim().to_string());
                collect_items(child, path, out);
                path.pop();
            }
        }
        Value::Array(items) => {
            for item in items {
                collect_items(item, path, out);
            }
        }
        _ => {}
    }
}

fn field_str(obj: &Map<String, Value>, key: &str) -> Option<String> {
    parse::get_ci(obj, key).map(|v| match v {
        Value::String(s) => s.trim().to_string(),
        Value::Null => String::new(),
        other => other.to_string(),
    })
}

fn parse_roles(raw: &str, wanted: &BTreeSet<u32>, notes: &mut Vec<String>) -> Result<Vec<RoleEntry>> {
    let v = parse::parse_json(raw, "semantic roles")?;
    if !v.is_object() && !v.is_array() {
        return Err(Error::parse("semantic roles", "expected a JSON structure"));
    }
    let mut items = Vec::new();
    collect_items(&v, &mut Vec::new(), &mut items);
    let mut out: Vec<RoleEntry> = Vec::new();
    for (path, obj) in items {
        let Some(id) = parse::get_ci(&obj, "id").and_then(parse::value_to_id) else {
            notes.push("ignored item without a numeric id".into());
            continue;
        };
        if !wanted.contains(&id) {
            log::warn!("dropping role for unexpected symbol id {id}");
            notes.push(format!("dropped unexpected id {id}"));
            continue;
        }
        if out.iter().any(|e| e.id == id) {
            log::warn!("duplicate role for symbol id {id}, keeping the first");
            notes.push(format!("duplicate id {id}"));
            continue;
        }
        out.push(RoleEntry {
            id,
            window: path.first().cloned().unwrap_or_default(),
            category: path.get(1).cloned().unwrap_or_default(),
            role: field_str(&obj, "role").unwrap_or_else(|| UNKNOWN_ROLE.to_string()),
        });
    }
    Ok(out)
}

fn missing_note(missing: &BTreeSet<u32>) -> String {
    let ids: Vec<String> = missing.iter().map(u32::to_string).collect();
    format!(
        "\nYour previous answer left out these box ids: [{}]. Return the complete structure again, including every box in the box location list.\n",
        ids.join(", ")
    )
}

/// Asks for the window, category and role of every symbol in `ids`. Ids
/// still missing after one corrective query get the role "unknown".
pub fn infer_semantic_roles(
    x_k: &GuiImage,
    str_id_next: &StrImage,
    a: &ActionInstruction,
    table: &SymbolTable,
    ids: &BTreeSet<u32>,
    llm: &dyn LlmBackend,
) -> Result<Queried<RoleMap>> {
    let base = format!(
        "{}\nUser Action: {}\nBox locations: {}\nUI_size: [{}, {}]\n",
        PromptKind::SemanticRoles.template(),
        a,
        table.describe_locations(ids),
        table.width,
        table.height
    );
    let images = [x_k, &str_id_next.image];
    let mut notes = Vec::new();
    let mut responses = Vec::new();
    let raw = llm.complete(&LlmRequest::new(PromptKind::SemanticRoles, base.clone(), &images))?;
    let mut entries = parse_roles(&raw, ids, &mut notes)?;
    responses.push(raw);

    let have: BTreeSet<u32> = entries.iter().map(|e| e.id).collect();
    let missing: BTreeSet<u32> = ids.difference(&have).copied().collect();
    if !missing.is_empty() {
        let prompt = format!("{base}{}", missing_note(&missing));
        let raw = llm.complete(&LlmRequest::new(PromptKind::SemanticRoles, prompt, &images))?;
        for e in parse_roles(&raw, &missing, &mut notes)? {
            if !entries.iter().any(|x| x.id == e.id) {
                entries.push(e);
            }
        }
        responses.push(raw);
        for &id in &missing {
            if !entries.iter().any(|e| e.id == id) {
                notes.push(format!("id {id} has no role after re-query"));
                entries.push(RoleEntry {
                    id,
                    window: String::new(),
                    category: String::new(),
                    role: UNKNOWN_ROLE.to_string(),
                });
            }
        }
    }
    entries.sort_by_key(|e| e.id);
    Ok(Queried {
        value: RoleMap { entries },
        responses,
        notes,
    })
}

fn parse_texts(raw: &str, wanted: &BTreeSet<u32>, notes: &mut Vec<String>) -> Result<BTreeMap<u32, TextEntry>> {
    let v = parse::parse_json(raw, "predicted text")?;
    let mut items = Vec::new();
    collect_items(&v, &mut Vec::new(), &mut items);
    let mut out = BTreeMap::new();
    for (_, obj) in items {
        let Some(id) = parse::get_ci(&obj, "id").and_then(parse::value_to_id) else {
            continue;
        };
        if !wanted.contains(&id) {
            notes.push(format!("dropped unexpected id {id}"));
            continue;
        }
        let Some(text) = field_str(&obj, "text") else {
            notes.push(format!("id {id} has no text field"));
            continue;
        };
        if out.contains_key(&id) {
            notes.push(format!("duplicate id {id}"));
            continue;
        }
        out.insert(
            id,
            TextEntry {
                id,
                text: parse::sanitize_text(&text),
                role: field_str(&obj, "role").unwrap_or_default(),
            },
        );
    }
    Ok(out)
}

/// Text for every symbol in `roles`, plus the ids the model never answered
/// for (after one corrective query).
pub fn predict_text(
    x_k: &GuiImage,
    str_id_next: &StrImage,
    a: &ActionInstruction,
    roles: &RoleMap,
    llm: &dyn LlmBackend,
) -> Result<Queried<(TextAssignment, Vec<u32>)>> {
    let base = format!(
        "{}\nUser Instruction: {}\nSemantics for the masks in Next UI screenshot: {}\n",
        PromptKind::PredictText.template(),
        a,
        roles.to_nested_json()
    );
    let wanted = roles.ids();
    let images = [x_k, &str_id_next.image];
    let mut notes = Vec::new();
    let mut responses = Vec::new();
    let raw = llm.complete(&LlmRequest::new(PromptKind::PredictText, base.clone(), &images))?;
    let mut got = parse_texts(&raw, &wanted, &mut notes)?;
    responses.push(raw);

    let missing: BTreeSet<u32> = wanted.iter().filter(|id| !got.contains_key(id)).copied().collect();
    if !missing.is_empty() {
        let prompt = format!("{base}{}", missing_note(&missing));
        let raw = llm.complete(&LlmRequest::new(PromptKind::PredictText, prompt, &images))?;
        for (id, e) in parse_texts(&raw, &missing, &mut notes)? {
            got.entry(id).or_insert(e);
        }
        responses.push(raw);
    }
    let unresolved: Vec<u32> = wanted.iter().filter(|id| !got.contains_key(id)).copied().collect();
    Ok(Queried {
        value: (
            TextAssignment {
                entries: got.into_values().collect(),
            },
            unresolved,
        ),
        responses,
        notes,
    })
}

impl WorldModel {
    pub fn new(str_predictor: Arc<dyn StrPredictor>, llm: Arc<dyn LlmBackend>, font: Arc<FontRenderer>) -> Self {
        WorldModel {
            str_predictor,
            llm,
            font,
            options: WorldModelOptions::default(),
        }
    }

    /// Predicts the screen that follows `action` on `current`. Errors carry
    /// the name of the stage that failed.
    pub fn predict_next_gui(&self, current: &Screen, action: &ActionInstruction) -> Result<NextGuiPrediction> {
        let x_k = &current.image;
        let llm: &dyn LlmBackend = self.llm.as_ref();
        let mut trace = Trace::default();

        let t = Instant::now();
        let (str_current, mut responses, mut notes) = (|| {
            let mut responses = Vec::new();
            let mut notes = Vec::new();
            let boxes = if self.options.filter_static_text {
                let f = filter_static_text(x_k, &current.text_boxes, llm, self.options.static_filter_fallback)?;
                responses.extend(f.raw_response);
                notes.push(format!("static filter: {:?}", f.provenance));
                f.dynamic
            } else {
                current.text_boxes.clone()
            };
            let (s, _) = symbolize(x_k, &boxes)?;
            Ok::<_, Error>((s, responses, notes))
        })()
        .stage("symbolize")?;
        trace.push("symbolize", t, std::mem::take(&mut responses), std::mem::take(&mut notes));

        let t = Instant::now();
        let str_next = predict_next_str(&str_current, action, self.str_predictor.as_ref()).stage("predict_next_str")?;
        trace.push("predict_next_str", t, vec![], vec![]);

        let t = Instant::now();
        let table = detect_symbols(&str_next);
        trace.push("detect_symbols", t, vec![], vec![format!("{} symbols", table.len())]);

        let t = Instant::now();
        let labeled = overlay_id_labels(&str_next, &table, &self.font).stage("overlay_id_labels")?;
        trace.push("overlay_id_labels", t, vec![], vec![]);

        let t = Instant::now();
        let unchanged = if table.is_empty() {
            Queried {
                value: BTreeSet::new(),
                responses: vec![],
                notes: vec!["no symbols, query skipped".into()],
            }
        } else {
            find_unchanged_symbols(x_k, &labeled, action, &table, llm).stage("find_unchanged_symbols")?
        };
        trace.push("find_unchanged_symbols", t, unchanged.responses, unchanged.notes);
        let unchanged_ids = unchanged.value;

        let t = Instant::now();
        let str_filled = copy_unchanged_pixels(x_k, &str_next, &table, &unchanged_ids).stage("copy_unchanged_pixels")?;
        let labeled_filled =
            copy_unchanged_pixels(x_k, &labeled, &table, &unchanged_ids).stage("copy_unchanged_pixels")?;
        trace.push("copy_unchanged_pixels", t, vec![], vec![]);

        let remaining: BTreeSet<u32> = table.ids().difference(&unchanged_ids).copied().collect();

        let t = Instant::now();
        let roles = if remaining.is_empty() {
            Queried {
                value: RoleMap::default(),
                responses: vec![],
                notes: vec!["nothing to describe, query skipped".into()],
            }
        } else {
            infer_semantic_roles(x_k, &labeled_filled, action, &table, &remaining, llm).stage("infer_semantic_roles")?
        };
        trace.push("infer_semantic_roles", t, roles.responses, roles.notes);
        let roles = roles.value;

        let t = Instant::now();
        let (assignment, unresolved) = if remaining.is_empty() {
            trace.push("predict_text", t, vec![], vec!["nothing to predict, query skipped".into()]);
            (TextAssignment::default(), Vec::new())
        } else {
            let q = predict_text(x_k, &labeled_filled, action, &roles, llm).stage("predict_text")?;
            trace.push("predict_text", t, q.responses, q.notes);
            q.value
        };
        trace.unresolved = unresolved;

        let t = Instant::now();
        let rendered = overlay_text(&str_filled, &table, &assignment, &self.font).stage("overlay_text")?;
        trace.push("overlay_text", t, vec![], vec![]);

        Ok(NextGuiPrediction {
            str_current,
            str_next: str_filled,
            str_next_labeled: labeled_filled,
            table,
            unchanged_ids,
            roles,
            assignment,
            rendered,
            trace,
        })
    }
}
