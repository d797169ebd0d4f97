//! Building the STR training set from recorded episodes.
//!
//! Episodes come from a JSONL manifest, one episode per line:
//!
//! ```text
//! {"episode_id": "e1", "source": "aitw", "app_name": "Gmail", "goal": "...",
//!  "steps": [{"image": "e1/0.png", "ocr": "e1/0.jsonl",
//!             "command": {"kind": "click", "x": 0.5, "y": 0.2},
//!             "instruction": "tap compose"}]}
//! ```
//!
//! Paths are relative to the manifest's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{LlmBackend, LlmRequest};
use crate::error::{Error, Result};
use crate::image::{ActionCommand, ActionInstruction, Episode, EpisodeStep, GuiImage, Split};
use crate::parallel::map_bounded;
use crate::parse;
use crate::prompts::PromptKind;
use crate::symbols::{filter_static_text, load_ocr_boxes, symbolize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    AndroidControl,
    Aitw,
}

#[derive(Debug, Clone, Deserialize)]
struct StepRecord {
    image: PathBuf,
    #[serde(default)]
    ocr: Option<PathBuf>,
    #[serde(default)]
    command: Option<ActionCommand>,
    #[serde(default)]
    instruction: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
struct EpisodeRecord {
    episode_id: String,
    source: Source,
    app_name: String,
    goal: String,
    steps: Vec<StepRecord>,
}

/// Lowercased, trimmed app name.
pub fn normalize_app_name(name: &str) -> String {
    name.trim().to_lowercase()
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub episodes: Vec<(Source, Episode)>,
    /// (episode id, reason) for every episode left out.
    pub skipped: Vec<(String, String)>,
}

fn load_episode(rec: &EpisodeRecord, base: &Path) -> Result<Episode> {
    let mut steps = Vec::with_capacity(rec.steps.len());
    for (i, s) in rec.steps.iter().enumerate() {
        let image = GuiImage::load(base.join(&s.image))?;
        let text_boxes = match &s.ocr {
            Some(p) => {
                let path = base.join(p);
                let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
                load_ocr_boxes(BufReader::new(f), image.width(), image.height())?
            }
            None => Vec::new(),
        };
        if let Some(c) = &s.command {
            c.validate()?;
        }
        let instruction = match s.instruction.as_deref().map(str::trim) {
            Some(t) if !t.is_empty() => Some(ActionInstruction::new(t)?),
            _ => None,
        };
        if instruction.is_some() && i + 1 == rec.steps.len() {
            log::debug!("episode {}: instruction on the last frame ignored", rec.episode_id);
        }
        steps.push(EpisodeStep {
            image,
            text_boxes,
            command: s.command.clone(),
            instruction: instruction.filter(|_| i + 1 < rec.steps.len()),
        });
    }
    let ep = Episode {
        id: rec.episode_id.clone(),
        app_name: normalize_app_name(&rec.app_name),
        goal: rec.goal.trim().to_string(),
        steps,
        split: None,
    };
    ep.validate()?;
    Ok(ep)
}

/// Reads a manifest. Episodes with missing or inconsistent files are skipped
/// and reported; a malformed manifest line is an error.
pub fn ingest(manifest: &Path) -> Result<Ingested> {
    let f = fs::File::open(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(manifest, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EpisodeRecord = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidInput(format!("{} line {}: {e}", manifest.display(), n + 1)))?;
        records.push(rec);
    }
    let mut seen = BTreeSet::new();
    let mut episodes = Vec::new();
    let mut skipped = Vec::new();
    for rec in &records {
        if !seen.insert(rec.episode_id.clone()) {
            skipped.push((rec.episode_id.clone(), "duplicate episode id".to_string()));
            continue;
        }
        match load_episode(rec, base) {
            Ok(ep) => episodes.push((rec.source, ep)),
            Err(e) => {
                log::warn!("skipping episode {}: {e}", rec.episode_id);
                skipped.push((rec.episode_id.clone(), e.to_string()));
            }
        }
    }
    Ok(Ingested { episodes, skipped })
}

fn percent_pair(p: (f64, f64)) -> String {
    format!("[{:.1}, {:.1}]", p.0 * 100.0, p.1 * 100.0)
}

/// Turns a logged action command into a plain-language instruction. `None`
/// means the model returned an empty string: the screens are identical or
/// not one step apart.
pub fn command_to_instruction(
    x_k: &GuiImage,
    x_k1: &GuiImage,
    goal: &str,
    cmd: &ActionCommand,
    llm: &dyn LlmBackend,
) -> Result<Option<ActionInstruction>> {
    let (touch, lift) = match cmd.touch_lift() {
        Some((t, l)) => (percent_pair(t), percent_pair(l)),
        None => ("n/a".to_string(), "n/a".to_string()),
    };
    let prompt = format!(
        "{}\nGoal: {goal}\ntouch_xy: {touch}\nlift_xy: {lift}\nAction command: {}\n",
        PromptKind::CommandToInstruction.template(),
        serde_json::to_string(cmd)?
    );
    let raw = llm.complete(&LlmRequest::new(PromptKind::CommandToInstruction, prompt, &[x_k, x_k1]))?;
    let text = parse::strip_fences(&raw).trim();
    if text.starts_with('{') || text.starts_with('[') {
        return Err(Error::parse("instruction", format!("expected plain text, got {:?}", parse::snippet(&raw))));
    }
    let line = text.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let unquoted = line.trim_matches(['"', '\'', '\u{201c}', '\u{201d}']).trim();
    if unquoted.is_empty() {
        return Ok(None);
    }
    Ok(Some(ActionInstruction::new(unquoted)?))
}

/// Fills in missing instructions from commands. Returns how many steps were
/// converted and how many came back empty.
pub fn convert_instructions(episodes: &mut [Episode], llm: &dyn LlmBackend, parallelism: usize) -> Result<(usize, usize)> {
    let jobs: Vec<(usize, usize)> = episodes
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| {
            (0..ep.steps.len().saturating_sub(1))
                .filter(move |&k| ep.steps[k].instruction.is_none() && ep.steps[k].command.is_some())
                .map(move |k| (e, k))
        })
        .collect();
    let eps: &[Episode] = episodes;
    let results = map_bounded(&jobs, parallelism, |_, &(e, k)| {
        let ep = &eps[e];
        let cmd = ep.steps[k].command.as_ref().expect("filtered on command");
        command_to_instruction(&ep.steps[k].image, &ep.steps[k + 1].image, &ep.goal, cmd, llm)
    });
    let mut converted = 0;
    let mut empty = 0;
    for (&(e, k), r) in jobs.iter().zip(results) {
        match r? {
            Some(a) => {
                episodes[e].steps[k].instruction = Some(a);
                converted += 1;
            }
            None => empty += 1,
        }
    }
    Ok((converted, empty))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub apps: usize,
    pub episodes: usize,
    pub images: usize,
    pub instructions: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub train: SplitCounts,
    pub val: SplitCounts,
    pub test: SplitCounts,
    pub all: SplitCounts,
}

impl SplitSummary {
    pub fn get(&self, split: Split) -> &SplitCounts {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Episode, image and instruction counts of the splits add up to the totals.
    pub fn is_consistent(&self) -> bool {
        let s = [&self.train, &self.val, &self.test];
        s.iter().map(|c| c.episodes).sum::<usize>() == self.all.episodes
            && s.iter().map(|c| c.images).sum::<usize>() == self.all.images
            && s.iter().map(|c| c.instructions).sum::<usize>() == self.all.instructions
    }
}

/// Published per-split counts of the reference dataset (train, val, test, all).
pub const REFERENCE_SPLIT_COUNTS: [SplitCounts; 4] = [
    SplitCounts { apps: 19, episodes: 2853, images: 19010, instructions: 14852 },
    SplitCounts { apps: 19, episodes: 349, images: 2290, instructions: 1774 },
    SplitCounts { apps: 19, episodes: 348, images: 2320, instructions: 1824 },
    SplitCounts { apps: 19, episodes: 3550, images: 23620, instructions: 18450 },
];

fn counts_of<'a>(eps: impl Iterator<Item = &'a Episode>) -> SplitCounts {
    let mut apps = BTreeSet::new();
    let mut c = SplitCounts::default();
    for ep in eps {
        apps.insert(ep.app_name.as_str());
        c.episodes += 1;
        c.images += ep.steps.len();
        c.instructions += ep.instruction_count();
    }
    c.apps = apps.len();
    c
}

pub fn summarize_splits(episodes: &[Episode]) -> SplitSummary {
    let of = |s: Split| counts_of(episodes.iter().filter(|e| e.split == Some(s)));
    SplitSummary {
        train: of(Split::Train),
        val: of(Split::Val),
        test: of(Split::Test),
        all: counts_of(episodes.iter()),
    }
}

/// Splits `n` items by `ratios` using largest remainders; ties go to the
/// earlier split.
pub fn apportion(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let quotas = ratios.map(|r| r * n as f64);
    let mut counts = quotas.map(|q| q.floor() as usize);
    let mut left = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts
}

/// Assigns every episode to train/val/test, stratified by app, and reports
/// the counts. The same seed always gives the same assignment.
pub fn build_splits(mut episodes: Vec<Episode>, ratios: [f64; 3], seed: u64) -> Result<(SplitSummary, Vec<Episode>)> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    episodes.sort_by(|a, b| a.app_name.cmp(&b.app_name).then(a.id.cmp(&b.id)));
    let mut by_app: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, ep) in episodes.iter().enumerate() {
        by_app.entry(ep.app_name.clone()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for idx in by_app.values_mut() {
        idx.shuffle(&mut rng);
        let [tr, va, _] = apportion(idx.len(), ratios);
        for (pos, &i) in idx.iter().enumerate() {
            episodes[i].split = Some(if pos < tr {
                Split::Train
            } else if pos < tr + va {
                Split::Val
            } else {
                Split::Test
            });
        }
    }
    Ok((summarize_splits(&episodes), episodes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AppCategory {
    Leisure,
    Work,
    System,
}

#[derive(Debug, Deserialize)]
struct CategoryFile {
    leisure: Vec<String>,
    work: Vec<String>,
    system: Vec<String>,
}

/// App names per category, as shipped in `assets/app_categories.json`.
pub fn app_categories() -> &'static BTreeMap<AppCategory, Vec<String>> {
    static MAP: OnceLock<BTreeMap<AppCategory, Vec<String>>> = OnceLock::new();
    MAP.get_or_init(|| {
        let f: CategoryFile =
            serde_json::from_str(include_str!("../assets/app_categories.json")).expect("category asset parses");
        BTreeMap::from([
            (AppCategory::Leisure, f.leisure),
            (AppCategory::Work, f.work),
            (AppCategory::System, f.system),
        ])
    })
}

impl PartialOrd for AppCategory {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for AppCategory {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (*self as u8).cmp(&(*other as u8))
    }
}

pub fn category_of(app_name: &str) -> Option<AppCategory> {
    let name = normalize_app_name(app_name);
    app_categories()
        .iter()
        .find(|(_, apps)| apps.iter().any(|a| normalize_app_name(a) == name))
        .map(|(c, _)| *c)
}

/// One training pair as laid out on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrPairRecord {
    pub step: usize,
    pub instruction: ActionInstruction,
    pub str: String,
    pub next_str: String,
}

/// Step indices `k` that form a pair (k, k+1) with a usable instruction.
pub fn pair_steps(ep: &Episode) -> Vec<usize> {
    (0..ep.steps.len().saturating_sub(1))
        .filter(|&k| ep.steps[k].instruction.is_some() && ep.steps[k].image.dims() == ep.steps[k + 1].image.dims())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub split: Split,
    pub app: String,
    pub episode_id: String,
    pub frames: usize,
    pub pairs: usize,
}

#[derive(Debug, Clone)]
pub struct BuildOutcome {
    pub layout: Vec<LayoutEntry>,
    pub pairs: usize,
    pub skipped: Vec<(String, String)>,
}

#[derive(Serialize)]
struct EpisodeMeta<'a> {
    episode_id: &'a str,
    app_name: &'a str,
    goal: &'a str,
    split: Split,
    frames: usize,
    pairs: usize,
}

fn safe_component(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' })
        .collect()
}

fn write_episode(root: &Path, ep: &Episode, static_filter: Option<&dyn LlmBackend>) -> Result<LayoutEntry> {
    let split = ep
        .split
        .ok_or_else(|| Error::InvalidInput(format!("episode {} has no split", ep.id)))?;
    let dir = root.join(split.as_str()).join(safe_component(&ep.app_name)).join(safe_component(&ep.id));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (k, step) in ep.steps.iter().enumerate() {
        step.image.save(dir.join(format!("frame_{k:04}.png")))?;
        let boxes = match static_filter {
            Some(llm) => filter_static_text(&step.image, &step.text_boxes, llm, true)?.dynamic,
            None => step.text_boxes.clone(),
        };
        let (s, _) = symbolize(&step.image, &boxes)?;
        s.image.save(dir.join(format!("str_{k:04}.png")))?;
    }
    let pairs = pair_steps(ep);
    let mut lines = String::new();
    for &k in &pairs {
        let rec = StrPairRecord {
            step: k,
            instruction: ep.steps[k].instruction.clone().expect("pair has instruction"),
            str: format!("str_{k:04}.png"),
            next_str: format!("str_{:04}.png", k + 1),
        };
        lines.push_str(&serde_json::to_string(&rec)?);
        lines.push('\n');
    }
    let actions = dir.join("actions.jsonl");
    fs::write(&actions, lines).map_err(|e| Error::io(&actions, e))?;
    let meta = EpisodeMeta {
        episode_id: &ep.id,
        app_name: &ep.app_name,
        goal: &ep.goal,
        split,
        frames: ep.steps.len(),
        pairs: pairs.len(),
    };
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&meta_path, e))?;
    Ok(LayoutEntry {
        split,
        app: ep.app_name.clone(),
        episode_id: ep.id.clone(),
        frames: ep.steps.len(),
        pairs: pairs.len(),
    })
}

/// Writes frames, their STRs and the training pairs of every episode under
/// `root/<split>/<app>/<episode>/`, then a sorted `layout.jsonl`.
pub fn build_str_pairs(
    episodes: &[Episode],
    root: &Path,
    static_filter: Option<&dyn LlmBackend>,
    parallelism: usize,
) -> Result<BuildOutcome> {
    let results = map_bounded(episodes, parallelism, |_, ep| write_episode(root, ep, static_filter));
    let mut layout = Vec::new();
    let mut skipped = Vec::new();
    for (ep, r) in episodes.iter().zip(results) {
        match r {
            Ok(entry) => layout.push(entry),
            Err(e) => {
                log::warn!("skipping episode {} in build: {e}", ep.id);
                skipped.push((ep.id.clone(), e.to_string()));
            }
        }
    }
    layout.sort_by(|a, b| (a.split, &a.app, &a.episode_id).cmp(&(b.split, &b.app, &b.episode_id)));
    let mut body = String::new();
    for e in &layout {
        body.push_str(&serde_json::to_string(e)?);
        body.push('\n');
    }
    let path = root.join("layout.jsonl");
    fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    Ok(BuildOutcome {
        pairs: layout.iter().map(|e| e.pairs).sum(),
        layout,
        skipped,
    })
}
