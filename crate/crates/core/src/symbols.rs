//! Symbolic text representation (STR): masking text regions with
//! white-filled, black-bordered rectangles, and finding them again.

use std::collections::{BTreeSet, VecDeque};
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::backend::{LlmBackend, LlmRequest};
use crate::error::{Error, Result};
use crate::image::{BBox, GuiImage, Rgb, TextBox};
use crate::parse;
use crate::prompts::PromptKind;

/// Border thickness of a painted symbol, drawn inside its box.
pub const BORDER_WIDTH: u32 = 2;
/// Upper bound (inclusive, every channel) of a "black" border pixel.
pub const BLACK_MAX: u8 = 50;
/// Lower bound (inclusive, every channel) of a "white" fill pixel.
pub const WHITE_MIN: u8 = 200;
/// Components narrower or shorter than this are never symbols.
pub const MIN_SYMBOL_SIZE: u32 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    ConstructedFromGui,
    PredictedByBackend,
}

/// A screen whose dynamic text has been replaced by symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrImage {
    pub image: GuiImage,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TextSymbol {
    pub id: u32,
    #[serde(flatten)]
    pub bbox: BBox,
}

/// Symbols of one STR, ids unique, serialized as
/// `{"width","height","symbols":[{"id","x","y","w","h"}]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolTable {
    pub width: u32,
    pub height: u32,
    pub symbols: Vec<TextSymbol>,
}

impl SymbolTable {
    pub fn empty(width: u32, height: u32) -> Self {
        SymbolTable {
            width,
            height,
            symbols: Vec::new(),
        }
    }

    /// Builds a table from boxes, numbering them in row-major order of their
    /// top-left corners.
    pub fn from_boxes(width: u32, height: u32, mut boxes: Vec<BBox>) -> Self {
        boxes.sort_by_key(|b| (b.y, b.x, b.h, b.w));
        let symbols = boxes
            .into_iter()
            .enumerate()
            .map(|(i, bbox)| TextSymbol { id: i as u32, bbox })
            .collect();
        SymbolTable {
            width,
            height,
            symbols,
        }
    }

    pub fn get(&self, id: u32) -> Option<&TextSymbol> {
        self.symbols.iter().find(|s| s.id == id)
    }

    pub fn ids(&self) -> BTreeSet<u32> {
        self.symbols.iter().map(|s| s.id).collect()
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for s in &self.symbols {
            if !seen.insert(s.id) {
                return Err(Error::InvalidInput(format!("duplicate symbol id {}", s.id)));
            }
            if !s.bbox.fits_in(self.width, self.height) {
                return Err(Error::OutOfBounds {
                    bbox: s.bbox.to_string(),
                    width: self.width,
                    height: self.height,
                });
            }
        }
        Ok(())
    }

    /// Box locations in the `{'id': id, 'Location':[x1,y1, width, height]}`
    /// form the prompts describe.
    pub fn describe_locations(&self, ids: &BTreeSet<u32>) -> String {
        let items: Vec<String> = self
            .symbols
            .iter()
            .filter(|s| ids.contains(&s.id))
            .map(|s| {
                format!(
                    "{{'id': {}, 'Location':[{}, {}, {}, {}]}}",
                    s.id, s.bbox.x, s.bbox.y, s.bbox.w, s.bbox.h
                )
            })
            .collect();
        format!("[{}]", items.join(", "))
    }
}

#[derive(Debug, Deserialize)]
struct OcrRecord {
    x: i64,
    y: i64,
    w: i64,
    h: i64,
    text: String,
    #[serde(default)]
    is_static: bool,
}

/// Reads OCR detections, one JSON record per line:
/// `{"x":int,"y":int,"w":int,"h":int,"text":str}`.
///
/// Boxes are clamped to the image; boxes left with zero area and records with
/// blank text are dropped.
pub fn load_ocr_boxes<R: BufRead>(source: R, width: u32, height: u32) -> Result<Vec<TextBox>> {
    let mut out = Vec::new();
    for (lineno, line) in source.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<ocr stream>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: OcrRecord = serde_json::from_str(&line).map_err(|e| {
            Error::InvalidInput(format!("OCR record on line {}: {e}", lineno + 1))
        })?;
        if rec.text.trim().is_empty() {
            log::debug!("dropping OCR record on line {} with blank text", lineno + 1);
            continue;
        }
        match BBox::clamped(rec.x, rec.y, rec.w, rec.h, width, height) {
            Some(bbox) => out.push(TextBox {
                bbox,
                text: rec.text,
                is_static: rec.is_static,
            }),
            None => log::debug!("dropping zero-area OCR box on line {}", lineno + 1),
        }
    }
    Ok(out)
}

/// How the static/dynamic split was decided.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum FilterProvenance {
    /// No boxes, so no model call was needed.
    Trivial,
    Model,
    /// The model failed and every box was kept dynamic.
    FallbackAllDynamic { reason: String },
}

#[derive(Debug, Clone)]
pub struct StaticFilterOutcome {
    pub dynamic: Vec<TextBox>,
    pub static_text: Vec<TextBox>,
    pub provenance: FilterProvenance,
    pub raw_response: Option<String>,
}

/// Splits OCR boxes into dynamic text (to be masked) and static text that
/// stays as pixels, by asking a model which box ids are static.
///
/// With `fallback_all_dynamic`, model or parse failures keep every box
/// dynamic instead of failing.
pub fn filter_static_text(
    gui: &GuiImage,
    boxes: &[TextBox],
    llm: &dyn LlmBackend,
    fallback_all_dynamic: bool,
) -> Result<StaticFilterOutcome> {
    if boxes.is_empty() {
        return Ok(StaticFilterOutcome {
            dynamic: Vec::new(),
            static_text: Vec::new(),
            provenance: FilterProvenance::Trivial,
            raw_response: None,
        });
    }
    for b in boxes {
        gui.check_box(&b.bbox)?;
    }
    let listing: Vec<String> = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            format!(
                "{{'id': {i}, 'Location':[{}, {}, {}, {}], 'text': {}}}",
                b.bbox.x,
                b.bbox.y,
                b.bbox.w,
                b.bbox.h,
                serde_json::to_string(&b.text).unwrap_or_default()
            )
        })
        .collect();
    let prompt = format!(
        "{}\nText regions:\n[{}]\n",
        PromptKind::StaticTextFilter.template(),
        listing.join(",\n")
    );
    let req = LlmRequest::new(PromptKind::StaticTextFilter, prompt, &[gui]);
    let attempt = llm.complete(&req).and_then(|raw| {
        let ids = parse::parse_id_list(&raw, "static text ids")?;
        Ok((raw, ids))
    });
    match attempt {
        Ok((raw, ids)) => {
            let statics: BTreeSet<u32> = ids.into_iter().collect();
            let (static_text, dynamic): (Vec<_>, Vec<_>) = boxes
                .iter()
                .enumerate()
                .map(|(i, b)| {
                    let mut b = b.clone();
                    b.is_static = statics.contains(&(i as u32));
                    b
                })
                .partition(|b| b.is_static);
            Ok(StaticFilterOutcome {
                dynamic,
                static_text,
                provenance: FilterProvenance::Model,
                raw_response: Some(raw),
            })
        }
        Err(e) if fallback_all_dynamic => {
            log::warn!("static-text filter failed, keeping all text dynamic: {e}");
            Ok(StaticFilterOutcome {
                dynamic: boxes
                    .iter()
                    .cloned()
                    .map(|mut b| {
                        b.is_static = false;
                        b
                    })
                    .collect(),
                static_text: Vec::new(),
                provenance: FilterProvenance::FallbackAllDynamic {
                    reason: e.to_string(),
                },
                raw_response: None,
            })
        }
        Err(e) => Err(e),
    }
}

fn touches_or_overlaps(a: &BBox, b: &BBox) -> bool {
    // Edge-adjacent boxes would fuse their borders into one component, so
    // they merge like overlapping ones. Corner contact is fine under
    // 4-connectivity.
    let grow_x = BBox::new(a.x.saturating_sub(1), a.y, a.w + 1 + a.x.min(1), a.h);
    let grow_y = BBox::new(a.x, a.y.saturating_sub(1), a.w, a.h + 1 + a.y.min(1));
    grow_x.intersection(b).is_some() || grow_y.intersection(b).is_some()
}

/// Replaces overlapping or edge-adjacent boxes by their union until none remain.
pub fn merge_boxes(boxes: &[BBox]) -> Vec<BBox> {
    let mut merged: Vec<BBox> = boxes.to_vec();
    loop {
        let mut changed = false;
        'outer: for i in 0..merged.len() {
            for j in i + 1..merged.len() {
                if touches_or_overlaps(&merged[i], &merged[j]) {
                    let u = merged[i].union(&merged[j]);
                    merged[i] = u;
                    merged.swap_remove(j);
                    changed = true;
                    break 'outer;
                }
            }
        }
        if !changed {
            break;
        }
    }
    merged
}

/// Paints one symbol: white fill with a black border inside `b`.
pub fn paint_symbol(img: &mut GuiImage, b: &BBox) -> Result<()> {
    img.fill_rect(b, Rgb::BLACK)?;
    if b.w > 2 * BORDER_WIDTH && b.h > 2 * BORDER_WIDTH {
        let inner = BBox::new(
            b.x + BORDER_WIDTH,
            b.y + BORDER_WIDTH,
            b.w - 2 * BORDER_WIDTH,
            b.h - 2 * BORDER_WIDTH,
        );
        img.fill_rect(&inner, Rgb::WHITE)?;
    }
    Ok(())
}

/// Masks every non-static box with a symbol. Overlapping boxes are merged first.
pub fn symbolize(gui: &GuiImage, boxes: &[TextBox]) -> Result<(StrImage, SymbolTable)> {
    let dynamic: Vec<BBox> = boxes.iter().filter(|b| !b.is_static).map(|b| b.bbox).collect();
    for b in &dynamic {
        gui.check_box(b)?;
    }
    let merged = merge_boxes(&dynamic);
    let table = SymbolTable::from_boxes(gui.width(), gui.height(), merged);
    let mut image = gui.clone();
    for s in &table.symbols {
        paint_symbol(&mut image, &s.bbox)?;
    }
    Ok((
        StrImage {
            image,
            provenance: Provenance::ConstructedFromGui,
        },
        table,
    ))
}

/// Measurements of one black connected component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub bbox: BBox,
    /// Pixels enclosed by the component's outer boundary (component + holes).
    pub filled_area: u64,
    /// Non-component pixels inside the boundary.
    pub interior: u64,
    /// White-range pixels among `interior`.
    pub interior_white: u64,
}

impl Candidate {
    pub fn area_ratio(&self) -> f64 {
        self.filled_area as f64 / self.bbox.area() as f64
    }

    pub fn white_ratio(&self) -> f64 {
        if self.interior == 0 {
            0.0
        } else {
            self.interior_white as f64 / self.interior as f64
        }
    }

    /// Rectangularity: filled area over bounding-rectangle area must exceed 0.8.
    pub fn is_rectangular(&self) -> bool {
        self.filled_area * 5 > self.bbox.area() * 4
    }

    /// More than half of the interior must be white.
    pub fn is_white_inside(&self) -> bool {
        self.interior > 0 && self.interior_white * 2 > self.interior
    }

    pub fn accepted(&self) -> bool {
        self.bbox.w >= MIN_SYMBOL_SIZE
            && self.bbox.h >= MIN_SYMBOL_SIZE
            && self.is_rectangular()
            && self.is_white_inside()
    }
}

/// Labels 4-connected components of black pixels and measures each one.
pub fn black_components(img: &GuiImage) -> Vec<Candidate> {
    let (w, h) = img.dims();
    let (wu, hu) = (w as usize, h as usize);
    let raw = img.as_raw();
    let black: Vec<bool> = raw
        .chunks_exact(3)
        .map(|p| p.iter().all(|&c| c <= BLACK_MAX))
        .collect();
    // 0 = unlabelled
    let mut label = vec![0u32; wu * hu];
    let mut next = 0u32;
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    let mut scratch: Vec<u32> = Vec::new();

    for start in 0..wu * hu {
        if !black[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        let id = next;
        label[start] = id;
        queue.push_back(start);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        let mut count = 0u64;
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % wu, i / wu);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            count += 1;
            let mut visit = |j: usize| {
                if black[j] && label[j] == 0 {
                    label[j] = id;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < wu {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - wu);
            }
            if y + 1 < hu {
                visit(i + wu);
            }
        }
        let bbox = BBox::new(x0 as u32, y0 as u32, (x1 - x0 + 1) as u32, (y1 - y0 + 1) as u32);
        if bbox.w < MIN_SYMBOL_SIZE || bbox.h < MIN_SYMBOL_SIZE {
            continue;
        }
        // Pixels outside the component's boundary: everything not in the
        // component reachable (8-connected) from the bbox edge.
        let (bw, bh) = (bbox.w as usize, bbox.h as usize);
        scratch.clear();
        scratch.resize(bw * bh, 0);
        const OUTSIDE: u32 = 1;
        let is_comp = |lx: usize, ly: usize| label[(y0 + ly) * wu + x0 + lx] == id;
        let mut outside = 0u64;
        let mut seeds = Vec::new();
        for lx in 0..bw {
            seeds.push((lx, 0));
            seeds.push((lx, bh - 1));
        }
        for ly in 0..bh {
            seeds.push((0, ly));
            seeds.push((bw - 1, ly));
        }
        let mut stack = Vec::new();
        for (lx, ly) in seeds {
            if !is_comp(lx, ly) && scratch[ly * bw + lx] == 0 {
                scratch[ly * bw + lx] = OUTSIDE;
                stack.push((lx, ly));
            }
        }
        while let Some((lx, ly)) = stack.pop() {
            outside += 1;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let nx = lx as i64 + dx;
                    let ny = ly as i64 + dy;
                    if nx < 0 || ny < 0 || nx >= bw as i64 || ny >= bh as i64 {
                        continue;
                    }
                    let (nx, ny) = (nx as usize, ny as usize);
                    if scratch[ny * bw + nx] == 0 && !is_comp(nx, ny) {
                        scratch[ny * bw + nx] = OUTSIDE;
                        stack.push((nx, ny));
                    }
                }
            }
        }
        let filled_area = bbox.area() - outside;
        let mut interior = 0u64;
        let mut interior_white = 0u64;
        for ly in 0..bh {
            for lx in 0..bw {
                if scratch[ly * bw + lx] == 0 && !is_comp(lx, ly) {
                    interior += 1;
                    let p = ((y0 + ly) * wu + x0 + lx) * 3;
                    if raw[p..p + 3].iter().all(|&c| c >= WHITE_MIN) {
                        interior_white += 1;
                    }
                }
            }
        }
        debug_assert_eq!(filled_area, count + interior);
        out.push(Candidate {
            bbox,
            filled_area,
            interior,
            interior_white,
        });
    }
    out
}

/// Finds every symbol in an STR: black 4-connected components whose filled
/// area exceeds 0.8 of their bounding rectangle and whose interior is more
/// than half white. Regions nested inside another accepted region are dropped.
pub fn detect_symbols(str_img: &StrImage) -> SymbolTable {
    let img = &str_img.image;
    let accepted: Vec<BBox> = black_components(img)
        .into_iter()
        .filter(Candidate::accepted)
        .map(|c| c.bbox)
        .collect();
    let kept: Vec<BBox> = accepted
        .iter()
        .enumerate()
        .filter(|(i, b)| {
            !accepted
                .iter()
                .enumerate()
                .any(|(j, o)| j != *i && o.encloses(b) && (o != *b || j < *i))
        })
        .map(|(_, b)| *b)
        .collect();
    SymbolTable::from_boxes(img.width(), img.height(), kept)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolMatch {
    pub a: u32,
    pub b: u32,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolDiff {
    pub matched: Vec<SymbolMatch>,
    pub unmatched_a: Vec<u32>,
    pub unmatched_b: Vec<u32>,
}

/// Greedy max-IoU matching of two tables; pairs below `threshold` stay unmatched.
pub fn diff_symbol_tables(a: &SymbolTable, b: &SymbolTable, threshold: f64) -> Result<SymbolDiff> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::InvalidInput(format!(
            "symbol tables cover different images: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let mut pairs: Vec<SymbolMatch> = Vec::new();
    for sa in &a.symbols {
        for sb in &b.symbols {
            let iou = sa.bbox.iou(&sb.bbox);
            if iou > 0.0 && iou >= threshold {
                pairs.push(SymbolMatch { a: sa.id, b: sb.id, iou });
            }
        }
    }
    pairs.sort_by(|p, q| q.iou.total_cmp(&p.iou).then(p.a.cmp(&q.a)).then(p.b.cmp(&q.b)));
    let mut used_a = BTreeSet::new();
    let mut used_b = BTreeSet::new();
    let mut matched = Vec::new();
    for p in pairs {
        if used_a.contains(&p.a) || used_b.contains(&p.b) {
            continue;
        }
        used_a.insert(p.a);
        used_b.insert(p.b);
        matched.push(p);
    }
    matched.sort_by_key(|m| m.a);
    Ok(SymbolDiff {
        matched,
        unmatched_a: a.symbols.iter().map(|s| s.id).filter(|i| !used_a.contains(i)).collect(),
        unmatched_b: b.symbols.iter().map(|s| s.id).filter(|i| !used_b.contains(i)).collect(),
    })
}
