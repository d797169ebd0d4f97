//! Drawing predicted text and id labels into symbol regions.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use ab_glyph::{point, Font, FontArc, GlyphId, PxScale, ScaleFont};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{mean_color, BBox, GuiImage, Rgb};
use crate::symbols::{StrImage, SymbolTable};

const BUNDLED_FONT: &[u8] = include_bytes!("../assets/fonts/DejaVuSans.ttf");

/// Thickness of the sampling ring around a box.
pub const RING_WIDTH: u32 = 2;
/// Label inset from the symbol's top-left corner, clear of the border.
pub const LABEL_INSET: u32 = 2;

/// Text extents at a given integer font size, in pixels.
///
/// Implementations must be monotone non-decreasing in `size` and return
/// `(0.0, 0.0)` for size 0.
pub trait TextMeasurer: Send + Sync {
    fn extent(&self, text: &str, size: u32) -> (f64, f64);
}

/// A TrueType font used for both measuring and drawing.
#[derive(Clone)]
pub struct FontRenderer {
    font: FontArc,
}

impl std::fmt::Debug for FontRenderer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("FontRenderer")
    }
}

/// Anti-aliased glyph coverage in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Coverage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl Coverage {
    pub fn at(&self, x: u32, y: u32) -> f32 {
        self.data[(y * self.width + x) as usize]
    }
}

impl FontRenderer {
    /// The font shipped with the crate (DejaVu Sans).
    pub fn bundled() -> Self {
        let font = FontArc::try_from_slice(BUNDLED_FONT).expect("bundled font parses");
        FontRenderer { font }
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let font = FontArc::try_from_vec(bytes)
            .map_err(|e| Error::InvalidInput(format!("{}: not a usable font: {e}", path.display())))?;
        Ok(FontRenderer { font })
    }

    pub fn shared(self) -> Arc<Self> {
        Arc::new(self)
    }

    fn glyphs(&self, text: &str, size: u32) -> (Vec<(GlyphId, f32)>, f32) {
        let sf = self.font.as_scaled(PxScale::from(size as f32));
        let mut caret = 0.0f32;
        let mut prev: Option<GlyphId> = None;
        let mut out = Vec::new();
        for c in text.chars() {
            let id = sf.glyph_id(c);
            if let Some(p) = prev {
                caret += sf.kern(p, id);
            }
            out.push((id, caret));
            caret += sf.h_advance(id);
            prev = Some(id);
        }
        (out, caret)
    }

    /// Rasterizes one line of text at `size`; the canvas spans the measured extent.
    pub fn rasterize(&self, text: &str, size: u32) -> Coverage {
        let (w, h) = self.extent(text, size);
        let (cw, ch) = (w.ceil() as u32, h.ceil() as u32);
        let mut data = vec![0f32; (cw * ch) as usize];
        if size == 0 || cw == 0 || ch == 0 {
            return Coverage { width: cw, height: ch, data };
        }
        let scale = PxScale::from(size as f32);
        let ascent = self.font.as_scaled(scale).ascent();
        let (glyphs, _) = self.glyphs(text, size);
        for (id, x) in glyphs {
            let glyph = id.with_scale_and_position(scale, point(x, ascent));
            if let Some(outlined) = self.font.outline_glyph(glyph) {
                let b = outlined.px_bounds();
                outlined.draw(|gx, gy, c| {
                    let px = b.min.x as i64 + gx as i64;
                    let py = b.min.y as i64 + gy as i64;
                    if px >= 0 && py >= 0 && (px as u32) < cw && (py as u32) < ch {
                        let cell = &mut data[(py as u32 * cw + px as u32) as usize];
                        *cell = (*cell + c).min(1.0);
                    }
                });
            }
        }
        Coverage { width: cw, height: ch, data }
    }
}

impl TextMeasurer for FontRenderer {
    fn extent(&self, text: &str, size: u32) -> (f64, f64) {
        if size == 0 || text.is_empty() {
            return (0.0, 0.0);
        }
        let (_, width) = self.glyphs(text, size);
        let height = self.font.as_scaled(PxScale::from(size as f32)).height();
        (width.max(0.0) as f64, height as f64)
    }
}

/// Mean color of the `RING_WIDTH` ring just outside `b`, clipped to the image.
/// A box that leaves no ring (it spans the image) uses its own perimeter.
pub fn sample_background(img: &GuiImage, b: &BBox) -> Result<Rgb> {
    img.check_box(b)?;
    let x0 = b.x.saturating_sub(RING_WIDTH);
    let y0 = b.y.saturating_sub(RING_WIDTH);
    let x1 = (b.right() + RING_WIDTH).min(img.width());
    let y1 = (b.bottom() + RING_WIDTH).min(img.height());
    let ring: Vec<(u32, u32)> = (y0..y1)
        .flat_map(|y| (x0..x1).map(move |x| (x, y)))
        .filter(|&(x, y)| !b.contains(x, y))
        .collect();
    if !ring.is_empty() {
        return mean_color(img, &ring);
    }
    let perimeter: Vec<(u32, u32)> = b
        .pixels()
        .filter(|&(x, y)| x == b.x || y == b.y || x + 1 == b.right() || y + 1 == b.bottom())
        .collect();
    mean_color(img, &perimeter)
}

/// Black on light backgrounds (luminance at least 0.5), white otherwise.
pub fn choose_text_color(bg: Rgb) -> Rgb {
    if bg.luminance() >= 0.5 {
        Rgb::BLACK
    } else {
        Rgb::WHITE
    }
}

fn fits(m: &dyn TextMeasurer, text: &str, size: u32, w: u32, h: u32) -> bool {
    let (ew, eh) = m.extent(text, size);
    ew <= w as f64 && eh <= h as f64
}

/// Largest size whose extent fits in `w` x `h`; 1 when nothing fits.
///
/// Relies on the measurer being monotone, so the feasible sizes form a prefix.
pub fn fit_font_size(text: &str, w: u32, h: u32, m: &dyn TextMeasurer) -> u32 {
    const CAP: u32 = 1 << 16;
    if !fits(m, text, 1, w, h) {
        return 1;
    }
    let mut lo = 1;
    let mut hi = 2;
    while hi < CAP && fits(m, text, hi, w, h) {
        lo = hi;
        hi *= 2;
    }
    if hi >= CAP && fits(m, text, CAP, w, h) {
        return CAP;
    }
    // lo fits, hi does not
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(m, text, mid, w, h) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

fn blend(bg: Rgb, fg: Rgb, alpha: f32) -> Rgb {
    let mix = |b: u8, f: u8| (b as f32 + (f as f32 - b as f32) * alpha).round().clamp(0.0, 255.0) as u8;
    Rgb([mix(bg.0[0], fg.0[0]), mix(bg.0[1], fg.0[1]), mix(bg.0[2], fg.0[2])])
}

/// Draws coverage with its top-left at (`ox`, `oy`), clipped to `clip`.
fn draw_coverage(img: &mut GuiImage, cov: &Coverage, ox: i64, oy: i64, clip: &BBox, color: Rgb, solid: bool) {
    for cy in 0..cov.height {
        for cx in 0..cov.width {
            let a = cov.at(cx, cy);
            if a <= 0.0 {
                continue;
            }
            let (x, y) = (ox + cx as i64, oy + cy as i64);
            if x < clip.x as i64 || y < clip.y as i64 || x >= clip.right() as i64 || y >= clip.bottom() as i64 {
                continue;
            }
            let (x, y) = (x as u32, y as u32);
            if solid {
                if a >= 0.5 {
                    img.set(x, y, color);
                }
            } else {
                let under = img.get(x, y);
                img.set(x, y, blend(under, color, a));
            }
        }
    }
}

/// Text predicted for one symbol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEntry {
    pub id: u32,
    pub text: String,
    #[serde(default)]
    pub role: String,
}

/// Predicted text per symbol, serialized as `{"entries":[{"id","text","role"}]}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextAssignment {
    pub entries: Vec<TextEntry>,
}

impl TextAssignment {
    pub fn validate(&self, table: &SymbolTable) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if table.get(e.id).is_none() {
                return Err(Error::UnknownSymbol(e.id));
            }
            if !seen.insert(e.id) {
                return Err(Error::InvalidInput(format!("duplicate text entry for symbol {}", e.id)));
            }
        }
        Ok(())
    }

    pub fn texts(&self) -> BTreeMap<u32, &str> {
        self.entries.iter().map(|e| (e.id, e.text.as_str())).collect()
    }
}

/// Paints each assigned symbol with its surrounding background color and
/// draws its text centered at the largest size that fits. Symbols without an
/// entry keep their placeholder; nothing outside assigned boxes changes.
///
/// Backgrounds are sampled from the input, so the result does not depend on
/// the order of entries.
pub fn overlay_text(
    str_img: &StrImage,
    table: &SymbolTable,
    asg: &TextAssignment,
    font: &FontRenderer,
) -> Result<GuiImage> {
    asg.validate(table)?;
    let src = &str_img.image;
    let mut out = src.clone();
    for e in &asg.entries {
        let b = table.get(e.id).ok_or(Error::UnknownSymbol(e.id))?.bbox;
        let bg = sample_background(src, &b)?;
        out.fill_rect(&b, bg)?;
        if e.text.trim().is_empty() {
            continue;
        }
        let size = fit_font_size(&e.text, b.w, b.h, font);
        let cov = font.rasterize(&e.text, size);
        let ox = b.x as i64 + (b.w as i64 - cov.width as i64) / 2;
        let oy = b.y as i64 + (b.h as i64 - cov.height as i64) / 2;
        draw_coverage(&mut out, &cov, ox, oy, &b, choose_text_color(bg), false);
    }
    Ok(out)
}

/// Marks every symbol with its id in pure red at the top-left of its interior.
pub fn overlay_id_labels(str_img: &StrImage, table: &SymbolTable, font: &FontRenderer) -> Result<StrImage> {
    table.validate()?;
    let mut out = str_img.image.clone();
    if (table.width, table.height) != out.dims() {
        return Err(Error::InvalidInput(format!(
            "symbol table is for {}x{}, image is {}x{}",
            table.width,
            table.height,
            out.width(),
            out.height()
        )));
    }
    for s in &table.symbols {
        let b = s.bbox;
        if b.w <= 2 * LABEL_INSET || b.h <= 2 * LABEL_INSET {
            continue;
        }
        let interior = BBox::new(b.x + LABEL_INSET, b.y + LABEL_INSET, b.w - 2 * LABEL_INSET, b.h - 2 * LABEL_INSET);
        let label = s.id.to_string();
        let size = fit_font_size(&label, interior.w, (b.h / 3).max(1), font);
        let cov = font.rasterize(&label, size);
        draw_coverage(&mut out, &cov, interior.x as i64, interior.y as i64, &interior, Rgb::RED, true);
    }
    Ok(StrImage {
        image: out,
        provenance: str_img.provenance,
    })
}
