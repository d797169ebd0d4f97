//! Screens, boxes, actions and episodes shared by every other module.
//!
//! Pixels are stored row-major as 8-bit RGB triples. The detector's colour
//! thresholds are identical on every channel, so BGR-vs-RGB ordering never
//! changes a classification.

use std::fmt;
use std::io::Cursor;
use std::path::Path;

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ImageEncoder, ImageFormat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PNG_MAGIC: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rgb(pub [u8; 3]);

impl Rgb {
    pub const BLACK: Rgb = Rgb([0, 0, 0]);
    pub const WHITE: Rgb = Rgb([255, 255, 255]);
    pub const RED: Rgb = Rgb([255, 0, 0]);

    /// Relative luminance in [0, 1] with BT.709 weights over normalized channels.
    pub fn luminance(self) -> f64 {
        let [r, g, b] = self.0;
        (0.2126 * r as f64 + 0.7152 * g as f64 + 0.0722 * b as f64) / 255.0
    }

    /// True when every channel lies in `lo..=hi`.
    pub fn within(self, lo: u8, hi: u8) -> bool {
        self.0.iter().all(|&c| c >= lo && c <= hi)
    }
}

/// Axis-aligned box with top-left origin, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        BBox { x, y, w, h }
    }

    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn fits_in(&self, width: u32, height: u32) -> bool {
        self.w >= 1
            && self.h >= 1
            && (self.x as u64 + self.w as u64) <= width as u64
            && (self.y as u64 + self.h as u64) <= height as u64
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.right() && y >= self.y && y < self.bottom()
    }

    /// True when `other` lies entirely within `self`.
    pub fn encloses(&self, other: &BBox) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x1 > x0 && y1 > y0).then(|| BBox::new(x0, y0, x1 - x0, y1 - y0))
    }

    pub fn union(&self, other: &BBox) -> BBox {
        let x0 = self.x.min(other.x);
        let y0 = self.y.min(other.y);
        let x1 = self.right().max(other.right());
        let y1 = self.bottom().max(other.bottom());
        BBox::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other).map_or(0, |b| b.area());
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Clamps a signed box to `width x height`; `None` when nothing of area > 0 remains.
    pub fn clamped(x: i64, y: i64, w: i64, h: i64, width: u32, height: u32) -> Option<BBox> {
        let x0 = x.max(0);
        let y0 = y.max(0);
        let x1 = (x + w).min(width as i64);
        let y1 = (y + h).min(height as i64);
        (x1 > x0 && y1 > y0)
            .then(|| BBox::new(x0 as u32, y0 as u32, (x1 - x0) as u32, (y1 - y0) as u32))
    }

    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (self.y..self.bottom()).flat_map(move |y| (self.x..self.right()).map(move |x| (x, y)))
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}x{})", self.x, self.y, self.w, self.h)
    }
}

/// An RGB raster screen.
#[derive(Clone, PartialEq, Eq)]
pub struct GuiImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl fmt::Debug for GuiImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GuiImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl GuiImage {
    pub fn new(width: u32, height: u32, fill: Rgb) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        let pixels = fill.0.repeat(width as usize * height as usize);
        Ok(GuiImage {
            width,
            height,
            pixels,
        })
    }

    pub fn from_raw(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(Error::InvalidInput(format!(
                "pixel buffer has {} bytes, expected {expected}",
                pixels.len()
            )));
        }
        Ok(GuiImage {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.pixels
    }

    pub fn full_box(&self) -> BBox {
        BBox::new(0, 0, self.width, self.height)
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    /// Panics if `(x, y)` is outside the image.
    pub fn get(&self, x: u32, y: u32) -> Rgb {
        assert!(x < self.width && y < self.height, "pixel ({x},{y}) out of bounds");
        let i = self.offset(x, y);
        Rgb([self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]])
    }

    /// Panics if `(x, y)` is outside the image.
    pub fn set(&mut self, x: u32, y: u32, c: Rgb) {
        assert!(x < self.width && y < self.height, "pixel ({x},{y}) out of bounds");
        let i = self.offset(x, y);
        self.pixels[i..i + 3].copy_from_slice(&c.0);
    }

    pub fn check_box(&self, b: &BBox) -> Result<()> {
        if b.fits_in(self.width, self.height) {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                bbox: b.to_string(),
                width: self.width,
                height: self.height,
            })
        }
    }

    pub fn fill_rect(&mut self, b: &BBox, c: Rgb) -> Result<()> {
        self.check_box(b)?;
        for y in b.y..b.bottom() {
            let start = self.offset(b.x, y);
            let end = self.offset(b.right() - 1, y) + 3;
            for px in self.pixels[start..end].chunks_exact_mut(3) {
                px.copy_from_slice(&c.0);
            }
        }
        Ok(())
    }

    /// Copies the pixels under `b` into a new image of size `b.w x b.h`.
    pub fn crop(&self, b: &BBox) -> Result<GuiImage> {
        self.check_box(b)?;
        let mut pixels = Vec::with_capacity(b.area() as usize * 3);
        for y in b.y..b.bottom() {
            let start = self.offset(b.x, y);
            pixels.extend_from_slice(&self.pixels[start..start + b.w as usize * 3]);
        }
        GuiImage::from_raw(b.w, b.h, pixels)
    }

    /// Writes `patch` with its top-left corner at `(x, y)`.
    pub fn paste(&mut self, patch: &GuiImage, x: u32, y: u32) -> Result<()> {
        let b = BBox::new(x, y, patch.width, patch.height);
        self.check_box(&b)?;
        let row = patch.width as usize * 3;
        for py in 0..patch.height {
            let dst = self.offset(x, y + py);
            let src = patch.offset(0, py);
            self.pixels[dst..dst + row].copy_from_slice(&patch.pixels[src..src + row]);
        }
        Ok(())
    }

    /// Copies the region `b` of `src` into the same location of `self`.
    pub fn copy_region_from(&mut self, src: &GuiImage, b: &BBox) -> Result<()> {
        if src.dims() != self.dims() {
            return Err(Error::InvalidInput(format!(
                "dimension mismatch: {:?} vs {:?}",
                src.dims(),
                self.dims()
            )));
        }
        let patch = src.crop(b)?;
        self.paste(&patch, b.x, b.y)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<GuiImage> {
        if !bytes.starts_with(&PNG_MAGIC) {
            return Err(Error::Image("not a PNG stream".into()));
        }
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
            .map_err(|e| Error::Image(e.to_string()))?
            .into_rgb8();
        let (w, h) = img.dimensions();
        GuiImage::from_raw(w, h, img.into_raw())
    }

    pub fn encode_png(&self) -> Vec<u8> {
        let mut out = Vec::new();
        PngEncoder::new_with_quality(&mut Cursor::new(&mut out), CompressionType::Default, FilterType::Adaptive)
            .write_image(&self.pixels, self.width, self.height, image::ExtendedColorType::Rgb8)
            .expect("encoding an in-memory RGB8 buffer cannot fail");
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<GuiImage> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        GuiImage::decode_png(&bytes).map_err(|e| match e {
            Error::Image(msg) => Error::Image(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode_png()).map_err(|e| Error::io(path, e))
    }
}

/// Per-channel arithmetic mean over `region`, rounded half-up.
pub fn mean_color(img: &GuiImage, region: &[(u32, u32)]) -> Result<Rgb> {
    if region.is_empty() {
        return Err(Error::InvalidInput("mean_color over an empty region".into()));
    }
    let mut sums = [0u64; 3];
    for &(x, y) in region {
        if x >= img.width() || y >= img.height() {
            return Err(Error::OutOfBounds {
                bbox: format!("pixel ({x},{y})"),
                width: img.width(),
                height: img.height(),
            });
        }
        let c = img.get(x, y);
        for (s, v) in sums.iter_mut().zip(c.0) {
            *s += v as u64;
        }
    }
    let n = region.len() as u64;
    Ok(Rgb(sums.map(|s| ((2 * s + n) / (2 * n)) as u8)))
}

/// OCR detection of one line of text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextBox {
    pub bbox: BBox,
    pub text: String,
    #[serde(default)]
    pub is_static: bool,
}

/// A natural-language action such as "click the + icon".
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionInstruction(String);

impl ActionInstruction {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(Error::InvalidInput("action instruction is empty".into()));
        }
        Ok(ActionInstruction(trimmed.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ActionInstruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A parameterized action primitive as recorded by device loggers.
///
/// Coordinates are fractions of the image width/height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionCommand {
    Click { x: f64, y: f64 },
    LongPress { x: f64, y: f64 },
    Scroll { touch: (f64, f64), lift: (f64, f64) },
    Type { text: String },
    OpenApp { app_name: String },
    NavigateBack,
    NavigateHome,
    Wait,
}

impl ActionCommand {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        let ok = match self {
            ActionCommand::Click { x, y } | ActionCommand::LongPress { x, y } => {
                in_unit(*x) && in_unit(*y)
            }
            ActionCommand::Scroll { touch, lift } => {
                in_unit(touch.0) && in_unit(touch.1) && in_unit(lift.0) && in_unit(lift.1)
            }
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "action coordinates must be fractions in [0,1]: {self:?}"
            )))
        }
    }

    /// Touch and lift points, both as fractions; single-point actions lift where they touch.
    pub fn touch_lift(&self) -> Option<((f64, f64), (f64, f64))> {
        match self {
            ActionCommand::Click { x, y } | ActionCommand::LongPress { x, y } => {
                Some(((*x, *y), (*x, *y)))
            }
            ActionCommand::Scroll { touch, lift } => Some((*touch, *lift)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One step of an episode. `instruction` is `None` when the step has no
/// usable natural-language action (last frame, or dropped by conversion).
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStep {
    pub image: GuiImage,
    /// OCR text of `image`; may be empty when none was supplied.
    pub text_boxes: Vec<TextBox>,
    pub command: Option<ActionCommand>,
    pub instruction: Option<ActionInstruction>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: String,
    pub app_name: String,
    pub goal: String,
    pub steps: Vec<EpisodeStep>,
    pub split: Option<Split>,
}

impl Episode {
    pub fn validate(&self) -> Result<()> {
        let first = self
            .steps
            .first()
            .ok_or_else(|| Error::InvalidInput(format!("episode {} has no steps", self.id)))?;
        let dims = first.image.dims();
        if let Some((i, s)) = self
            .steps
            .iter()
            .enumerate()
            .find(|(_, s)| s.image.dims() != dims)
        {
            return Err(Error::InvalidInput(format!(
                "episode {} step {i} is {:?}, expected {:?}",
                self.id,
                s.image.dims(),
                dims
            )));
        }
        Ok(())
    }

    pub fn instruction_count(&self) -> usize {
        self.steps.iter().filter(|s| s.instruction.is_some()).count()
    }
}
