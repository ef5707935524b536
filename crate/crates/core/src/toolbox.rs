//! The three visual tools with train/infer semantics, plus pixel-budget
//! resizing on the 28-pixel grid.
//!
//! All tool outputs are re-resized through [`smart_resize`] so that their
//! dimensions are positive multiples of 28 and their area lies within the
//! active [`PixelBudget`] — with one deliberate exception: `focus_area` in
//! Train mode draws the bbox onto the input without touching dimensions
//! (inputs are budget-conformant because root images pass through
//! [`prepare_root`] at ingest).

use image::{imageops, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{ToolCommand, ToolName};
use crate::image_store::{ImageError, ImageState, ImageStore};
use crate::BBox;

/// Grid quantum for model-visible image dimensions.
pub const GRID: u32 = 28;
/// Default minimum pixel area: 4 grid cells.
pub const MIN_PIXELS: u64 = 4 * 28 * 28;

#[derive(Debug, Error)]
pub enum ToolboxError {
    #[error("no multiple-of-28 dimensions satisfy the budget for {width}x{height}")]
    Unsatisfiable { width: u32, height: u32 },
    #[error("crop region is smaller than one pixel")]
    CropTooSmall,
    #[error("zoom factor must be > 1, got {0}")]
    BadFactor(f64),
    #[error("invalid pixel budget: {0}")]
    BadBudget(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Min/max total-pixel bounds; dimensions are constrained to multiples of
/// [`GRID`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawBudget")]
pub struct PixelBudget {
    min_pixels: u64,
    max_pixels: u64,
}

#[derive(Deserialize)]
struct RawBudget {
    min_pixels: u64,
    max_pixels: u64,
}

impl TryFrom<RawBudget> for PixelBudget {
    type Error = ToolboxError;

    fn try_from(raw: RawBudget) -> Result<Self, ToolboxError> {
        PixelBudget::new(raw.min_pixels, raw.max_pixels)
    }
}

impl PixelBudget {
    pub fn new(min_pixels: u64, max_pixels: u64) -> Result<Self, ToolboxError> {
        if min_pixels == 0 || min_pixels > max_pixels {
            return Err(ToolboxError::BadBudget(format!(
                "need 0 < min_pixels <= max_pixels, got min={min_pixels} max={max_pixels}"
            )));
        }
        Ok(Self {
            min_pixels,
            max_pixels,
        })
    }

    /// The training budget: min 4·28·28, max 1024·28·28.
    pub fn training() -> Self {
        Self::new(MIN_PIXELS, 1024 * 28 * 28).expect("static budget")
    }

    /// Low-resolution preset: max 256·28·28.
    pub fn low() -> Self {
        Self::new(MIN_PIXELS, 256 * 28 * 28).expect("static budget")
    }

    /// Medium-resolution preset: max 2048·28·28.
    pub fn med() -> Self {
        Self::new(MIN_PIXELS, 2048 * 28 * 28).expect("static budget")
    }

    /// High-resolution preset: max 16384·28·28.
    pub fn high() -> Self {
        Self::new(MIN_PIXELS, 16384 * 28 * 28).expect("static budget")
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "low" => Some(Self::low()),
            "med" => Some(Self::med()),
            "high" => Some(Self::high()),
            _ => None,
        }
    }

    /// Budget with max = `units`·28·28 and the standard minimum.
    pub fn custom_units(units: u64) -> Result<Self, ToolboxError> {
        Self::new(MIN_PIXELS, units * 28 * 28)
    }

    pub fn min_pixels(&self) -> u64 {
        self.min_pixels
    }

    pub fn max_pixels(&self) -> u64 {
        self.max_pixels
    }

    /// True iff `w`×`h` is grid-aligned and inside the budget.
    pub fn admits(&self, w: u32, h: u32) -> bool {
        let area = u64::from(w) * u64::from(h);
        w > 0
            && h > 0
            && w % GRID == 0
            && h % GRID == 0
            && area >= self.min_pixels
            && area <= self.max_pixels
    }
}

/// Train-time vs inference-time tool semantics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToolMode {
    Train,
    Infer,
}

/// Interpolation kernel for zooming and budget resizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Bicubic,
    Bilinear,
    Nearest,
    Lanczos,
}

impl Interpolation {
    fn filter(self) -> imageops::FilterType {
        match self {
            Interpolation::Bicubic => imageops::FilterType::CatmullRom,
            Interpolation::Bilinear => imageops::FilterType::Triangle,
            Interpolation::Nearest => imageops::FilterType::Nearest,
            Interpolation::Lanczos => imageops::FilterType::Lanczos3,
        }
    }
}

/// Focus-mode ablation axis: force `focus_area` to crop, draw, or fall back
/// to reusing the original image, regardless of mode defaults
/// (Train → draw, Infer → crop).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FocusVariant {
    Crop,
    Draw,
    ReuseOriginal,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ToolOptions {
    #[serde(default)]
    pub interpolation: Interpolation,
    /// `None` keeps the mode default.
    #[serde(default)]
    pub focus_variant: Option<FocusVariant>,
}

/// Default zoom factor when a `zoom_in` command omits one.
pub const DEFAULT_ZOOM_FACTOR: f64 = 2.0;

// ---------------------------------------------------------------------------
// smart_resize
// ---------------------------------------------------------------------------

/// Maps arbitrary dimensions to the nearest multiple-of-28 pair inside the
/// budget, preserving aspect ratio within one grid cell of rounding.
///
/// Dimensions already grid-aligned and inside the budget are returned
/// unchanged. Over-budget inputs scale down by `β = √(w·h / max)` with
/// floor-to-grid; under-budget inputs scale up by `β = √(min / (w·h))` with
/// ceil-to-grid.
pub fn smart_resize(
    width: u32,
    height: u32,
    budget: &PixelBudget,
) -> Result<(u32, u32), ToolboxError> {
    let unsat = || ToolboxError::Unsatisfiable { width, height };
    if width == 0 || height == 0 {
        return Err(unsat());
    }
    let grid = f64::from(GRID);
    let (w, h) = (f64::from(width), f64::from(height));

    let mut w_bar = ((w / grid).round() * grid).max(grid);
    let mut h_bar = ((h / grid).round() * grid).max(grid);
    let area = w_bar * h_bar;
    let (min, max) = (budget.min_pixels as f64, budget.max_pixels as f64);
    if area > max {
        let beta = (w * h / max).sqrt();
        w_bar = (w / beta / grid).floor() * grid;
        h_bar = (h / beta / grid).floor() * grid;
    } else if area < min {
        let beta = (min / (w * h)).sqrt();
        w_bar = (w * beta / grid).ceil() * grid;
        h_bar = (h * beta / grid).ceil() * grid;
    }

    if w_bar < 1.0 || h_bar < 1.0 {
        return Err(unsat());
    }
    let (rw, rh) = (w_bar as u32, h_bar as u32);
    if !budget.admits(rw, rh) {
        return Err(unsat());
    }
    // Aspect drift must stay within one grid cell of rounding.
    let (rwf, rhf) = (f64::from(rw), f64::from(rh));
    let drift = (rwf / rhf - w / h).abs();
    let bound = grid * (1.0 / rhf).max(rwf / (rhf * rhf));
    if drift > bound {
        return Err(unsat());
    }
    Ok((rw, rh))
}

fn resize_pixels(img: &RgbImage, w: u32, h: u32, interp: Interpolation) -> RgbImage {
    if img.width() == w && img.height() == h {
        img.clone()
    } else {
        imageops::resize(img, w, h, interp.filter())
    }
}

/// Resizes a freshly decoded root image under the budget and registers it as
/// an original. Roots pass through here once at ingest so every image the
/// chain sees is budget-conformant.
pub fn prepare_root(
    store: &ImageStore,
    pixels: RgbImage,
    budget: &PixelBudget,
    opts: &ToolOptions,
) -> Result<ImageState, ToolboxError> {
    let (w, h) = smart_resize(pixels.width(), pixels.height(), budget)?;
    let resized = resize_pixels(&pixels, w, h, opts.interpolation);
    Ok(store.add_original(resized)?)
}

/// Decodes an image file and ingests it as a budget-conformant root.
pub fn load_prepared(
    store: &ImageStore,
    path: &std::path::Path,
    budget: &PixelBudget,
    opts: &ToolOptions,
) -> Result<ImageState, ToolboxError> {
    let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let decoded = image::load_from_memory(&bytes).map_err(|source| ImageError::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    prepare_root(store, decoded.to_rgb8(), budget, opts)
}

// ---------------------------------------------------------------------------
// focus_area
// ---------------------------------------------------------------------------

/// Pixel rectangle for a normalized bbox on a `w`×`h` image: floor on near
/// edges, ceil on far edges, so boundary pixels of the target are never
/// lost. Returns `(x, y, width, height)`.
pub fn crop_rect(bbox: &BBox, w: u32, h: u32) -> (u32, u32, u32, u32) {
    let (wf, hf) = (f64::from(w), f64::from(h));
    let x1 = (bbox.x1() * wf).floor().max(0.0) as u32;
    let y1 = (bbox.y1() * hf).floor().max(0.0) as u32;
    let x2 = ((bbox.x2() * wf).ceil() as u32).min(w);
    let y2 = ((bbox.y2() * hf).ceil() as u32).min(h);
    (x1, y1, x2.saturating_sub(x1), y2.saturating_sub(y1))
}

/// Symmetrically expands `[lo, lo+size)` to `min_size` within `[0, limit)`,
/// shifting toward the interior at the borders.
fn expand_axis(lo: u32, size: u32, limit: u32, min_size: u32) -> (u32, u32) {
    if size >= min_size {
        return (lo, size);
    }
    if limit <= min_size {
        return (0, limit);
    }
    let need = i64::from(min_size - size);
    let mut new_lo = i64::from(lo) - need / 2;
    let mut new_hi = new_lo + i64::from(min_size);
    if new_lo < 0 {
        new_hi -= new_lo;
        new_lo = 0;
    }
    if new_hi > i64::from(limit) {
        new_lo -= new_hi - i64::from(limit);
        new_hi = i64::from(limit);
    }
    let new_lo = new_lo.max(0);
    (new_lo as u32, (new_hi - new_lo) as u32)
}

fn draw_bbox(img: &mut RgbImage, bbox: &BBox) {
    let (w, h) = (img.width(), img.height());
    let (x, y, cw, ch) = crop_rect(bbox, w, h);
    if cw == 0 || ch == 0 {
        return;
    }
    let (x2, y2) = (x + cw, y + ch); // exclusive
    let stroke = (f64::from(w.min(h)) * 0.003).round().max(2.0) as u32;
    let color = Rgb([255, 0, 0]);
    for t in 0..stroke {
        let (top, bottom) = (y.saturating_add(t), y2.saturating_sub(1 + t));
        for px in x..x2 {
            if top < h {
                img.put_pixel(px, top, color);
            }
            if bottom < h && bottom >= y {
                img.put_pixel(px, bottom, color);
            }
        }
        let (left, right) = (x.saturating_add(t), x2.saturating_sub(1 + t));
        for py in y..y2 {
            if left < w {
                img.put_pixel(left, py, color);
            }
            if right < w && right >= x {
                img.put_pixel(right, py, color);
            }
        }
    }
}

/// `focus_area`: Train draws the bbox onto the image (dimensions preserved);
/// Infer crops the bbox region (with sub-grid crops symmetrically expanded
/// to 28×28) and budget-resizes the result. An explicit
/// [`FocusVariant`] overrides the mode default; `ReuseOriginal` falls back
/// to [`reuse`] semantics.
pub fn focus_area(
    store: &ImageStore,
    image: &ImageState,
    bbox: &BBox,
    mode: ToolMode,
    budget: &PixelBudget,
    opts: &ToolOptions,
) -> Result<ImageState, ToolboxError> {
    let variant = opts.focus_variant.unwrap_or(match mode {
        ToolMode::Train => FocusVariant::Draw,
        ToolMode::Infer => FocusVariant::Crop,
    });
    match variant {
        FocusVariant::Draw => {
            let mut pixels = image.pixels().clone();
            draw_bbox(&mut pixels, bbox);
            Ok(store.add_derived(pixels, ToolName::FocusArea, image)?)
        }
        FocusVariant::Crop => {
            let (x, y, cw, ch) = crop_rect(bbox, image.width(), image.height());
            if cw == 0 || ch == 0 {
                return Err(ToolboxError::CropTooSmall);
            }
            let (x, cw) = expand_axis(x, cw, image.width(), GRID);
            let (y, ch) = expand_axis(y, ch, image.height(), GRID);
            let cropped = imageops::crop_imm(image.pixels(), x, y, cw, ch).to_image();
            let (rw, rh) = smart_resize(cw, ch, budget)?;
            let resized = resize_pixels(&cropped, rw, rh, opts.interpolation);
            Ok(store.add_derived(resized, ToolName::FocusArea, image)?)
        }
        FocusVariant::ReuseOriginal => {
            reuse_as(store, image, budget, opts, ToolName::FocusArea)
        }
    }
}

// ---------------------------------------------------------------------------
// zoom_in
// ---------------------------------------------------------------------------

/// Target dimensions before budget resizing: `(round(w·f), round(h·f))`,
/// with `f` clamped so the pre-resize area stays ≤ 4×max_pixels.
pub fn zoom_target_dims(w: u32, h: u32, factor: f64, budget: &PixelBudget) -> (u32, u32) {
    let area = f64::from(w) * f64::from(h);
    let cap = (4.0 * budget.max_pixels as f64 / area).sqrt();
    let f = factor.min(cap).max(1.0);
    (
        (f64::from(w) * f).round().max(1.0) as u32,
        (f64::from(h) * f).round().max(1.0) as u32,
    )
}

/// `zoom_in`: magnifies the whole image by `factor` via interpolation, then
/// budget-resizes.
pub fn zoom_in(
    store: &ImageStore,
    image: &ImageState,
    factor: f64,
    budget: &PixelBudget,
    opts: &ToolOptions,
) -> Result<ImageState, ToolboxError> {
    if !(factor > 1.0) || !factor.is_finite() {
        return Err(ToolboxError::BadFactor(factor));
    }
    let (tw, th) = zoom_target_dims(image.width(), image.height(), factor, budget);
    let magnified = resize_pixels(image.pixels(), tw, th, opts.interpolation);
    let (rw, rh) = smart_resize(tw, th, budget)?;
    let resized = resize_pixels(&magnified, rw, rh, opts.interpolation);
    Ok(store.add_derived(resized, ToolName::ZoomIn, image)?)
}

// ---------------------------------------------------------------------------
// reuse
// ---------------------------------------------------------------------------

fn reuse_as(
    store: &ImageStore,
    image: &ImageState,
    budget: &PixelBudget,
    opts: &ToolOptions,
    tool: ToolName,
) -> Result<ImageState, ToolboxError> {
    let original = store.walk_to_original(image)?;
    let (rw, rh) = smart_resize(original.width(), original.height(), budget)?;
    let pixels = resize_pixels(original.pixels(), rw, rh, opts.interpolation);
    Ok(store.add_derived(pixels, tool, &original)?)
}

/// `reuse`: re-injects the chain's Original image (walking provenance links
/// from any derived input), re-resized under the active budget.
pub fn reuse(
    store: &ImageStore,
    image: &ImageState,
    budget: &PixelBudget,
    opts: &ToolOptions,
) -> Result<ImageState, ToolboxError> {
    reuse_as(store, image, budget, opts, ToolName::Reuse)
}

// ---------------------------------------------------------------------------
// dispatch
// ---------------------------------------------------------------------------

/// Dispatches a validated command to its tool: `I_t = T(I, C_t)`.
pub fn apply_tool(
    store: &ImageStore,
    image: &ImageState,
    cmd: &ToolCommand,
    mode: ToolMode,
    budget: &PixelBudget,
    opts: &ToolOptions,
) -> Result<ImageState, ToolboxError> {
    match cmd {
        ToolCommand::FocusArea { bbox, .. } => focus_area(store, image, bbox, mode, budget, opts),
        ToolCommand::ZoomIn { factor } => zoom_in(
            store,
            image,
            factor.unwrap_or(DEFAULT_ZOOM_FACTOR),
            budget,
            opts,
        ),
        ToolCommand::Reuse => reuse(store, image, budget, opts),
    }
}
