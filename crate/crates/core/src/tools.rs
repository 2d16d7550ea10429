//! `select_image` and `zoom_in`: the two visual tools available inside an episode.

use std::fmt;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{DynamicImage, GenericImageView, ImageFormat, ImageReader, RgbaImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::protocol::{BBox, ImageSource, ToolCall, ToolKind};
use crate::store::Candidate;

/// Crops smaller than this on either side are upscaled.
pub const MIN_CROP_DIM: u32 = 16;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ToolError {
    #[error("index {index} outside 1..={window}")]
    OutOfRange { index: usize, window: usize },
    #[error("candidate {index} ({id}) has no image")]
    NoImage { index: usize, id: String },
    #[error("empty selection")]
    EmptySelection,
    #[error("index {0} selected twice")]
    DuplicateIndex(usize),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("cannot decode {path}: {message}")]
    Decode { path: String, message: String },
    #[error("bounding box {0:?} is not a normalised rectangle")]
    InvalidBbox([f64; 4]),
    #[error("bounding box {0:?} has zero area after clamping")]
    DegenerateBbox([f64; 4]),
    #[error("tool budget of {0} calls exhausted")]
    BudgetExhausted(u32),
}

/// A tool failure tagged with the tool that produced it.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{tool}: {source}")]
pub struct ExecutionError {
    pub tool: ToolKind,
    #[source]
    pub source: ToolError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

/// One image returned to the policy. The payload is kept in memory for the
/// next message but only its digest is serialised, and equality ignores it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvidenceImage {
    pub label: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<PixelRect>,
    pub width: u32,
    pub height: u32,
    pub sha256: String,
    #[serde(skip)]
    pub payload: Option<ImageSource>,
}

impl PartialEq for EvidenceImage {
    fn eq(&self, other: &Self) -> bool {
        self.label == other.label
            && self.source == other.source
            && self.region == other.region
            && self.width == other.width
            && self.height == other.height
            && self.sha256 == other.sha256
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub images: Vec<EvidenceImage>,
    pub note: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Nudges products like `0.1 * 100 = 10.000000000000002` back onto the integer
/// they are meant to be before flooring or ceiling.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 * r.abs().max(1.0) {
        r
    } else {
        v
    }
}

/// Pixel rectangle covered by `bbox`: `[floor(x0*W), ceil(x1*W)) x [floor(y0*H), ceil(y1*H))`,
/// clamped to the image.
pub fn crop_rect(width: u32, height: u32, bbox: BBox) -> Result<PixelRect, ToolError> {
    let arr: [f64; 4] = bbox.into();
    if arr.iter().any(|v| !v.is_finite()) {
        return Err(ToolError::InvalidBbox(arr));
    }
    let (w, h) = (f64::from(width), f64::from(height));
    let clamp = |v: f64, hi: f64| v.clamp(0.0, hi) as u32;
    let x0 = clamp(snap(bbox.x0 * w).floor(), w);
    let y0 = clamp(snap(bbox.y0 * h).floor(), h);
    let x1 = clamp(snap(bbox.x1 * w).ceil(), w);
    let y1 = clamp(snap(bbox.y1 * h).ceil(), h);
    if x1 <= x0 || y1 <= y0 {
        return Err(ToolError::DegenerateBbox(arr));
    }
    Ok(PixelRect {
        x: x0,
        y: y0,
        width: x1 - x0,
        height: y1 - y0,
    })
}

fn upscale_nearest(img: &RgbaImage, factor: u32) -> RgbaImage {
    RgbaImage::from_fn(img.width() * factor, img.height() * factor, |x, y| {
        *img.get_pixel(x / factor, y / factor)
    })
}

/// Crops `img` to `bbox`. Crops whose short side is below [`MIN_CROP_DIM`] are
/// enlarged by pixel replication with the smallest integer factor that reaches it.
pub fn zoom_image(img: &DynamicImage, bbox: BBox) -> Result<(DynamicImage, PixelRect), ToolError> {
    let arr: [f64; 4] = bbox.into();
    if !bbox.is_valid() {
        if bbox.x0 == bbox.x1 || bbox.y0 == bbox.y1 {
            return Err(ToolError::DegenerateBbox(arr));
        }
        return Err(ToolError::InvalidBbox(arr));
    }
    let (w, h) = img.dimensions();
    let rect = crop_rect(w, h, bbox)?;
    let crop = img.crop_imm(rect.x, rect.y, rect.width, rect.height);
    let short = rect.width.min(rect.height);
    if short >= MIN_CROP_DIM {
        return Ok((crop, rect));
    }
    let factor = MIN_CROP_DIM.div_ceil(short);
    Ok((
        DynamicImage::ImageRgba8(upscale_nearest(&crop.to_rgba8(), factor)),
        rect,
    ))
}

pub fn encode_png(img: &DynamicImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .expect("PNG encoding into memory");
    out.into_inner()
}

/// Executes tool calls against a window. Relative image references resolve
/// against `image_root`.
#[derive(Debug, Clone, Default)]
pub struct VisualTools {
    image_root: Option<PathBuf>,
}

impl VisualTools {
    pub fn new(image_root: Option<PathBuf>) -> Self {
        VisualTools { image_root }
    }

    pub fn resolve(&self, reference: &str) -> PathBuf {
        let p = Path::new(reference);
        match &self.image_root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn image_of<'a>(
        &self,
        window: &'a [Candidate],
        index: usize,
    ) -> Result<(&'a Candidate, PathBuf), ToolError> {
        let cand = window
            .get(index.wrapping_sub(1))
            .filter(|_| index >= 1)
            .ok_or(ToolError::OutOfRange {
                index,
                window: window.len(),
            })?;
        let r = cand
            .image_ref
            .as_deref()
            .filter(|r| !r.is_empty())
            .ok_or_else(|| ToolError::NoImage {
                index,
                id: cand.id.clone(),
            })?;
        Ok((cand, self.resolve(r)))
    }

    fn read(path: &Path) -> Result<Vec<u8>, ToolError> {
        std::fs::read(path).map_err(|e| ToolError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Returns the requested candidates' stored images, unmodified, in request order.
    pub fn select_image(
        &self,
        window: &[Candidate],
        indices: &[usize],
    ) -> Result<Observation, ToolError> {
        if indices.is_empty() {
            return Err(ToolError::EmptySelection);
        }
        for (i, idx) in indices.iter().enumerate() {
            if indices[..i].contains(idx) {
                return Err(ToolError::DuplicateIndex(*idx));
            }
        }
        let targets = indices
            .iter()
            .map(|&i| self.image_of(window, i))
            .collect::<Result<Vec<_>, _>>()?;
        let mut images = Vec::with_capacity(targets.len());
        for (&index, (_, path)) in indices.iter().zip(targets) {
            let bytes = Self::read(&path)?;
            let decode_err = |message: String| ToolError::Decode {
                path: path.display().to_string(),
                message,
            };
            let reader = ImageReader::new(Cursor::new(&bytes))
                .with_guessed_format()
                .map_err(|e| decode_err(e.to_string()))?;
            let format = reader
                .format()
                .ok_or_else(|| decode_err("unrecognised image format".into()))?;
            let (width, height) = reader
                .into_dimensions()
                .map_err(|e| decode_err(e.to_string()))?;
            images.push(EvidenceImage {
                label: index.to_string(),
                source: path.display().to_string(),
                region: None,
                width,
                height,
                sha256: sha256_hex(&bytes),
                payload: Some(ImageSource::Bytes {
                    data: Arc::from(bytes),
                    mime: format.to_mime_type(),
                }),
            });
        }
        let list: Vec<String> = indices.iter().map(usize::to_string).collect();
        Ok(Observation {
            images,
            note: format!("selected candidate images {}", list.join(", ")),
        })
    }

    /// Crops candidate `target`'s image to `bbox` and returns the crop as PNG.
    pub fn zoom_in(
        &self,
        window: &[Candidate],
        target: usize,
        bbox: BBox,
    ) -> Result<Observation, ToolError> {
        let (_, path) = self.image_of(window, target)?;
        let bytes = Self::read(&path)?;
        let img = image::load_from_memory(&bytes).map_err(|e| ToolError::Decode {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let (crop, rect) = zoom_image(&img, bbox)?;
        let png = encode_png(&crop);
        Ok(Observation {
            images: vec![EvidenceImage {
                label: target.to_string(),
                source: path.display().to_string(),
                region: Some(rect),
                width: crop.width(),
                height: crop.height(),
                sha256: sha256_hex(&png),
                payload: Some(ImageSource::Bytes {
                    data: Arc::from(png),
                    mime: "image/png",
                }),
            }],
            note: format!(
                "zoomed region [{}, {}, {}, {}] of candidate {target} (pixels x={}..{}, y={}..{})",
                bbox.x0,
                bbox.y0,
                bbox.x1,
                bbox.y1,
                rect.x,
                rect.x + rect.width,
                rect.y,
                rect.y + rect.height
            ),
        })
    }

    /// Dispatches a call. `n_tool` counts successful executions only.
    pub fn execute(
        &self,
        call: &ToolCall,
        window: &[Candidate],
        n_tool: &mut u32,
    ) -> Result<Observation, ExecutionError> {
        let result = match call {
            ToolCall::SelectImage { indices } => self.select_image(window, indices),
            ToolCall::ZoomIn { target, bbox } => self.zoom_in(window, *target, *bbox),
        };
        match result {
            Ok(obs) => {
                *n_tool += 1;
                Ok(obs)
            }
            Err(source) => Err(ExecutionError {
                tool: call.kind(),
                source,
            }),
        }
    }
}

impl fmt::Display for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.note)
    }
}
