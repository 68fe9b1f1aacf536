//! Deterministic synthetic scenes with query/box annotations, raster I/O
//! and the Laplacian-variance complexity metric.

mod augment;
mod complexity;
mod image_io;
mod manifest;
mod render;
pub mod vocab;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use augment::{augment, AugmentConfig};
pub use complexity::{laplacian_response, laplacian_variance, luminance};
pub use image_io::{load_image, save_image};
pub use manifest::{build_manifest, entry_seed, DatasetManifest, ManifestEntry, Split};
pub use render::{generate_scene, sample_spec, Background, CorpusParams, ObjectSpec, SceneSpec, Shape};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("could not place object {index} without overlap after {attempts} attempts")]
    Placement { index: usize, attempts: usize },
    #[error("invalid scene: {0}")]
    InvalidSpec(String),
    #[error("file not found: {0}")]
    NotFound(String),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("image is {height}x{width}; both sides must be positive multiples of {multiple}")]
    Dimension { height: usize, width: usize, multiple: usize },
    #[error("failed to decode {path}: {reason}")]
    Decode { path: String, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid manifest: {0}")]
    Manifest(String),
}

/// RGB raster, `height × width × 3`, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

pub const CHANNELS: usize = 3;

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, CorpusError> {
        if height == 0 || width == 0 || data.len() != height * width * CHANNELS {
            return Err(CorpusError::InvalidSpec(format!(
                "{height}x{width} image needs {} values, got {}",
                height * width * CHANNELS,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(CorpusError::InvalidSpec(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[i + c] = v.clamp(0.0, 1.0);
        }
    }

    /// Checks that both sides are multiples of `patch`.
    pub fn check_patch(&self, patch: usize) -> Result<(), CorpusError> {
        check_dims(self.height, self.width, patch)
    }

    /// Planar `[C, H, W]` copy, the layout the codec consumes.
    pub fn to_chw(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; CHANNELS * hw];
        for (p, px) in self.data.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                out[c * hw + p] = px[c];
            }
        }
        out
    }

    /// Inverse of [`Image::to_chw`]; values are clamped into `[0, 1]`.
    pub fn from_chw(height: usize, width: usize, chw: &[f32]) -> Result<Self, CorpusError> {
        let hw = height * width;
        if chw.len() != CHANNELS * hw {
            return Err(CorpusError::InvalidSpec(format!("planar buffer of {} values for {height}x{width}", chw.len())));
        }
        let mut data = vec![0.0; CHANNELS * hw];
        for p in 0..hw {
            for c in 0..CHANNELS {
                let v = chw[c * hw + p];
                data[p * CHANNELS + c] = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            }
        }
        Ok(Self { height, width, data })
    }

    /// Per-image mean color broadcast to every pixel.
    pub fn mean_color(&self) -> Image {
        let n = (self.height * self.width) as f64;
        let mut acc = [0.0f64; 3];
        for px in self.data.chunks_exact(CHANNELS) {
            for c in 0..CHANNELS {
                acc[c] += px[c] as f64;
            }
        }
        Image::filled(self.height, self.width, acc.map(|a| (a / n) as f32))
    }
}

pub(crate) fn check_dims(height: usize, width: usize, multiple: usize) -> Result<(), CorpusError> {
    if height == 0 || width == 0 || multiple == 0 || height % multiple != 0 || width % multiple != 0 {
        return Err(CorpusError::Dimension { height, width, multiple });
    }
    Ok(())
}

/// Inclusive pixel box, origin top-left. Serialized as `[x0, y0, x1, y1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl From<[usize; 4]> for BBox {
    fn from(v: [usize; 4]) -> Self {
        BBox { x0: v[0], y0: v[1], x1: v[2], y1: v[3] }
    }
}

impl From<BBox> for [usize; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn is_valid(&self) -> bool {
        self.x0 <= self.x1 && self.y0 <= self.y1
    }

    pub fn width(&self) -> usize {
        self.x1 + 1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 + 1 - self.y0
    }

    pub fn area(&self) -> usize {
        if self.is_valid() {
            self.width() * self.height()
        } else {
            0
        }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }

    pub fn within(&self, height: usize, width: usize) -> bool {
        self.is_valid() && self.x1 < width && self.y1 < height
    }

    pub fn intersects(&self, o: &BBox) -> bool {
        self.x0 <= o.x1 && o.x0 <= self.x1 && self.y0 <= o.y1 && o.y0 <= self.y1
    }

    pub fn as_tuple(&self) -> (usize, usize, usize, usize) {
        (self.x0, self.y0, self.x1, self.y1)
    }
}

/// A tokenized query with its relevant boxes. The `null` query has no boxes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySample {
    #[serde(rename = "tokens")]
    pub query_tokens: Vec<usize>,
    pub boxes: Vec<BBox>,
    #[serde(default)]
    pub image_id: u64,
}

impl QuerySample {
    pub fn null(image_id: u64) -> Self {
        Self { query_tokens: vec![vocab::NULL], boxes: Vec::new(), image_id }
    }

    pub fn is_null(&self) -> bool {
        self.query_tokens == [vocab::NULL]
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<(), CorpusError> {
        if self.query_tokens.is_empty() || self.query_tokens.len() > vocab::MAX_PREFIX {
            return Err(CorpusError::Manifest(format!("query must have 1..={} tokens", vocab::MAX_PREFIX)));
        }
        if let Some(t) = self.query_tokens.iter().find(|&&t| t >= vocab::SIZE) {
            return Err(CorpusError::Manifest(format!("query token {t} outside vocabulary")));
        }
        if self.is_null() != self.boxes.is_empty() {
            return Err(CorpusError::Manifest("boxes must be empty exactly for the null query".into()));
        }
        if let Some(b) = self.boxes.iter().find(|b| !b.within(height, width)) {
            return Err(CorpusError::Manifest(format!("box {:?} outside {height}x{width} image", b.as_tuple())));
        }
        Ok(())
    }

    /// Human-readable query text.
    pub fn text(&self) -> String {
        self.query_tokens.iter().map(|&t| vocab::word(t).unwrap_or("?")).collect::<Vec<_>>().join(" ")
    }
}
