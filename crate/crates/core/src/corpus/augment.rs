use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Image;

/// Mild crop jitter and grayscale toggling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Largest fraction of each side that a crop may remove.
    pub crop_jitter: f64,
    pub grayscale_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { enabled: false, crop_jitter: 0.125, grayscale_prob: 0.1 }
    }
}

fn bilinear(img: &Image, y: f64, x: f64) -> [f32; 3] {
    let (h, w) = (img.height(), img.width());
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let (a, b, c, d) = (img.pixel(y0, x0), img.pixel(y0, x1), img.pixel(y1, x0), img.pixel(y1, x1));
    [0, 1, 2].map(|k| (a[k] * (1.0 - fx) + b[k] * fx) * (1.0 - fy) + (c[k] * (1.0 - fx) + d[k] * fx) * fy)
}

/// Returns the input unchanged when disabled.
pub fn augment<R: Rng>(img: &Image, cfg: &AugmentConfig, rng: &mut R) -> Image {
    if !cfg.enabled {
        return img.clone();
    }
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    if cfg.crop_jitter > 0.0 {
        let keep = 1.0 - rng.random_range(0.0..=cfg.crop_jitter);
        let (ch, cw) = (h as f64 * keep, w as f64 * keep);
        let oy = rng.random_range(0.0..=h as f64 - ch);
        let ox = rng.random_range(0.0..=w as f64 - cw);
        for y in 0..h {
            for x in 0..w {
                let sy = oy + (y as f64 + 0.5) * ch / h as f64 - 0.5;
                let sx = ox + (x as f64 + 0.5) * cw / w as f64 - 0.5;
                out.set_pixel(y, x, bilinear(img, sy, sx));
            }
        }
    }
    if rng.random_bool(cfg.grayscale_prob) {
        for y in 0..h {
            for x in 0..w {
                let p = out.pixel(y, x);
                let l = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
                out.set_pixel(y, x, [l; 3]);
            }
        }
    }
    out
}
