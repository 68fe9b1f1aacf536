use std::path::Path;

use image::{ImageError, ImageFormat, RgbImage};

use super::{check_dims, CorpusError, Image};

fn decode_err(path: &Path, e: ImageError) -> CorpusError {
    let p = path.display().to_string();
    match e {
        ImageError::Unsupported(u) => CorpusError::UnsupportedFormat(format!("{p}: {u}")),
        ImageError::IoError(source) if source.kind() == std::io::ErrorKind::NotFound => CorpusError::NotFound(p),
        ImageError::IoError(source) => CorpusError::Io { path: p, source },
        other => CorpusError::Decode { path: p, reason: other.to_string() },
    }
}

/// Reads an 8-bit PNG or binary PPM. Both sides must be multiples of `patch`.
pub fn load_image(path: impl AsRef<Path>, patch: usize) -> Result<Image, CorpusError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(CorpusError::NotFound(path.display().to_string()));
    }
    let format = ImageFormat::from_path(path).map_err(|e| decode_err(path, e))?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Pnm) {
        return Err(CorpusError::UnsupportedFormat(format!("{}: {format:?}", path.display())));
    }
    let rgb = image::open(path).map_err(|e| decode_err(path, e))?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    check_dims(h, w, patch)?;
    let data = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Image::new(h, w, data)
}

/// Writes an 8-bit RGB PNG, rounding to the nearest level.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let raw = img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = RgbImage::from_raw(img.width() as u32, img.height() as u32, raw).expect("buffer sized from image");
    buf.save_with_format(path, ImageFormat::Png).map_err(|e| decode_err(path, e))
}
