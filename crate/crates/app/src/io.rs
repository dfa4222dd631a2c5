//! Image files: PNG (8/16-bit, gray or RGB) and binary PGM/PPM.

use std::io::Cursor;
use std::path::Path;

use genmatte_core::{AlphaMatte, Dims, ImageBuffer, Tensor3};
use image::{ColorType, DynamicImage, ImageFormat, Luma};

use crate::error::AppError;

const SUPPORTED: &str = "supported formats: PNG (8/16-bit gray or RGB), binary PGM/PPM";

fn decode(bytes: &[u8]) -> Result<DynamicImage, AppError> {
    let format =
        image::guess_format(bytes).map_err(|_| AppError::Input(format!("unrecognised image data; {SUPPORTED}")))?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Pnm) {
        return Err(AppError::Input(format!(
            "{format:?} images are not accepted; {SUPPORTED}"
        )));
    }
    image::load_from_memory_with_format(bytes, format).map_err(|e| AppError::Input(format!("cannot decode image: {e}")))
}

fn is_gray(c: ColorType) -> bool {
    matches!(c, ColorType::L8 | ColorType::La8 | ColorType::L16 | ColorType::La16)
}

fn is_8bit(c: ColorType) -> bool {
    matches!(c, ColorType::L8 | ColorType::La8 | ColorType::Rgb8 | ColorType::Rgba8)
}

/// Decodes to `[0, 1]` values: 8-bit samples map by `/255`, deeper ones by
/// `/65535`. Gray files give one channel, colour files three; alpha is
/// dropped.
pub fn load_image_bytes(bytes: &[u8]) -> Result<ImageBuffer, AppError> {
    let img = decode(bytes)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let color = img.color();
    let (channels, data): (usize, Vec<f64>) = match (is_gray(color), is_8bit(color)) {
        (true, true) => (
            1,
            img.to_luma8()
                .into_raw()
                .into_iter()
                .map(|v| v as f64 / 255.0)
                .collect(),
        ),
        (true, false) => (
            1,
            img.to_luma16()
                .into_raw()
                .into_iter()
                .map(|v| v as f64 / 65535.0)
                .collect(),
        ),
        (false, true) => (
            3,
            img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        ),
        (false, false) => (
            3,
            img.to_rgb16()
                .into_raw()
                .into_iter()
                .map(|v| v as f64 / 65535.0)
                .collect(),
        ),
    };
    // interleaved HWC to planar CHW
    let t = Tensor3::from_fn(Dims::new(channels, h, w), |c, y, x| data[(y * w + x) * channels + c]);
    Ok(ImageBuffer::new(t)?)
}

pub fn load_image(path: &Path) -> Result<ImageBuffer, AppError> {
    let bytes = std::fs::read(path).map_err(|e| AppError::Input(format!("cannot read {}: {e}", path.display())))?;
    load_image_bytes(&bytes)
}

/// Single-channel view of an image file (luminance for colour files).
pub fn load_gray_bytes(bytes: &[u8]) -> Result<Tensor3, AppError> {
    let img = load_image_bytes(bytes)?;
    Ok(if img.channels() == 1 {
        img.into_tensor()
    } else {
        img.luminance()
    })
}

pub fn load_gray(path: &Path) -> Result<Tensor3, AppError> {
    let bytes = std::fs::read(path).map_err(|e| AppError::Input(format!("cannot read {}: {e}", path.display())))?;
    load_gray_bytes(&bytes)
}

/// 16-bit gray PNG of a single-channel `[0, 1]` tensor.
pub fn encode_gray16(t: &Tensor3) -> Result<Vec<u8>, AppError> {
    if t.channels() != 1 {
        return Err(AppError::Internal(format!(
            "expected one channel, got {}",
            t.channels()
        )));
    }
    let raw: Vec<u16> = t
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf = image::ImageBuffer::<Luma<u16>, Vec<u16>>::from_raw(t.width() as u32, t.height() as u32, raw)
        .ok_or_else(|| AppError::Internal("image buffer size mismatch".into()))?;
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| AppError::Internal(format!("PNG encoding failed: {e}")))?;
    Ok(out.into_inner())
}

pub fn encode_matte(m: &AlphaMatte) -> Result<Vec<u8>, AppError> {
    encode_gray16(m.tensor())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), AppError> {
    std::fs::write(path, bytes).map_err(|e| AppError::Internal(format!("cannot write {}: {e}", path.display())))
}
