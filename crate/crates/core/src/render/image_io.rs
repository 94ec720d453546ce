use std::io::Write;
use std::path::Path;

use super::RenderError;

/// Rendered RGB image in `[0, 1]` plus per-pixel final transmittance.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    /// Row-major `H × W × 3`.
    pub pixels: Vec<f64>,
    /// Row-major `H × W`.
    pub transmittance: Vec<f64>,
}

impl RenderedImage {
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        to_rgb8(&self.pixels)
    }

    /// Writes PPM for `.ppm` paths and PNG otherwise.
    pub fn save(&self, path: &Path) -> Result<(), RenderError> {
        save_rgb(path, self.width, self.height, &self.pixels)
    }
}

/// `round(clamp(c, 0, 1) · 255)` per channel.
pub fn to_rgb8(pixels: &[f64]) -> Vec<u8> {
    pixels
        .iter()
        .map(|&c| (c.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn write_ppm(path: &Path, width: usize, height: usize, pixels: &[f64]) -> Result<(), RenderError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{width} {height}\n255\n")?;
    f.write_all(&to_rgb8(pixels))?;
    f.flush()?;
    Ok(())
}

pub fn write_png(path: &Path, width: usize, height: usize, pixels: &[f64]) -> Result<(), RenderError> {
    let buf = image::RgbImage::from_raw(width as u32, height as u32, to_rgb8(pixels))
        .ok_or(RenderError::InvalidGaussian("pixel buffer does not match image size"))?;
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub(crate) fn save_rgb(path: &Path, width: usize, height: usize, pixels: &[f64]) -> Result<(), RenderError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("ppm") => write_ppm(path, width, height, pixels),
        _ => write_png(path, width, height, pixels),
    }
}
