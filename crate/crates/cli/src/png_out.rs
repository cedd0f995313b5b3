//! 8-bit PNG export.

use std::path::Path;

use cfclip_core::backends::Image;
use cfclip_core::Error;

use crate::CliResult;

/// Clamps to `[0, 1]`, scales by 255 and rounds half away from zero.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn color_type(channels: usize) -> CliResult<png::ColorType> {
    Ok(match channels {
        1 => png::ColorType::Grayscale,
        2 => png::ColorType::GrayscaleAlpha,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        c => return Err(Error::BadDims(format!("cannot write {c}-channel images as PNG")).into()),
    })
}

/// PNG file bytes for `img`.
pub fn encode(img: &Image) -> CliResult<Vec<u8>> {
    let color = color_type(img.channels())?;
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let data: Vec<u8> = img.pixels().iter().map(|&v| quantize(v)).collect();
    let mut w = enc.write_header()?;
    w.write_image_data(&data)?;
    w.finish()?;
    Ok(out)
}

pub fn write_png(img: &Image, path: &Path) -> CliResult<()> {
    std::fs::write(path, encode(img)?).map_err(Error::from)?;
    Ok(())
}
