//! 8-bit PNG reading and writing.

use std::path::Path;

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::metrics::SegmentationMask;
use crate::tensor::Tensor;

fn image_err(path: &Path, source: image::ImageError) -> Error {
    match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    }
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Grayscale `[H, W]` tensor with values in `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.into_luma8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    Ok(Tensor::from_vec(&[h as usize, w as usize], data))
}

/// Writes a `[H, W]` tensor (trailing dims) clamped to `[0, 1]`.
pub fn write_gray(path: &Path, t: &Tensor) -> Result<()> {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(t.data()[y as usize * w + x as usize])]));
    img.save_with_format(path, ImageFormat::Png).map_err(|e| image_err(path, e))
}

/// Pixels above 127 are foreground.
pub fn read_mask(path: &Path) -> Result<SegmentationMask> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(SegmentationMask::new(
        h as usize,
        w as usize,
        img.pixels().map(|p| p.0[0] > 127).collect(),
    ))
}

/// Writes 0/255.
pub fn write_mask(path: &Path, m: &SegmentationMask) -> Result<()> {
    let w = m.width();
    let img = GrayImage::from_fn(w as u32, m.height() as u32, |x, y| {
        Luma([if m.pixels()[y as usize * w + x as usize] { 255 } else { 0 }])
    });
    img.save_with_format(path, ImageFormat::Png).map_err(|e| image_err(path, e))
}

/// `rgb` holds `H * W` triples in `[0, 1]`.
pub fn write_rgb(path: &Path, h: usize, w: usize, rgb: &[[f64; 3]]) -> Result<()> {
    assert_eq!(rgb.len(), h * w);
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = rgb[y as usize * w + x as usize];
        Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
    });
    img.save_with_format(path, ImageFormat::Png).map_err(|e| image_err(path, e))
}
