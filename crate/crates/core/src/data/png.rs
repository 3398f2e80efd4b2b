//! Depth maps as 16-bit grayscale PNG (meters × 256, 0 = no measurement),
//! RGB images as 8-bit PNG.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, ImageFormat, ImageReader, Luma, Rgb, RgbImage};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::graph::SparseDepthMap;
use crate::io::atomic_path;

/// Pixel units per meter in depth PNGs.
pub const DEPTH_PNG_SCALE: f64 = 256.0;

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    Ok(ImageReader::open(path)?.with_guessed_format()?.decode()?)
}

fn write_png<F: FnOnce(&Path) -> image::ImageResult<()>>(path: &Path, f: F) -> Result<()> {
    atomic_path(path, |tmp| f(tmp).map_err(Error::from))
}

/// Read a 16-bit single-channel depth PNG.
pub fn load_depth_png(path: &Path) -> Result<SparseDepthMap> {
    match open(path)? {
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            let depth = buf
                .into_raw()
                .into_iter()
                .map(|v| (v as f64 / DEPTH_PNG_SCALE) as f32)
                .collect();
            SparseDepthMap::from_depth(w as usize, h as usize, depth)
        }
        other => Err(format_err(
            path,
            format!("expected 16-bit single-channel PNG, found {:?}", other.color()),
        )),
    }
}

/// Write a depth map; values are rounded to the nearest 1/256 m and
/// saturate at the 16-bit limit.
pub fn save_depth_png(map: &SparseDepthMap, path: &Path) -> Result<()> {
    let raw: Vec<u16> = map
        .depth()
        .iter()
        .map(|&d| (d as f64 * DEPTH_PNG_SCALE).round().clamp(0.0, u16::MAX as f64) as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(map.width() as u32, map.height() as u32, raw).expect("buffer matches dimensions");
    write_png(path, |tmp| buf.save_with_format(tmp, ImageFormat::Png))
}

/// Read an 8-bit RGB PNG as `[3, H, W]` in `[0, 1]`.
pub fn load_rgb_png(path: &Path) -> Result<Tensor<f32>> {
    let img = match open(path)? {
        DynamicImage::ImageRgb8(buf) => buf,
        other => {
            return Err(format_err(
                path,
                format!("expected 8-bit RGB PNG, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * w * h + y as usize * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Write a `[3, H, W]` image with values in `[0, 1]`.
pub fn save_rgb_png(rgb: &Tensor<f32>, path: &Path) -> Result<()> {
    let [_, h, w] = rgb_dims(rgb)?;
    let d = rgb.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        let q = |c: usize| (d[c * w * h + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(0), q(1), q(2)])
    });
    write_png(path, |tmp| img.save_with_format(tmp, ImageFormat::Png))
}

fn rgb_dims(rgb: &Tensor<f32>) -> Result<[usize; 3]> {
    match *rgb.shape() {
        [3, h, w] => Ok([3, h, w]),
        ref s => Err(Error::Argument(format!("expected a [3, H, W] image, got {s:?}"))),
    }
}

/// Write an `H×W` map as 8-bit grayscale, scaled so its minimum is black and
/// its maximum white.
pub fn save_gray_png(values: &[f32], width: usize, height: usize, path: &Path) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::Argument(format!(
            "{} values for a {width}x{height} image",
            values.len()
        )));
    }
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let img = GrayImage::from_fn(width as u32, height as u32, |x, y| {
        let v = values[y as usize * width + x as usize];
        Luma([(((v - lo) / span) * 255.0).round() as u8])
    });
    write_png(path, |tmp| img.save_with_format(tmp, ImageFormat::Png))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_value_convention() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(2, 1, vec![256, 0]).unwrap();
        buf.save(&path).unwrap();
        let m = load_depth_png(&path).unwrap();
        assert_eq!(m.depth(), &[1.0, 0.0]);
        assert_eq!(m.mask(), &[true, false]);
    }

    #[test]
    fn eight_bit_depth_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        GrayImage::new(2, 2).save(&path).unwrap();
        assert!(matches!(load_depth_png(&path), Err(Error::Format { .. })));
        let rgb = dir.path().join("c.png");
        RgbImage::new(2, 2).save(&rgb).unwrap();
        assert!(matches!(load_depth_png(&rgb), Err(Error::Format { .. })));
    }

    #[test]
    fn depth_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.png");
        let m = SparseDepthMap::from_depth(3, 2, vec![0.0, 1.5, 80.0 + 3.0 / 256.0, 0.25, 0.0, 255.0]).unwrap();
        save_depth_png(&m, &path).unwrap();
        assert_eq!(load_depth_png(&path).unwrap(), m);
    }

    #[test]
    fn rgb_roundtrip_is_quantised() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.png");
        let t = Tensor::new(vec![3, 2, 2], (0..12).map(|i| i as f32 / 11.0).collect()).unwrap();
        save_rgb_png(&t, &path).unwrap();
        let back = load_rgb_png(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
