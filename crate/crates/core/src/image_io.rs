//! 8-bit RGB PNG and binary PPM I/O; tensors hold `[0, 1]` values.

use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Load an image as a `(1, 3, H, W)` tensor.
pub fn load<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    Ok(from_rgb(&img))
}

pub fn from_rgb<T: Real>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = img.dimensions();
    Tensor::from_fn(Shape::new(1, 3, h as usize, w as usize), |_, c, y, x| {
        T::of(img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
    })
}

/// First image of the batch, clamped and rounded to 8 bits.
pub fn to_rgb<T: Real>(t: &Tensor<T>) -> Result<RgbImage> {
    let s = t.shape();
    if s.c != 3 {
        return Err(Error::shape("to_rgb", format!("expected 3 channels, got {s}")));
    }
    Ok(RgbImage::from_fn(s.w as u32, s.h as u32, |x, y| {
        let px = |c| (t.at(0, c, y as usize, x as usize).f64().clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    }))
}

/// Save as PPM when the extension is `.ppm`, otherwise PNG.
pub fn save<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("ppm") => ImageFormat::Pnm,
        _ => ImageFormat::Png,
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    to_rgb(t)?.save_with_format(path, format).map_err(|e| image_err(path, e))
}

/// Single-channel 8-bit image from a `(h, w)` row-major grid of bytes.
pub fn save_gray(path: &Path, w: usize, h: usize, pixels: Vec<u8>) -> Result<()> {
    let img = image::GrayImage::from_raw(w as u32, h as u32, pixels)
        .ok_or_else(|| Error::InvalidArgument(format!("gray image buffer does not match {w}x{h}")))?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    img.save_with_format(path, ImageFormat::Png).map_err(|e| image_err(path, e))
}

/// Image files (png, ppm) directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                    Some("png" | "ppm")
                )
        })
        .collect();
    files.sort();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_and_ppm_round_trip_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::<f32>::from_fn(Shape::new(1, 3, 5, 7), |_, c, y, x| ((c * 50 + y * 20 + x * 3) % 256) as f32 / 255.0);
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            save(&p, &t).unwrap();
            let back: Tensor<f32> = load(&p).unwrap();
            assert!(back.max_abs_diff(&t) < 1e-6);
        }
        assert_eq!(list_images(dir.path()).unwrap().len(), 2);
    }
}
