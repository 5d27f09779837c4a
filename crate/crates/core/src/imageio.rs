//! 8-bit RGB PNG/PPM reading and writing as `[3, H, W]` tensors in `[0, 1]`.

use std::path::Path;

use image::{ColorType, DynamicImage, ImageFormat, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, reason: impl ToString) -> Error {
    Error::Image { path: path.to_path_buf(), reason: reason.to_string() }
}

pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = ImageReader::open(path)
        .map_err(|e| image_err(path, e))?
        .with_guessed_format()
        .map_err(|e| image_err(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?;
    let rgb = match (img.color(), img) {
        (ColorType::Rgb8, DynamicImage::ImageRgb8(rgb)) => rgb,
        (ColorType::Rgb16 | ColorType::Rgba16 | ColorType::L16 | ColorType::La16, _) => {
            return Err(Error::UnsupportedDepth { path: path.to_path_buf(), depth: 16 })
        }
        (other, _) => return Err(image_err(path, format!("expected 8-bit RGB, found {other:?}"))),
    };
    Ok(from_rgb8(&rgb))
}

pub fn from_rgb8(rgb: &RgbImage) -> Tensor<f32> {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    })
}

/// Accepts `[3, H, W]` or `[1, 3, H, W]`.
pub fn to_rgb8(t: &Tensor<f32>) -> Result<RgbImage> {
    let (h, w) = match *t.shape() {
        [3, h, w] | [1, 3, h, w] => (h, w),
        _ => return Err(Error::Shape(format!("expected a [3, H, W] image, got {:?}", t.shape()))),
    };
    let d = t.data();
    let mut raw = vec![0u8; h * w * 3];
    for c in 0..3 {
        for p in 0..h * w {
            raw[p * 3 + c] = (d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized from extents"))
}

/// Format follows the extension: `.ppm`/`.pnm` write binary PPM, anything else PNG.
pub fn write_rgb(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let img = to_rgb8(t)?;
    let fmt = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("ppm" | "pnm") => ImageFormat::Pnm,
        _ => ImageFormat::Png,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    img.save_with_format(path, fmt).map_err(|e| image_err(path, e))
}

pub fn is_image_path(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm" | "pnm")
    )
}

/// Image files in `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_file() && is_image_path(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_within_half_a_level() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::<f32>::rand_uniform(&[3, 9, 13], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            write_rgb(&p, &t).unwrap();
            let back = read_rgb(&p).unwrap();
            assert!(back.max_abs_diff(&t).unwrap() <= 1.0 / 510.0 + 1e-7);
        }
    }

    #[test]
    fn extremes_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        for v in [0.0, 1.0] {
            let t = Tensor::full(&[3, 4, 4], v);
            let p = dir.path().join("x.png");
            write_rgb(&p, &t).unwrap();
            assert_eq!(read_rgb(&p).unwrap().data(), t.data());
        }
    }

    #[test]
    fn sixteen_bit_and_grey_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p16 = dir.path().join("deep.png");
        image::ImageBuffer::<image::Rgb<u16>, _>::from_pixel(4, 4, image::Rgb([1000u16, 2, 3])).save(&p16).unwrap();
        assert!(matches!(read_rgb(&p16), Err(Error::UnsupportedDepth { depth: 16, .. })));

        let pg = dir.path().join("grey.png");
        image::GrayImage::from_pixel(4, 4, image::Luma([7])).save(&pg).unwrap();
        assert!(matches!(read_rgb(&pg), Err(Error::Image { .. })));

        let bad = dir.path().join("bad.png");
        std::fs::write(&bad, b"not an image").unwrap();
        let err = read_rgb(&bad).unwrap_err().to_string();
        assert!(err.contains("bad.png"), "{err}");
    }
}
