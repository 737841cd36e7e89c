//! 8-bit RGB PNG frames <-> `[1, 3, h, w]` tensors in `[0, 1]`.

use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn load_frame(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| image_err(path, e.to_string()))?;
    let rgb: RgbImage = match img {
        DynamicImage::ImageRgb8(i) => i,
        DynamicImage::ImageRgba8(_) | DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => img.to_rgb8(),
        other => {
            return Err(image_err(
                path,
                format!("unsupported pixel format {:?}; expected 8-bit RGB", other.color()),
            ))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.into_raw();
    Ok(Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
        raw[(y * w + x) * 3 + c] as f32 / 255.0
    }))
}

/// Loads frames that must all share one size.
pub fn load_frames<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<Tensor<f32>>> {
    let mut out: Vec<Tensor<f32>> = Vec::with_capacity(paths.len());
    for p in paths {
        let f = load_frame(p)?;
        if let Some(first) = out.first() {
            if first.shape() != f.shape() {
                return Err(image_err(
                    p.as_ref(),
                    format!(
                        "size {}x{} differs from the first frame's {}x{}",
                        f.h(),
                        f.w(),
                        first.h(),
                        first.w()
                    ),
                ));
            }
        }
        out.push(f);
    }
    Ok(out)
}

/// Quantises to 8 bits (round half away from zero) and writes a PNG.
pub fn save_frame(path: impl AsRef<Path>, frame: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    if frame.n() != 1 || frame.c() != 3 {
        return Err(image_err(path, format!("expected a [1, 3, h, w] frame, got {:?}", frame.shape())));
    }
    let (h, w) = (frame.h(), frame.w());
    let mut raw = vec![0u8; h * w * 3];
    for c in 0..3 {
        for (i, &v) in frame.plane(0, c).iter().enumerate() {
            let v = if v.is_finite() { v } else { 0.0 };
            raw[i * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized from dims");
    img.save(path).map_err(|e| image_err(path, e.to_string()))
}

/// Writes `frame_%06d.png` files into `dir`, returning their paths.
pub fn save_frames(dir: impl AsRef<Path>, frames: &[Tensor<f32>]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let p = dir.join(frame_name(i));
            save_frame(&p, f).map(|_| p)
        })
        .collect()
}

pub fn frame_name(index: usize) -> String {
    format!("frame_{index:06}.png")
}

/// Parses the index out of a `frame_%06d.png` file name.
pub fn parse_frame_name(name: &str) -> Option<usize> {
    name.strip_prefix("frame_")?.strip_suffix(".png")?.parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_within_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Tensor::<f32>::from_fn([1, 3, 9, 13], |_| rng.random::<f32>());
        let p = dir.path().join("x.png");
        save_frame(&p, &f).unwrap();
        let g = load_frame(&p).unwrap();
        assert!(g.max_abs_diff(&f).unwrap() <= 1.0 / 510.0 + 1e-6);
    }

    #[test]
    fn sixteen_bit_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("deep.png");
        let img = image::ImageBuffer::<image::Rgb<u16>, _>::from_pixel(4, 4, image::Rgb([1000u16, 2, 3]));
        img.save(&p).unwrap();
        let err = load_frame(&p).unwrap_err().to_string();
        assert!(err.contains("8-bit"), "{err}");
    }

    #[test]
    fn missing_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let ok = dir.path().join("a.png");
        save_frame(&ok, &Tensor::zeros([1, 3, 4, 4])).unwrap();
        let missing = dir.path().join("missing_frame.png");
        let err = load_frames(&[ok, missing]).unwrap_err().to_string();
        assert!(err.contains("missing_frame.png"), "{err}");
    }

    #[test]
    fn frame_names() {
        assert_eq!(frame_name(12), "frame_000012.png");
        assert_eq!(parse_frame_name("frame_000012.png"), Some(12));
        assert_eq!(parse_frame_name("frame_12.jpg"), None);
    }
}
