use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, RgbImage};
use ndarray::Array3;

use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 224;

/// A preprocessed image: `IMAGE_SIZE x IMAGE_SIZE x 3`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pixels: Array3<f32>,
}

impl ImageTensor {
    pub fn from_array(pixels: Array3<f32>) -> Result<Self> {
        if pixels.shape() != [IMAGE_SIZE, IMAGE_SIZE, 3] {
            return Err(Error::Shape(format!(
                "image tensor must be {IMAGE_SIZE}x{IMAGE_SIZE}x3, got {:?}",
                pixels.shape()
            )));
        }
        Ok(ImageTensor {
            pixels: pixels.mapv(|v| v.clamp(0.0, 1.0)),
        })
    }

    pub fn constant(value: f32) -> Self {
        ImageTensor {
            pixels: Array3::from_elem((IMAGE_SIZE, IMAGE_SIZE, 3), value.clamp(0.0, 1.0)),
        }
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }
}

pub fn load_and_preprocess_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    decode_dynamic(img, path)
}

/// Same as [`load_and_preprocess_image`] for an in-memory encoded image.
pub fn preprocess_encoded(bytes: &[u8]) -> Result<ImageTensor> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Image {
        path: "<memory>".into(),
        message: e.to_string(),
    })?;
    decode_dynamic(img, Path::new("<memory>"))
}

fn decode_dynamic(img: DynamicImage, path: &Path) -> Result<ImageTensor> {
    let rgb = match img {
        DynamicImage::ImageRgb8(rgb) => rgb,
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgba8(_)
        | DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => img.to_rgb8(),
        _ => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                message: "unsupported pixel format".into(),
            })
        }
    };
    Ok(preprocess_rgb(&rgb))
}

/// Bilinear resize to `IMAGE_SIZE` (skipped when already that size) and scale to `[0, 1]`.
pub fn preprocess_rgb(rgb: &RgbImage) -> ImageTensor {
    let size = IMAGE_SIZE as u32;
    let resized;
    let src = if rgb.dimensions() == (size, size) {
        rgb
    } else {
        resized = image::imageops::resize(rgb, size, size, FilterType::Triangle);
        &resized
    };
    let mut pixels = Array3::<f32>::zeros((IMAGE_SIZE, IMAGE_SIZE, 3));
    for (x, y, p) in src.enumerate_pixels() {
        for c in 0..3 {
            pixels[[y as usize, x as usize, c]] = p[c] as f32 / 255.0;
        }
    }
    ImageTensor { pixels }
}

#[cfg(test)]
mod tests {
    use image::Rgb;

    use super::*;

    fn save(img: &RgbImage, dir: &Path, name: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        img.save(&p).unwrap();
        p
    }

    #[test]
    fn native_size_passes_through() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn(224, 224, |x, y| {
            Rgb([(x % 256) as u8, (y % 256) as u8, ((x * y) % 256) as u8])
        });
        let t = load_and_preprocess_image(&save(&img, dir.path(), "a.png")).unwrap();
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                assert_eq!(t.pixels()[[y as usize, x as usize, c]], p[c] as f32 / 255.0);
            }
        }
    }

    #[test]
    fn constant_downscale_stays_constant() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_pixel(448, 448, Rgb([10, 128, 250]));
        let t = load_and_preprocess_image(&save(&img, dir.path(), "c.png")).unwrap();
        assert_eq!(t.pixels().shape(), &[224, 224, 3]);
        for px in t
            .pixels()
            .outer_iter()
            .flat_map(|row| row.outer_iter().map(|p| p.to_vec()).collect::<Vec<_>>())
        {
            assert_eq!(px, vec![10.0 / 255.0, 128.0 / 255.0, 250.0 / 255.0]);
        }
    }

    #[test]
    fn odd_aspect_ratio_resizes_to_square() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn(100, 300, |x, _| Rgb([x as u8, 0, 0]));
        let t = load_and_preprocess_image(&save(&img, dir.path(), "o.png")).unwrap();
        assert_eq!(t.pixels().shape(), &[224, 224, 3]);
        assert!(t.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn grayscale_is_converted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        image::GrayImage::from_pixel(50, 50, image::Luma([51]))
            .save(&p)
            .unwrap();
        let t = load_and_preprocess_image(&p).unwrap();
        assert!(t.pixels().iter().all(|&v| (v - 0.2).abs() < 1e-6));
    }

    #[test]
    fn garbage_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not a png").unwrap();
        assert!(matches!(load_and_preprocess_image(&p), Err(Error::Image { .. })));
    }
}
