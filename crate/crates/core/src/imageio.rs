//! Conversions between `(c, h, w)` float arrays in `[0, 1]` and 8-bit images.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds every value to the nearest multiple of 1/255, as an 8-bit save would.
pub fn quantize(img: &Array3<f32>) -> Array3<f32> {
    img.mapv(|v| to_u8(v) as f32 / 255.0)
}

pub fn to_rgb8(img: &Array3<f32>) -> Result<RgbImage> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::shape(&[3, h, w], &[c, h, w]));
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([
            to_u8(img[[0, y, x]]),
            to_u8(img[[1, y, x]]),
            to_u8(img[[2, y, x]]),
        ])
    }))
}

pub fn from_rgb8(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

pub fn mask_to_luma8(mask: &Array2<bool>) -> GrayImage {
    let (h, w) = mask.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    })
}

/// Pixels at or above 128 are set.
pub fn mask_from_luma8(img: &GrayImage) -> Array2<bool> {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] >= 128
    })
}

pub fn save_png(path: &Path, img: &Array3<f32>) -> Result<()> {
    to_rgb8(img)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Array3<f32>> {
    Ok(from_rgb8(&image::open(path)?.to_rgb8()))
}

pub fn save_mask(path: &Path, mask: &Array2<bool>) -> Result<()> {
    mask_to_luma8(mask).save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<Array2<bool>> {
    Ok(mask_from_luma8(&image::open(path)?.to_luma8()))
}

/// Maps `[0, 1]` to the model range `[-1, 1]`.
pub fn to_model_range(img: &Array3<f32>) -> Array3<f32> {
    img.mapv(|v| 2.0 * v - 1.0)
}

/// Maps model range back to `[0, 1]`, clipping.
pub fn from_model_range(img: &Array3<f32>) -> Array3<f32> {
    img.mapv(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantised_images_round_trip_exactly() {
        let img = quantize(&Array3::from_shape_fn((3, 5, 7), |(c, y, x)| {
            ((c * 31 + y * 7 + x * 3) % 17) as f32 / 16.0
        }));
        let back = from_rgb8(&to_rgb8(&img).unwrap());
        assert_eq!(back, img);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = quantize(&Array3::from_elem((3, 4, 4), 0.3));
        save_png(&p, &img).unwrap();
        assert_eq!(load_png(&p).unwrap(), img);
        let m = Array2::from_shape_fn((4, 4), |(y, x)| x > y);
        let mp = dir.path().join("m.png");
        save_mask(&mp, &m).unwrap();
        assert_eq!(load_mask(&mp).unwrap(), m);
    }

    #[test]
    fn range_maps_are_inverse_on_unit_interval() {
        let img = Array3::from_shape_fn((3, 2, 2), |(c, y, x)| (c + y + x) as f32 / 5.0);
        let back = from_model_range(&to_model_range(&img));
        for (a, b) in back.iter().zip(img.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
