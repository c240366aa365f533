//! PNG/PPM image files ⇄ `[H,W,3]` tensors in `[0,1]`, plus grayscale
//! label maps for segmentation.

use std::path::{Path, PathBuf};

use crate::numerics::tensor::Tensor;
use crate::{Error, Result, Scalar};

pub fn load_image<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let img = image::open(path).map_err(|e| Error::Image(e.to_string()))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| S::from_f64(v as f64 / 255.0))
        .collect();
    Ok(Tensor::new(vec![h, w, 3], data))
}

pub fn save_image<S: Scalar>(tensor: &Tensor<S>, path: &Path) -> Result<()> {
    assert_eq!(tensor.rank(), 3);
    assert_eq!(tensor.dim(2), 3);
    let (h, w) = (tensor.dim(0), tensor.dim(1));
    let raw: Vec<u8> = tensor
        .data()
        .iter()
        .map(|&v| (Scalar::to_f64(v).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("raw length matches");
    img.save(path).map_err(|e| Error::Image(e.to_string()))
}

/// Grayscale label map: pixel value = class index, 255 = ignore.
pub fn load_label_map(path: &Path) -> Result<(Vec<u32>, usize, usize)> {
    let img = image::open(path).map_err(|e| Error::Image(e.to_string()))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.into_raw().into_iter().map(u32::from).collect(), h, w))
}

pub fn save_label_map(labels: &[u32], h: usize, w: usize, path: &Path) -> Result<()> {
    assert_eq!(labels.len(), h * w);
    let raw: Vec<u8> = labels.iter().map(|&l| l.min(255) as u8).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, raw).expect("raw length matches");
    img.save(path).map_err(|e| Error::Image(e.to_string()))
}

/// All PNG/PPM files directly inside `dir`, sorted by name for
/// deterministic iteration order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "ppm" | "pnm")
            )
        })
        .collect();
    paths.sort();
    Ok(paths)
}
