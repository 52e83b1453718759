//! Token-grid maps rendered as grayscale images, and their overlap with
//! foreground masks.

use std::path::Path;

use crate::data::encode_pnm;
use crate::error::{Error, Result};

/// A map rendered to 8-bit pixels with the constants used to normalise it.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedMap {
    pub size: usize,
    pub pixels: Vec<u8>,
    pub min: f64,
    pub max: f64,
}

impl RenderedMap {
    pub fn pgm(&self) -> Result<Vec<u8>> {
        encode_pnm(self.size, self.size, &self.pixels, false)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.pgm()?).map_err(|e| Error::io(path, e))
    }
}

/// Nearest-neighbour upsample of a `side x side` token map to `image_size`
/// pixels, min-max normalised to 0..=255. A constant map renders as mid-gray.
pub fn render_map(values: &[f64], side: usize, image_size: usize) -> Result<RenderedMap> {
    if side == 0 || values.len() != side * side || !image_size.is_multiple_of(side) {
        return Err(Error::Config(format!(
            "{} values do not form a {side}x{side} grid that tiles {image_size} pixels",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("map has non-finite values".into()));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = image_size / side;
    let level = |v: f64| -> u8 {
        if max > min {
            ((v - min) / (max - min) * 255.0).round() as u8
        } else {
            128
        }
    };
    let pixels = (0..image_size * image_size)
        .map(|i| level(values[(i / image_size / scale) * side + (i % image_size) / scale]))
        .collect();
    Ok(RenderedMap {
        size: image_size,
        pixels,
        min,
        max,
    })
}

/// IoU between the pixels of the top quarter of tokens (by value, ties to the
/// lower index) and a foreground mask of `image_size^2` pixels.
pub fn top_quartile_iou(values: &[f64], side: usize, foreground: &[bool], image_size: usize) -> Result<f64> {
    if values.len() != side * side || foreground.len() != image_size * image_size || !image_size.is_multiple_of(side) {
        return Err(Error::Config("map, grid and mask sizes disagree".into()));
    }
    let n = values.len();
    let k = ((n as f64 * 0.25).round() as usize).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut top = vec![false; n];
    order[..k].iter().for_each(|&i| top[i] = true);
    let scale = image_size / side;
    let (mut inter, mut union) = (0usize, 0usize);
    for (i, &fg) in foreground.iter().enumerate() {
        let t = top[(i / image_size / scale) * side + (i % image_size) / scale];
        inter += (t && fg) as usize;
        union += (t || fg) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_map_is_mid_gray() {
        let m = render_map(&[0.25; 16], 4, 32).unwrap();
        assert_eq!(m.pixels.len(), 32 * 32);
        assert!(m.pixels.iter().all(|&p| p == 128));
        let pgm = m.pgm().unwrap();
        let img = image::load_from_memory(&pgm).unwrap();
        assert_eq!((img.width(), img.height()), (32, 32));
    }

    #[test]
    fn extremes_map_to_black_and_white() {
        let m = render_map(&[0.0, 1.0, 0.5, 0.5], 2, 4).unwrap();
        assert_eq!(&m.pixels[..4], &[0, 0, 255, 255]);
        assert_eq!((m.min, m.max), (0.0, 1.0));
    }

    #[test]
    fn iou_of_exact_match_is_one() {
        let mut v = vec![0.0; 16];
        for i in [0, 1, 4, 5] {
            v[i] = 1.0;
        }
        let fg: Vec<bool> = (0..64).map(|i| (i / 8) < 4 && (i % 8) < 4).collect();
        assert_eq!(top_quartile_iou(&v, 4, &fg, 8).unwrap(), 1.0);
    }
}
