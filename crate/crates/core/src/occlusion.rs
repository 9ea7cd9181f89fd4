//! Occlusion saliency: slide a blank box over every position and record how
//! much the AMD probability drops.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{GrayImage, RgbImage};
use crate::network::Network;
use crate::tensor::Tensor;

pub const DEFAULT_BOX: usize = 20;

/// Per-pixel probability drops over the input grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    /// Row-major; each pixel holds the largest drop among the boxes covering it.
    pub values: Vec<f32>,
    pub base_prob: f32,
    /// Drop for each box position, row-major over top-left corners.
    pub position_drops: Vec<f32>,
    pub box_size: usize,
}

impl Heatmap {
    pub fn positions(&self) -> usize {
        self.position_drops.len()
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn max_value(&self) -> f32 {
        self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// First pixel (row-major) holding the maximum value.
    pub fn argmax(&self) -> (usize, usize) {
        let max = self.max_value();
        let i = self.values.iter().position(|&v| v == max).expect("non-empty heatmap");
        (i % self.width, i / self.width)
    }

    /// Centre of the plateau of maximal pixels. A single best box produces
    /// a box-sized plateau, so this is the centre of that box.
    pub fn peak(&self) -> (usize, usize) {
        let max = self.max_value();
        let (mut sx, mut sy, mut n) = (0usize, 0usize, 0usize);
        for (i, _) in self.values.iter().enumerate().filter(|(_, &v)| v == max) {
            sx += i % self.width;
            sy += i / self.width;
            n += 1;
        }
        (sx / n, sy / n)
    }

    /// `u32 W, u32 H` then `W*H` little-endian `f32`.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.values.len());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

/// Decodes a `.heat` file into `(width, height, values)`.
pub fn decode_heat(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < 8 {
        return Err(Error::format("heat", "truncated header"));
    }
    let w = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let h = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() != w * h * 4 {
        return Err(Error::format("heat", format!("{w}x{h} needs {} bytes, got {}", w * h * 4, body.len())));
    }
    let values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((w, h, values))
}

/// Occludes every `box_size` square fully inside the image (stride 1) with
/// `fill` in all channels and records `base_prob - prob`.
pub fn occlusion_map(network: &Network, image: &Tensor, box_size: usize, fill: f32) -> Result<Heatmap> {
    let (channels, height, width) = image.chw()?;
    if box_size == 0 || box_size > width || box_size > height {
        return Err(Error::Config(format!("occlusion box {box_size} does not fit a {width}x{height} image")));
    }
    let base_prob = network.forward(image)?;
    let (px, py) = (width - box_size + 1, height - box_size + 1);
    let position_drops: Vec<f32> = (0..px * py)
        .into_par_iter()
        .map(|pos| {
            let (x0, y0) = (pos % px, pos / px);
            let mut occluded = image.clone();
            let data = occluded.data_mut();
            for c in 0..channels {
                for y in y0..y0 + box_size {
                    let row = (c * height + y) * width;
                    data[row + x0..row + x0 + box_size].fill(fill);
                }
            }
            network.forward(&occluded).map(|p| base_prob - p)
        })
        .collect::<Result<_>>()?;

    let mut values = vec![f32::NEG_INFINITY; width * height];
    for (pos, &drop) in position_drops.iter().enumerate() {
        let (x0, y0) = (pos % px, pos / px);
        for y in y0..y0 + box_size {
            for v in &mut values[y * width + x0..y * width + x0 + box_size] {
                *v = v.max(drop);
            }
        }
    }
    Ok(Heatmap { width, height, values, base_prob, position_drops, box_size })
}

/// Red overlay: drops are clamped to `[0, max_drop]`, normalized to an
/// opacity `a`, and blended as `(g(1-a) + 255a, g(1-a), g(1-a))`.
pub fn render_heatmap(heatmap: &Heatmap, base: &GrayImage) -> Result<RgbImage> {
    if (base.width(), base.height()) != (heatmap.width, heatmap.height) {
        return Err(Error::Shape(format!(
            "heatmap is {}x{} but base image is {}x{}",
            heatmap.width,
            heatmap.height,
            base.width(),
            base.height()
        )));
    }
    let max_drop = heatmap.values.iter().copied().fold(0.0f32, f32::max);
    if max_drop <= 0.0 {
        return Ok(RgbImage::from_gray(base));
    }
    let round = |v: f64| (v + 0.5).floor().clamp(0.0, 255.0) as u8;
    let pixels = base
        .pixels()
        .iter()
        .zip(&heatmap.values)
        .flat_map(|(&g, &d)| {
            let a = (d.clamp(0.0, max_drop) / max_drop) as f64;
            let keep = g as f64 * (1.0 - a);
            let gb = round(keep);
            [round(keep + 255.0 * a), gb, gb]
        })
        .collect();
    RgbImage::new(base.width(), base.height(), pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn heat(values: Vec<f32>, w: usize, h: usize) -> Heatmap {
        Heatmap { width: w, height: h, values, base_prob: 0.5, position_drops: vec![], box_size: 1 }
    }

    #[test]
    fn zero_heatmap_renders_gray() {
        let base = GrayImage::new(2, 1, vec![10, 200]).unwrap();
        let out = render_heatmap(&heat(vec![0.0, 0.0], 2, 1), &base).unwrap();
        assert_eq!(out, RgbImage::from_gray(&base));
        let neg = render_heatmap(&heat(vec![-0.3, -0.1], 2, 1), &base).unwrap();
        assert_eq!(neg, RgbImage::from_gray(&base));
    }

    #[test]
    fn normalization_levels() {
        let base = GrayImage::filled(3, 1, 0);
        let out = render_heatmap(&heat(vec![0.0, 0.2, 0.4], 3, 1), &base).unwrap();
        let reds: Vec<u8> = (0..3).map(|x| out.get(x, 0)[0]).collect();
        assert_eq!(reds, vec![0, 128, 255]);
    }

    #[test]
    fn single_max_is_reddest() {
        let base = GrayImage::new(3, 1, vec![90, 90, 90]).unwrap();
        let out = render_heatmap(&heat(vec![0.1, 0.5, 0.2], 3, 1), &base).unwrap();
        let redness = |x| {
            let [r, g, _] = out.get(x, 0);
            r as i32 - g as i32
        };
        assert!(redness(1) > redness(0) && redness(1) > redness(2));
    }

    #[test]
    fn heat_file_round_trip() {
        let h = heat(vec![0.5, -1.0, 2.0, 0.0, 1.0, 3.0], 3, 2);
        let bytes = h.encode();
        assert_eq!(&bytes[..8], &[3, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(decode_heat(&bytes).unwrap(), (3, 2, h.values.clone()));
        assert!(decode_heat(&bytes[..11]).is_err());
    }

    #[test]
    fn peak_is_plateau_centre() {
        let mut v = vec![0.0; 25];
        for y in 1..4 {
            for x in 2..5 {
                v[y * 5 + x] = 1.0;
            }
        }
        let h = heat(v, 5, 5);
        assert_eq!(h.argmax(), (2, 1));
        assert_eq!(h.peak(), (3, 2));
    }
}
