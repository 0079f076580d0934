//! Activation-guided image operations: HAM normalization, crop masks and
//! boxes, crop-and-resize, and patch dropping.

use std::fmt;
use std::str::FromStr;

use crate::data::PixelBox;
use crate::error::{Error, Result};
use crate::tensor::{Tensor, EPSILON_DIV};

/// How a class map is chosen from the per-head HAMs during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadChoice {
    /// One head drawn uniformly at random per class and sample.
    Random,
    /// Mean over heads, as at inference.
    Average,
}

impl fmt::Display for HeadChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadChoice::Random => "random",
            HeadChoice::Average => "average",
        })
    }
}

impl FromStr for HeadChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(HeadChoice::Random),
            "average" => Ok(HeadChoice::Average),
            other => Err(Error::Config(format!("unknown head choice {other:?} (random|average)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PeekabooConfig {
    pub theta_c: f64,
    pub theta_d: f64,
    /// Side of the resized crop; 0 means the model's input size.
    pub crop_size: usize,
    pub crop: bool,
    pub drop: bool,
    pub distill: bool,
    pub head_choice: HeadChoice,
}

impl Default for PeekabooConfig {
    fn default() -> Self {
        PeekabooConfig {
            theta_c: 0.5,
            theta_d: 0.3,
            crop_size: 0,
            crop: true,
            drop: true,
            distill: true,
            head_choice: HeadChoice::Random,
        }
    }
}

impl PeekabooConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("peekaboo.theta_c", self.theta_c), ("peekaboo.theta_d", self.theta_d)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Rescales a map to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_ham(map: &Tensor) -> Tensor {
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < EPSILON_DIV {
        return map.map(|_| 0.0);
    }
    map.map(|v| (v - lo) / (hi - lo))
}

/// Mean of the `[h, w]` maps.
pub fn average_maps(maps: &[Tensor]) -> Tensor {
    let mut acc = maps[0].clone();
    for m in &maps[1..] {
        for (a, b) in acc.data_mut().iter_mut().zip(m.data()) {
            *a += b;
        }
    }
    let n = maps.len() as f64;
    acc.map(|v| v / n)
}

fn argmax(data: &[f64]) -> usize {
    data.iter()
        .enumerate()
        .fold(0, |best, (k, &v)| if v > data[best] { k } else { best })
}

/// Binary mask `A* >= theta` and the smallest box covering it. An empty mask
/// falls back to the single argmax cell.
pub fn crop_mask_and_bbox(a_star: &Tensor, theta_c: f64) -> (Tensor, PixelBox) {
    let w = a_star.shape()[1];
    let mask = a_star.map(|v| if v >= theta_c { 1.0 } else { 0.0 });
    let on: Vec<usize> = (0..mask.numel()).filter(|&k| mask.data()[k] == 1.0).collect();
    let cells = if on.is_empty() { vec![argmax(a_star.data())] } else { on };
    let r0 = cells.iter().map(|k| k / w).min().unwrap();
    let r1 = cells.iter().map(|k| k / w).max().unwrap();
    let c0 = cells.iter().map(|k| k % w).min().unwrap();
    let c1 = cells.iter().map(|k| k % w).max().unwrap();
    (mask, PixelBox::new(r0, c0, r1, c1))
}

/// Image-space box covered by the grid cells of `cells`, clipped to the image.
pub fn cells_to_pixels(cells: PixelBox, stride: usize, height: usize, width: usize) -> PixelBox {
    let r0 = (cells.r0 * stride).min(height - 1);
    let c0 = (cells.c0 * stride).min(width - 1);
    PixelBox::new(
        r0,
        c0,
        ((cells.r1 + 1) * stride - 1).clamp(r0, height - 1),
        ((cells.c1 + 1) * stride - 1).clamp(c0, width - 1),
    )
}

/// Bilinear resize (half-pixel centres) of the `region` of one `[h, w]`
/// plane to `out_h x out_w`, sampling only inside the region.
pub fn resize_region(plane: &[f64], width: usize, region: PixelBox, out_h: usize, out_w: usize) -> Vec<f64> {
    let axis = |lo: usize, len: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = len as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let a = src.floor() as usize;
                let b = (a + 1).min(len - 1);
                (lo + a, lo + b, src - a as f64)
            })
            .collect()
    };
    let rows = axis(region.r0, region.height(), out_h);
    let cols = axis(region.c0, region.width(), out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(r_a, r_b, fr) in &rows {
        for &(c_a, c_b, fc) in &cols {
            let top = plane[r_a * width + c_a] * (1.0 - fc) + plane[r_a * width + c_b] * fc;
            let bottom = plane[r_b * width + c_a] * (1.0 - fc) + plane[r_b * width + c_b] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}

/// Crops the image under the grid box `cells` and resizes it to
/// `out_h x out_w`. Returns the patch and its pixel box.
pub fn crop_and_upsample(image: &Tensor, cells: PixelBox, stride: usize, out_h: usize, out_w: usize) -> (Tensor, PixelBox) {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let region = cells_to_pixels(cells, stride, h, w);
    let mut data = Vec::with_capacity(c * out_h * out_w);
    for plane in image.data().chunks(h * w) {
        data.extend(resize_region(plane, w, region, out_h, out_w));
    }
    (Tensor::from_parts(vec![c, out_h, out_w], data), region)
}

/// Zeroes every pixel whose grid cell has `A* >= theta_d`.
pub fn drop_patch(image: &Tensor, a_star: &Tensor, theta_d: f64) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (gh, gw) = (a_star.shape()[0], a_star.shape()[1]);
    let keep: Vec<bool> = (0..h * w)
        .map(|p| {
            let (y, x) = (p / w, p % w);
            a_star.data()[(y * gh / h) * gw + x * gw / w] < theta_d
        })
        .collect();
    let mut out = image.clone();
    for plane in out.data_mut().chunks_mut(h * w) {
        for (v, &k) in plane.iter_mut().zip(&keep) {
            if !k {
                *v = 0.0;
            }
        }
    }
    out
}
