use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::fmt;
use std::str::FromStr;

use super::{GtBox, PixelBox, Sample};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    /// Filled disc.
    Disc,
    /// Hollow square frame.
    Square,
    /// Filled upright triangle.
    Triangle,
    /// Plus sign.
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Disc, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Cross];
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeKind::Disc => "disc",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        })
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape class {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub num_samples: usize,
    pub height: usize,
    pub width: usize,
    pub classes: Vec<ShapeKind>,
    /// Inclusive range of objects per image.
    pub objects: (usize, usize),
    /// Inclusive range of object side lengths in pixels.
    pub size: (usize, usize),
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_samples: 1000,
            height: 64,
            width: 64,
            classes: vec![ShapeKind::Disc, ShapeKind::Square, ShapeKind::Triangle],
            objects: (1, 3),
            size: (12, 24),
            noise: 0.05,
            seed: 1,
        }
    }
}

impl DatasetSpec {
    fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.classes.is_empty() {
            return err("dataset needs at least one shape class".into());
        }
        if self.objects.0 == 0 || self.objects.0 > self.objects.1 {
            return err(format!("bad objects-per-image range {:?}", self.objects));
        }
        if self.size.0 < 4 || self.size.0 > self.size.1 {
            return err(format!("bad object size range {:?}", self.size));
        }
        if self.size.1 > self.height.min(self.width) {
            return err(format!(
                "object size {} does not fit a {}x{} image",
                self.size.1, self.height, self.width
            ));
        }
        if !(self.noise >= 0.0) {
            return err(format!("noise must be non-negative, got {}", self.noise));
        }
        Ok(())
    }
}

/// Foreground pixels of a shape drawn in the `size x size` square whose
/// top-left corner is `(top, left)`.
pub fn rasterize(kind: ShapeKind, top: usize, left: usize, size: usize) -> Vec<(usize, usize)> {
    let s = size as f64;
    let mid = (s - 1.0) / 2.0;
    let mut out = Vec::new();
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64, x as f64);
            let on = match kind {
                ShapeKind::Disc => (fy - mid).powi(2) + (fx - mid).powi(2) <= (s / 2.0).powi(2),
                ShapeKind::Square => {
                    let t = (size / 6).max(2);
                    y < t || x < t || y + t >= size || x + t >= size
                }
                ShapeKind::Triangle => {
                    let half = (fy + 1.0) / s * (s / 2.0);
                    (fx - mid).abs() <= half
                }
                ShapeKind::Cross => {
                    let half = ((size / 4).max(2) as f64) / 2.0;
                    (fy - mid).abs() <= half || (fx - mid).abs() <= half
                }
            };
            if on {
                out.push((top + y, left + x));
            }
        }
    }
    out
}

fn tight_box(pixels: &[(usize, usize)]) -> PixelBox {
    let r0 = pixels.iter().map(|p| p.0).min().unwrap();
    let r1 = pixels.iter().map(|p| p.0).max().unwrap();
    let c0 = pixels.iter().map(|p| p.1).min().unwrap();
    let c1 = pixels.iter().map(|p| p.1).max().unwrap();
    PixelBox::new(r0, c0, r1, c1)
}

fn overlaps(a: &PixelBox, b: &PixelBox, margin: usize) -> bool {
    a.r0 <= b.r1 + margin && b.r0 <= a.r1 + margin && a.c0 <= b.c1 + margin && b.c0 <= a.c1 + margin
}

/// Quantizes to the 8-bit grid used on disk so in-memory and reloaded
/// datasets agree exactly.
fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn generate_one(spec: &DatasetSpec, index: usize) -> Sample {
    let (h, w) = (spec.height, spec.width);
    let mut r = rng::stream(spec.seed, &[rng::tag::DATA, index as u64]);
    let count = r.gen_range(spec.objects.0..=spec.objects.1);
    let mut canvas = vec![0.0; h * w];
    let mut labels = vec![0u8; spec.classes.len()];
    let mut boxes: Vec<GtBox> = Vec::new();
    let mut placed: Vec<PixelBox> = Vec::new();
    for _ in 0..count {
        let class = r.gen_range(0..spec.classes.len());
        let size = r.gen_range(spec.size.0..=spec.size.1);
        // rejection-sample a free spot; crowded images simply get fewer objects
        for _ in 0..50 {
            let top = r.gen_range(0..=h - size);
            let left = r.gen_range(0..=w - size);
            let frame = PixelBox::new(top, left, top + size - 1, left + size - 1);
            if placed.iter().any(|p| overlaps(p, &frame, 2)) {
                continue;
            }
            let pixels = rasterize(spec.classes[class], top, left, size);
            for &(y, x) in &pixels {
                canvas[y * w + x] = 1.0;
            }
            placed.push(frame);
            labels[class] = 1;
            boxes.push(GtBox {
                class,
                bbox: tight_box(&pixels),
            });
            break;
        }
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("validated noise");
        for v in canvas.iter_mut() {
            *v += normal.sample(&mut r);
        }
    }
    let plane: Vec<f64> = canvas.into_iter().map(quantize).collect();
    let data = [plane.as_slice(), plane.as_slice(), plane.as_slice()].concat();
    Sample {
        id: format!("{index:06}"),
        image: Tensor::from_parts(vec![3, h, w], data),
        labels,
        boxes,
    }
}

/// Draws `spec.num_samples` images. A pure function of `spec`.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    Ok((0..spec.num_samples).map(|i| generate_one(spec, i)).collect())
}
