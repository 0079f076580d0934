use serde::Serialize;

use crate::data::PixelBox;
use crate::tensor::Tensor;
use crate::training::{cells_to_pixels, normalize_ham};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Level {
    /// From the whole-image pass.
    Coarse = 1,
    /// From the pass on the class crop.
    Fine = 2,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub bbox: PixelBox,
    pub score: f64,
    pub level: Level,
}

/// 4-connected components of the set cells of an `[h, w]` mask, each as the
/// list of its flat indices.
pub fn connected_components(mask: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut label = vec![usize::MAX; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if !mask[start] || label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut comp = Vec::new();
        let mut stack = vec![start];
        label[start] = id;
        while let Some(k) = stack.pop() {
            comp.push(k);
            let (r, c) = (k / w, k % w);
            let mut visit = |n: usize| {
                if mask[n] && label[n] == usize::MAX {
                    label[n] = id;
                    stack.push(n);
                }
            };
            if r > 0 {
                visit(k - w);
            }
            if r + 1 < h {
                visit(k + w);
            }
            if c > 0 {
                visit(k - 1);
            }
            if c + 1 < w {
                visit(k + 1);
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

fn cell_box(cells: &[usize], w: usize) -> PixelBox {
    PixelBox::new(
        cells.iter().map(|k| k / w).min().unwrap(),
        cells.iter().map(|k| k % w).min().unwrap(),
        cells.iter().map(|k| k / w).max().unwrap(),
        cells.iter().map(|k| k % w).max().unwrap(),
    )
}

/// One detection per 4-connected component of the normalized map at or above
/// `theta_c`, in pixels of a `height x width` image covered by the grid at
/// `stride`. With no cell above threshold and a positive score, the argmax
/// cell is reported alone.
#[allow(clippy::too_many_arguments)]
pub fn extract_detections(
    map: &Tensor,
    class: usize,
    score: f64,
    theta_c: f64,
    stride: usize,
    height: usize,
    width: usize,
    level: Level,
) -> Vec<Detection> {
    let (gh, gw) = (map.shape()[0], map.shape()[1]);
    let a_star = normalize_ham(map);
    let mask: Vec<bool> = a_star.data().iter().map(|&v| v >= theta_c).collect();
    let mut comps = connected_components(&mask, gh, gw);
    if comps.is_empty() {
        if score <= 0.0 {
            return Vec::new();
        }
        let d = map.data();
        let best = (0..d.len()).fold(0, |b, k| if d[k] > d[b] { k } else { b });
        comps.push(vec![best]);
    }
    comps
        .iter()
        .map(|c| Detection {
            class,
            bbox: cells_to_pixels(cell_box(c, gw), stride, height, width),
            score,
            level,
        })
        .collect()
}

/// Maps a box in a `side x side` resized patch back to the image region the
/// patch was cut from.
pub fn map_from_patch(b: PixelBox, region: PixelBox, side: usize) -> PixelBox {
    let axis = |lo: usize, hi: usize, origin: usize, extent: usize| {
        let start = origin + lo * extent / side;
        let end = origin + ((hi + 1) * extent).div_ceil(side) - 1;
        (start, end.max(start))
    };
    let (r0, r1) = axis(b.r0, b.r1, region.r0, region.height());
    let (c0, c1) = axis(b.c0, b.c1, region.c0, region.width());
    PixelBox::new(r0, c0, r1.min(region.r1), c1.min(region.c1))
}
