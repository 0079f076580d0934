//! Capsule-head network: convolutional backbone, capsule heads, shared
//! per-(head, class) transforms, routing and head activation maps.

mod backbone;
mod heads;
mod model;
mod routing;

pub use backbone::Backbone;
pub use heads::{compute_votes, coordinate_lattice, split_heads, squash, HeadPose, TransformBank, VoteTensor};
pub use model::{BoundModel, CapsNet, ForwardPass};
pub use routing::{compute_ham, dynamic_route_baseline, idr_route, route, RoutingResult};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::conv2d_output_extent;

/// Which side of the child/parent relation competes for routing weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoutingMode {
    /// Positions within a head compete for each parent (softmax over space).
    Idr,
    /// Parents compete for each child position (softmax over classes).
    Baseline,
}

impl fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoutingMode::Idr => "idr",
            RoutingMode::Baseline => "baseline",
        })
    }
}

impl FromStr for RoutingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "idr" => Ok(RoutingMode::Idr),
            "baseline" => Ok(RoutingMode::Baseline),
            other => Err(Error::Config(format!("unknown routing mode {other:?} (idr|baseline)"))),
        }
    }
}

/// One backbone conv/relu block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlock {
    pub channels: usize,
    /// 1 or 2.
    pub stride: usize,
}

impl ConvBlock {
    pub const fn new(channels: usize, stride: usize) -> Self {
        ConvBlock { channels, stride }
    }

    /// `(kernel, padding)`: 4x4 pad 1 halves the grid with cell centres kept
    /// on pixel-block centres; 3x3 pad 1 keeps the grid.
    pub fn geometry(&self) -> (usize, usize) {
        if self.stride == 2 {
            (4, 1)
        } else {
            (3, 1)
        }
    }
}

impl fmt::Display for ConvBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.channels, self.stride)
    }
}

impl FromStr for ConvBlock {
    type Err = Error;

    /// `channels/stride`, e.g. `64/2`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("backbone block {s:?} must look like channels/stride"));
        let (c, st) = s.split_once('/').ok_or_else(bad)?;
        let block = ConvBlock::new(c.trim().parse().map_err(|_| bad())?, st.trim().parse().map_err(|_| bad())?);
        if block.channels == 0 || !(1..=2).contains(&block.stride) {
            return Err(Error::Config(format!("backbone block {s:?} needs channels >= 1 and stride 1 or 2")));
        }
        Ok(block)
    }
}

/// Decision threshold on class capsule length.
pub const SCORE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    pub in_channels: usize,
    /// Conv/relu blocks. A final 1x1 conv lifts the last width to
    /// `num_heads * pose_dim` feature maps.
    pub backbone: Vec<ConvBlock>,
    pub num_heads: usize,
    pub pose_dim: usize,
    pub class_dim: usize,
    pub num_classes: usize,
    pub n_iter: usize,
    pub coord_add: bool,
    pub routing: RoutingMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            in_channels: 3,
            backbone: vec![ConvBlock::new(32, 2), ConvBlock::new(64, 2), ConvBlock::new(64, 1)],
            num_heads: 4,
            pose_dim: 64,
            class_dim: 16,
            num_classes: 3,
            n_iter: 3,
            coord_add: true,
            routing: RoutingMode::Idr,
        }
    }
}

impl ModelConfig {
    pub fn feature_channels(&self) -> usize {
        self.num_heads * self.pose_dim
    }

    /// Side of the capsule grid.
    pub fn grid(&self) -> usize {
        self.backbone.iter().fold(self.image_size, |s, b| {
            let (k, p) = b.geometry();
            conv2d_output_extent(s, k, b.stride, p).unwrap_or(0)
        })
    }

    /// Pixels per grid cell along each axis.
    pub fn stride(&self) -> usize {
        self.backbone.iter().map(|b| b.stride).product()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.in_channels == 0 {
            return fail("model.image_size and in_channels must be positive".into());
        }
        if self.num_heads == 0 || self.pose_dim == 0 || self.class_dim == 0 || self.num_classes == 0 {
            return fail("model.heads, pose_dim, class_dim and num_classes must be positive".into());
        }
        if self.backbone.iter().any(|b| b.channels == 0 || !(1..=2).contains(&b.stride)) {
            return fail("model.backbone blocks need positive widths and stride 1 or 2".into());
        }
        if self.n_iter == 0 {
            return fail("model.n_iter must be at least 1".into());
        }
        if self.coord_add && self.class_dim < 2 {
            return fail("coordinate addition needs model.class_dim >= 2".into());
        }
        if self.grid() == 0 || self.grid() * self.stride() != self.image_size {
            return fail(format!(
                "model.image_size {} is not divisible by the backbone stride {}",
                self.image_size,
                self.stride()
            ));
        }
        Ok(())
    }
}
