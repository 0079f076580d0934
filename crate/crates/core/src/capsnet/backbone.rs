use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvLayer {
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    relu: bool,
}

/// Conv/relu blocks followed by a 1x1 conv that emits the capsule feature
/// maps. Every block keeps each output cell centred on the pixel block it
/// covers, so grid cell `r` maps to pixels `[r * stride, (r + 1) * stride)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Backbone {
    layers: Vec<ConvLayer>,
}

impl Backbone {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        let mut layers = Vec::with_capacity(cfg.backbone.len() + 1);
        let mut c_in = cfg.in_channels;
        for block in &cfg.backbone {
            let (kernel, padding) = block.geometry();
            layers.push(ConvLayer {
                c_in,
                c_out: block.channels,
                kernel,
                stride: block.stride,
                padding,
                relu: true,
            });
            c_in = block.channels;
        }
        layers.push(ConvLayer {
            c_in,
            c_out: cfg.feature_channels(),
            kernel: 1,
            stride: 1,
            padding: 0,
            relu: false,
        });
        Backbone { layers }
    }

    /// `(name, shape)` of each kernel and bias, in forward order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(k, l)| {
                [
                    (format!("backbone.{k}.kernel"), vec![l.c_out, l.c_in, l.kernel, l.kernel]),
                    (format!("backbone.{k}.bias"), vec![l.c_out]),
                ]
            })
            .collect()
    }

    /// Fan-in of each kernel, used for He initialization.
    pub fn fan_in(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.c_in * l.kernel * l.kernel).collect()
    }

    pub fn num_params(&self) -> usize {
        2 * self.layers.len()
    }

    /// Runs `[c, h, w] -> [num_heads * pose_dim, h_f, w_f]`.
    pub fn forward<'t>(&self, params: &[Var<'t>], image: Var<'t>) -> Result<Var<'t>> {
        if params.len() != self.num_params() {
            return Err(Error::Contract(format!(
                "backbone expects {} parameter tensors, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let mut x = image;
        for (l, p) in self.layers.iter().zip(params.chunks(2)) {
            x = x.conv2d(p[0], Some(p[1]), l.stride, l.padding)?;
            if l.relu {
                x = x.relu()?;
            }
        }
        Ok(x)
    }
}
