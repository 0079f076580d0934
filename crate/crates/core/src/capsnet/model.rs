use std::sync::Arc;

use super::{compute_votes, route, split_heads, Backbone, HeadPose, ModelConfig, RoutingResult, TransformBank};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Init, Tape, Tensor, Var};

/// Model parameters plus the configuration that shapes them.
///
/// Parameters are `Arc`-shared with every tape they are bound to, so all
/// forward passes of a training step read the same storage.
#[derive(Clone, Debug)]
pub struct CapsNet {
    config: ModelConfig,
    backbone: Backbone,
    names: Vec<String>,
    params: Vec<Arc<Tensor>>,
}

/// Parameters of a [`CapsNet`] recorded as leaves on one tape.
pub struct BoundModel<'t> {
    pub tape: &'t Tape,
    pub params: Vec<Var<'t>>,
}

pub struct ForwardPass<'t> {
    pub features: Var<'t>,
    pub heads: Vec<HeadPose<'t>>,
    pub routing: RoutingResult<'t>,
}

impl CapsNet {
    /// `(name, shape)` of every parameter for `config`, in storage order:
    /// backbone kernels and biases, then one transform per (head, class).
    pub fn param_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let mut layout = Backbone::from_config(config).param_shapes();
        for i in 0..config.num_heads {
            for j in 0..config.num_classes {
                layout.push((format!("transform.{i}.{j}"), vec![config.pose_dim, config.class_dim]));
            }
        }
        layout
    }

    /// Fresh parameters: He-normal kernels, zero biases, and transforms with
    /// standard deviation `1 / sqrt(pose_dim)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::from_config(&config);
        let fan_in = backbone.fan_in();
        let layout = Self::param_layout(&config);
        let mut params = Vec::with_capacity(layout.len());
        for (k, (name, shape)) in layout.iter().enumerate() {
            let seed = rng::derive_seed(seed, &[rng::tag::INIT, k as u64]);
            let init = if name.ends_with(".bias") {
                Init::Constant(0.0)
            } else if name.starts_with("backbone.") {
                let layer = k / 2;
                let gain = if layer + 1 == fan_in.len() { 1.0 } else { 2.0 };
                Init::Gaussian {
                    mean: 0.0,
                    std: (gain / fan_in[layer] as f64).sqrt(),
                    seed,
                }
            } else {
                Init::Gaussian {
                    mean: 0.0,
                    std: 1.0 / (config.pose_dim as f64).sqrt(),
                    seed,
                }
            };
            params.push(Arc::new(Tensor::create(shape, init)?));
        }
        Ok(CapsNet {
            backbone,
            names: layout.into_iter().map(|(n, _)| n).collect(),
            params,
            config,
        })
    }

    /// Rebuilds a model from stored tensors, checking names and shapes
    /// against `config`.
    pub fn from_params(config: ModelConfig, stored: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let layout = Self::param_layout(&config);
        if layout.len() != stored.len() {
            return Err(Error::Checkpoint(format!(
                "config expects {} parameter tensors, found {}",
                layout.len(),
                stored.len()
            )));
        }
        for ((name, shape), (got_name, t)) in layout.iter().zip(&stored) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {got_name} {:?} does not match config ({name} {shape:?})",
                    t.shape()
                )));
            }
        }
        Ok(CapsNet {
            backbone: Backbone::from_config(&config),
            names: layout.into_iter().map(|(n, _)| n).collect(),
            params: stored.into_iter().map(|(_, t)| Arc::new(t)).collect(),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Arc<Tensor>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Arc<Tensor>] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Parameters of the transform bank alone.
    pub fn routing_parameter_count(&self) -> usize {
        self.params[self.backbone.num_params()..].iter().map(|p| p.numel()).sum()
    }

    /// Records every parameter as a tracked leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        BoundModel {
            tape,
            params: self.params.iter().map(|p| tape.param(p)).collect(),
        }
    }

    /// Records every parameter as a constant, for inference.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        BoundModel {
            tape,
            params: self.params.iter().map(|p| tape.frozen(p)).collect(),
        }
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let c = &self.config;
        let want = [c.in_channels, c.image_size, c.image_size];
        if image.shape() != want {
            return Err(Error::mismatch("model_input", image.shape(), &want));
        }
        Ok(())
    }

    /// `[c, h, w]` image to `[num_heads * pose_dim, grid, grid]` feature maps.
    pub fn backbone_forward<'t>(&self, bound: &BoundModel<'t>, image: &Tensor) -> Result<Var<'t>> {
        self.check_image(image)?;
        let x = bound.tape.constant(image.clone());
        self.backbone.forward(&bound.params[..self.backbone.num_params()], x)
    }

    pub fn transform_bank<'t>(&self, bound: &BoundModel<'t>) -> TransformBank<'t> {
        TransformBank {
            num_heads: self.config.num_heads,
            num_classes: self.config.num_classes,
            matrices: bound.params[self.backbone.num_params()..].to_vec(),
        }
    }

    pub fn forward<'t>(&self, bound: &BoundModel<'t>, image: &Tensor) -> Result<ForwardPass<'t>> {
        let c = &self.config;
        let features = self.backbone_forward(bound, image)?;
        let heads = split_heads(features, c.num_heads, c.pose_dim)?;
        let bank = self.transform_bank(bound);
        let votes = heads
            .iter()
            .map(|h| compute_votes(h, &bank, c.coord_add))
            .collect::<Result<Vec<_>>>()?;
        let routing = route(&votes, c.n_iter, c.routing)?;
        Ok(ForwardPass {
            features,
            heads,
            routing,
        })
    }
}
