use rand::Rng;

use super::{
    average_maps, Checkpoint, crop_and_upsample, crop_mask_and_bbox, drop_patch, har_loss, margin_terms, normalize_ham,
    semantic_features, HeadChoice, LossBreakdown, MarginParams, PeekabooConfig, TemplateBank,
};
use crate::capsnet::{BoundModel, CapsNet, ModelConfig, RoutingResult};
use crate::data::{PixelBox, Sample};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{AdamState, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub margin: MarginParams,
    pub har_weight: f64,
    /// Template moving-average step.
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: MarginParams::default(),
            har_weight: 1.0,
            gamma: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            // 1e-4 suits a pretrained backbone; from scratch it stays near
            // chance within a desk-scale budget
            learning_rate: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 10,
            batch_size: 8,
        }
    }
}

/// Loss of one forward pass plus what the step needs from it.
struct PassOutput<'t> {
    loss: Var<'t>,
    margin: f64,
    har: f64,
    per_class: Vec<f64>,
    routing: RoutingResult<'t>,
}

fn run_pass<'t>(
    model: &CapsNet,
    bound: &BoundModel<'t>,
    image: &Tensor,
    labels: &[u8],
    templates: &TemplateBank,
    loss: &LossConfig,
) -> Result<PassOutput<'t>> {
    let routing = model.forward(bound, image)?.routing;
    let terms = margin_terms(routing.scores, labels, &loss.margin)?;
    let margin = terms.sum_all()?;
    let mut total = margin;
    let mut har = 0.0;
    if loss.har_weight != 0.0 {
        let features = routing
            .weighted_votes
            .iter()
            .map(|row| row.iter().map(|&a| semantic_features(a)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let h = har_loss(&features, templates)?.mul_scalar(loss.har_weight)?;
        har = h.item();
        total = total.add(h)?;
    }
    Ok(PassOutput {
        loss: total,
        margin: margin.item(),
        har,
        per_class: terms.value().data().to_vec(),
        routing,
    })
}

/// Flattened `[I, J, d]` semantic features of a routing result.
fn feature_values(routing: &RoutingResult<'_>) -> Vec<f64> {
    let mut out = Vec::new();
    for row in &routing.weighted_votes {
        for a in row {
            let v = a.value();
            let (n, d) = (v.shape()[0], v.shape()[1]);
            let mut f = vec![0.0; d];
            for cap in v.data().chunks(d) {
                f.iter_mut().zip(cap).for_each(|(s, x)| *s += x);
            }
            out.extend(f.into_iter().map(|s| s / n as f64));
        }
    }
    out
}

/// Normalized class map used to steer crops and drops.
fn steering_map(routing: &RoutingResult<'_>, class: usize, choice: HeadChoice, head: usize) -> Tensor {
    match choice {
        HeadChoice::Random => normalize_ham(&RoutingResult::map_of(&routing.hams, head, class)),
        HeadChoice::Average => normalize_ham(&class_map(&routing.hams, class)),
    }
}

/// Head-averaged `[h, w]` HAM of `class`.
pub fn class_map(hams: &Tensor, class: usize) -> Tensor {
    let maps: Vec<Tensor> = (0..hams.shape()[0]).map(|i| RoutingResult::map_of(hams, i, class)).collect();
    average_maps(&maps)
}

/// Model, template bank and optimizer, advanced one batch at a time.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: CapsNet,
    pub templates: TemplateBank,
    pub optimizer: AdamState,
    pub loss: LossConfig,
    pub peekaboo: PeekabooConfig,
    pub seed: u64,
    pub epoch: u64,
    pub step: u64,
}

impl Trainer {
    pub fn new(model: ModelConfig, loss: LossConfig, peekaboo: PeekabooConfig, optim: &OptimConfig, seed: u64) -> Result<Self> {
        peekaboo.validate()?;
        let model = CapsNet::new(model, seed)?;
        let cfg = model.config();
        let templates = TemplateBank::new(cfg.num_heads, cfg.num_classes, cfg.class_dim, loss.gamma);
        let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
        let optimizer = AdamState::new(&shapes, optim.learning_rate, optim.beta1, optim.beta2, optim.epsilon);
        Ok(Trainer {
            model,
            templates,
            optimizer,
            loss,
            peekaboo,
            seed,
            epoch: 0,
            step: 0,
        })
    }

    /// Restores a trainer, checking every stored tensor against `model`.
    pub fn from_checkpoint(ckpt: Checkpoint, model: ModelConfig, loss: LossConfig, peekaboo: PeekabooConfig) -> Result<Self> {
        peekaboo.validate()?;
        let model = CapsNet::from_params(model, ckpt.params)?;
        let cfg = model.config();
        let tb = &ckpt.templates;
        if (tb.num_heads(), tb.num_classes(), tb.dim()) != (cfg.num_heads, cfg.num_classes, cfg.class_dim) {
            return Err(Error::Checkpoint("template bank does not match the model config".into()));
        }
        let (first, second) = ckpt.optimizer.moments();
        let fits = |m: &[Tensor]| m.len() == model.params().len() && m.iter().zip(model.params()).all(|(a, p)| a.shape() == p.shape());
        if !fits(first) || !fits(second) {
            return Err(Error::Checkpoint("optimizer moments do not match the parameters".into()));
        }
        Ok(Trainer {
            model,
            templates: ckpt.templates,
            optimizer: ckpt.optimizer,
            loss,
            peekaboo,
            seed: ckpt.seed,
            epoch: ckpt.epoch,
            step: ckpt.step,
        })
    }

    fn crop_size(&self) -> usize {
        match self.peekaboo.crop_size {
            0 => self.model.config().image_size,
            s => s,
        }
    }

    /// Forward passes for one sample on its own tape; returns the loss
    /// breakdown, gradients (already divided by `scale`) and raw-pass
    /// features.
    fn sample_step(&self, sample: &Sample, slot: usize, scale: f64) -> Result<(LossBreakdown, Vec<Tensor>, Vec<f64>)> {
        let tape = Tape::new();
        let bound = self.model.bind(&tape);
        let labels = &sample.labels;
        let raw = run_pass(&self.model, &bound, &sample.image, labels, &self.templates, &self.loss)?;
        let features = feature_values(&raw.routing);

        let cfg = &self.peekaboo;
        let positives: Vec<usize> = sample.positive_classes().collect();
        let mut groups: Vec<Vec<PassOutput<'_>>> = vec![Vec::new(), Vec::new()];
        if (cfg.crop || cfg.drop) && !positives.is_empty() {
            let mut pick = rng::stream(self.seed, &[rng::tag::HEAD_PICK, self.epoch, self.step, slot as u64]);
            let stride = self.model.config().stride();
            let side = self.crop_size();
            for &j in &positives {
                let head = pick.gen_range(0..self.model.config().num_heads);
                let a_star = steering_map(&raw.routing, j, cfg.head_choice, head);
                if cfg.crop {
                    let (_, cells) = crop_mask_and_bbox(&a_star, cfg.theta_c);
                    let (patch, _) = crop_and_upsample(&sample.image, cells, stride, side, side);
                    groups[0].push(run_pass(&self.model, &bound, &patch, labels, &self.templates, &self.loss)?);
                }
                if cfg.drop {
                    let dropped = drop_patch(&sample.image, &a_star, cfg.theta_d);
                    groups[1].push(run_pass(&self.model, &bound, &dropped, labels, &self.templates, &self.loss)?);
                }
            }
        }

        // each enabled pass kind contributes equally; extra passes are averaged
        let kinds = 1 + groups.iter().filter(|g| !g.is_empty()).count();
        let mut weighted: Vec<(f64, &PassOutput<'_>)> = vec![(1.0 / kinds as f64, &raw)];
        for g in groups.iter().filter(|g| !g.is_empty()) {
            weighted.extend(g.iter().map(|p| (1.0 / (kinds * g.len()) as f64, p)));
        }
        let mut loss: Option<Var<'_>> = None;
        let (mut margin, mut har) = (0.0, 0.0);
        let mut per_class = vec![0.0; labels.len()];
        for &(w, p) in &weighted {
            let term = p.loss.mul_scalar(w * scale)?;
            loss = Some(match loss {
                Some(acc) => acc.add(term)?,
                None => term,
            });
            margin += w * p.margin;
            har += w * p.har;
            per_class.iter_mut().zip(&p.per_class).for_each(|(a, b)| *a += w * b);
        }
        let loss = loss.expect("raw pass always present");
        let grads = tape.backward(loss)?;
        let grads = bound.params.iter().map(|&p| grads.wrt(p)).collect();
        Ok((LossBreakdown::new(margin, har, per_class), grads, features))
    }

    /// One optimizer step on `batch`: raw, crop and drop passes, Adam, then
    /// one template update from the raw-pass features.
    pub fn peekaboo_train_step(&mut self, batch: &[&Sample]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Contract("training step needs a non-empty batch".into()));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut total: Option<Vec<Tensor>> = None;
        let mut features = Vec::with_capacity(batch.len());
        let (mut margin, mut har) = (0.0, 0.0);
        let mut per_class = vec![0.0; self.model.config().num_classes];
        for (slot, sample) in batch.iter().enumerate() {
            let (b, grads, f) = self.sample_step(sample, slot, scale)?;
            margin += b.margin * scale;
            har += b.har * scale;
            per_class.iter_mut().zip(&b.per_class).for_each(|(a, v)| *a += v * scale);
            features.push(f);
            total = Some(match total {
                None => grads,
                Some(mut acc) => {
                    for (a, g) in acc.iter_mut().zip(grads) {
                        a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                    }
                    acc
                }
            });
        }
        let grads = total.expect("non-empty batch");
        // refuse to write NaN into the parameters; callers map this to exit 4
        if !(margin + har).is_finite() || grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("training step"));
        }
        self.optimizer.step(self.model.params_mut(), &grads)?;
        let labels: Vec<&[u8]> = batch.iter().map(|s| s.labels.as_slice()).collect();
        self.templates.update_from_batch(&features, &labels);
        self.step += 1;
        Ok(LossBreakdown::new(margin, har, per_class))
    }
}

/// Coarse, fine and distilled class scores for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillOutput {
    pub coarse: Vec<f64>,
    /// Per-class score from the pass on that class's crop.
    pub fine: Option<Vec<f64>>,
    pub distilled: Vec<f64>,
    /// Coarse-pass HAMs, `[I, J, h, w]`.
    pub hams: Tensor,
    /// Pixel region cropped for each class.
    pub crops: Option<Vec<PixelBox>>,
    /// Head-averaged HAM of class `j` from the pass on crop `j`.
    pub fine_maps: Option<Vec<Tensor>>,
}

/// Coarse pass, then one fine pass per class on the crop chosen by the
/// head-averaged map; the distilled score is the mean of the two.
pub fn distill_predict(model: &CapsNet, image: &Tensor, cfg: &PeekabooConfig) -> Result<DistillOutput> {
    let tape = Tape::new();
    let bound = model.bind_frozen(&tape);
    let coarse_pass = model.forward(&bound, image)?.routing;
    let coarse = coarse_pass.score_values();
    let hams = coarse_pass.hams.clone();
    if !cfg.distill {
        return Ok(DistillOutput {
            distilled: coarse.clone(),
            coarse,
            fine: None,
            hams,
            crops: None,
            fine_maps: None,
        });
    }
    let mc = model.config();
    let side = if cfg.crop_size == 0 { mc.image_size } else { cfg.crop_size };
    let (mut fine, mut crops, mut fine_maps) = (Vec::new(), Vec::new(), Vec::new());
    for j in 0..mc.num_classes {
        let a_star = normalize_ham(&class_map(&hams, j));
        let (_, cells) = crop_mask_and_bbox(&a_star, cfg.theta_c);
        let (patch, region) = crop_and_upsample(image, cells, mc.stride(), side, side);
        let tape = Tape::new();
        let bound = model.bind_frozen(&tape);
        let pass = model.forward(&bound, &patch)?.routing;
        fine.push(pass.score_values()[j]);
        fine_maps.push(class_map(&pass.hams, j));
        crops.push(region);
    }
    let distilled = coarse.iter().zip(&fine).map(|(c, f)| (c + f) / 2.0).collect();
    Ok(DistillOutput {
        coarse,
        fine: Some(fine),
        distilled,
        hams,
        crops: Some(crops),
        fine_maps: Some(fine_maps),
    })
}
