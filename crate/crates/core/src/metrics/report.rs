use serde::{Deserialize, Serialize};
use serde_json::json;
use std::fs;
use std::path::Path;

use super::{average_precision, extract_detections, iou, map_from_patch, roc_auc, Detection, Level};
use crate::capsnet::{CapsNet, RoutingResult, SCORE_THRESHOLD};
use crate::data::{write_pgm, PixelBox, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::{class_map, distill_predict, normalize_ham, resize_region, DistillOutput, PeekabooConfig};

pub const AP_THRESHOLDS: [f64; 4] = [0.3, 0.4, 0.5, 0.6];

/// Model output for one image plus the boxes read off its maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub output: DistillOutput,
    pub level1: Vec<Detection>,
    /// Present when distillation is enabled.
    pub level2: Option<Vec<Detection>>,
}

/// Distilled prediction and detections for classes scored at or above the
/// decision threshold.
pub fn predict(model: &CapsNet, image: &Tensor, cfg: &PeekabooConfig) -> Result<Prediction> {
    let output = distill_predict(model, image, cfg)?;
    let mc = model.config();
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let side = if cfg.crop_size == 0 { mc.image_size } else { cfg.crop_size };
    let fine_stride = side / mc.grid();
    let mut level1 = Vec::new();
    let mut level2 = output.fine_maps.as_ref().map(|_| Vec::new());
    for (j, &score) in output.distilled.iter().enumerate() {
        if score < SCORE_THRESHOLD {
            continue;
        }
        let coarse = class_map(&output.hams, j);
        level1.extend(extract_detections(&coarse, j, score, cfg.theta_c, mc.stride(), h, w, Level::Coarse));
        if let (Some(fine), Some(crops), Some(l2)) = (&output.fine_maps, &output.crops, level2.as_mut()) {
            for d in extract_detections(&fine[j], j, score, cfg.theta_c, fine_stride, side, side, Level::Fine) {
                l2.push(Detection {
                    bbox: map_from_patch(d.bbox, crops[j], side),
                    ..d
                });
            }
        }
    }
    Ok(Prediction { output, level1, level2 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_samples: usize,
    pub num_classes: usize,
    /// `None` where the test set holds a single label value for the class.
    pub auc_per_class: Vec<Option<f64>>,
    pub auc_mean: Option<f64>,
    pub miou_level1_mean: f64,
    pub miou_level1_std: f64,
    pub miou_level2_mean: Option<f64>,
    pub miou_level2_std: Option<f64>,
    #[serde(rename = "ap_level1@0.3")]
    pub ap_level1_30: f64,
    #[serde(rename = "ap_level1@0.4")]
    pub ap_level1_40: f64,
    #[serde(rename = "ap_level1@0.5")]
    pub ap_level1_50: f64,
    #[serde(rename = "ap_level1@0.6")]
    pub ap_level1_60: f64,
    #[serde(rename = "ap_level2@0.3")]
    pub ap_level2_30: Option<f64>,
    #[serde(rename = "ap_level2@0.4")]
    pub ap_level2_40: Option<f64>,
    #[serde(rename = "ap_level2@0.5")]
    pub ap_level2_50: Option<f64>,
    #[serde(rename = "ap_level2@0.6")]
    pub ap_level2_60: Option<f64>,
    /// Share of images whose whole label vector is predicted correctly.
    pub accuracy_exact_match: f64,
    pub accuracy_per_class: Vec<f64>,
    pub accuracy_per_class_mean: f64,
    pub seed: u64,
    pub config: String,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Each truth box paired with its best-overlapping prediction of the same
/// class; unmatched truths score 0.
fn ious(samples: &[Sample], dets: &[&[Detection]]) -> Vec<f64> {
    let mut out = Vec::new();
    for (s, d) in samples.iter().zip(dets) {
        for t in &s.boxes {
            let best = d
                .iter()
                .filter(|p| p.class == t.class)
                .map(|p| iou(&p.bbox, &t.bbox))
                .fold(0.0, f64::max);
            out.push(best);
        }
    }
    out
}

fn aps(samples: &[Sample], dets: &[&[Detection]], num_classes: usize) -> [f64; 4] {
    let mut groups: Vec<(Vec<Detection>, Vec<PixelBox>)> = Vec::new();
    for (s, d) in samples.iter().zip(dets) {
        for j in 0..num_classes {
            groups.push((d.iter().filter(|p| p.class == j).copied().collect(), s.boxes_of(j).collect()));
        }
    }
    AP_THRESHOLDS.map(|thr| average_precision(&groups, thr))
}

impl EvalReport {
    /// Aggregates per-image predictions against their samples.
    pub fn from_predictions(samples: &[Sample], preds: &[Prediction], config: &str, seed: u64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("cannot evaluate an empty dataset".into()));
        }
        if samples.len() != preds.len() {
            return Err(Error::mismatch("evaluate", &[samples.len()], &[preds.len()]));
        }
        let num_classes = samples[0].labels.len();
        let mut auc_per_class = Vec::with_capacity(num_classes);
        let mut accuracy_per_class = Vec::with_capacity(num_classes);
        for j in 0..num_classes {
            let scores: Vec<f64> = preds.iter().map(|p| p.output.distilled[j]).collect();
            let labels: Vec<u8> = samples.iter().map(|s| s.labels[j]).collect();
            auc_per_class.push(match roc_auc(&scores, &labels) {
                Ok(a) => Some(a),
                Err(Error::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            });
            let right = scores.iter().zip(&labels).filter(|(&s, &l)| (s >= SCORE_THRESHOLD) == (l == 1)).count();
            accuracy_per_class.push(right as f64 / samples.len() as f64);
        }
        let defined: Vec<f64> = auc_per_class.iter().flatten().copied().collect();
        let auc_mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        let exact = samples
            .iter()
            .zip(preds)
            .filter(|(s, p)| s.labels.iter().zip(&p.output.distilled).all(|(&l, &d)| (d >= SCORE_THRESHOLD) == (l == 1)))
            .count();

        let l1: Vec<&[Detection]> = preds.iter().map(|p| p.level1.as_slice()).collect();
        let (miou1, std1) = mean_std(&ious(samples, &l1));
        let ap1 = aps(samples, &l1, num_classes);
        let l2: Option<Vec<&[Detection]>> = preds.iter().map(|p| p.level2.as_deref()).collect();
        let (m2, ap2) = match &l2 {
            Some(l2) => (Some(mean_std(&ious(samples, l2))), Some(aps(samples, l2, num_classes))),
            None => (None, None),
        };
        Ok(EvalReport {
            num_samples: samples.len(),
            num_classes,
            auc_per_class,
            auc_mean,
            miou_level1_mean: miou1,
            miou_level1_std: std1,
            miou_level2_mean: m2.map(|m| m.0),
            miou_level2_std: m2.map(|m| m.1),
            ap_level1_30: ap1[0],
            ap_level1_40: ap1[1],
            ap_level1_50: ap1[2],
            ap_level1_60: ap1[3],
            ap_level2_30: ap2.map(|a| a[0]),
            ap_level2_40: ap2.map(|a| a[1]),
            ap_level2_50: ap2.map(|a| a[2]),
            ap_level2_60: ap2.map(|a| a[3]),
            accuracy_exact_match: exact as f64 / samples.len() as f64,
            accuracy_per_class_mean: accuracy_per_class.iter().sum::<f64>() / num_classes as f64,
            accuracy_per_class,
            seed,
            config: config.to_string(),
        })
    }

    pub fn ap_level1(&self) -> [f64; 4] {
        [self.ap_level1_30, self.ap_level1_40, self.ap_level1_50, self.ap_level1_60]
    }

    pub fn ap_level2(&self) -> Option<[f64; 4]> {
        Some([self.ap_level2_30?, self.ap_level2_40?, self.ap_level2_50?, self.ap_level2_60?])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

/// Predicts every sample and aggregates the report.
pub fn evaluate(model: &CapsNet, samples: &[Sample], cfg: &PeekabooConfig, config: &str, seed: u64) -> Result<(EvalReport, Vec<Prediction>)> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let preds = samples
        .iter()
        .map(|s| predict(model, &s.image, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok((EvalReport::from_predictions(samples, &preds, config, seed)?, preds))
}

fn det_json(d: &Detection) -> serde_json::Value {
    json!({"class": d.class, "box": [d.bbox.r0, d.bbox.c0, d.bbox.r1, d.bbox.c1], "score": d.score})
}

/// Writes one greyscale PGM per (head, class) HAM, normalized and resized to
/// the image, plus `<id>.json` with the truths and both detection levels.
/// Returns the number of heatmaps written.
pub fn dump_heatmaps(dir: &Path, sample: &Sample, pred: &Prediction) -> Result<usize> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let hams = &pred.output.hams;
    let (heads, classes, gh, gw) = (hams.shape()[0], hams.shape()[1], hams.shape()[2], hams.shape()[3]);
    let (h, w) = (sample.height(), sample.width());
    let mut files = Vec::new();
    for i in 0..heads {
        for j in 0..classes {
            let a = normalize_ham(&RoutingResult::map_of(hams, i, j));
            let up = resize_region(a.data(), gw, PixelBox::new(0, 0, gh - 1, gw - 1), h, w);
            let name = format!("{}_h{i}_c{j}.pgm", sample.id);
            write_pgm(&dir.join(&name), &Tensor::new(&[h, w], up)?)?;
            files.push(name);
        }
    }
    let sidecar = json!({
        "id": sample.id,
        "height": h,
        "width": w,
        "heatmaps": files,
        "truths": sample.boxes.iter().map(|b| [b.class, b.bbox.r0, b.bbox.c0, b.bbox.r1, b.bbox.c1]).collect::<Vec<_>>(),
        "scores_coarse": pred.output.coarse,
        "scores_fine": pred.output.fine,
        "scores_distilled": pred.output.distilled,
        "level1": pred.level1.iter().map(det_json).collect::<Vec<_>>(),
        "level2": pred.level2.as_ref().map(|l| l.iter().map(det_json).collect::<Vec<_>>()),
    });
    let path = dir.join(format!("{}.json", sample.id));
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(files.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetSpec};

    fn oracle(samples: &[Sample]) -> Vec<Prediction> {
        samples
            .iter()
            .map(|s| {
                let dets: Vec<Detection> = s
                    .boxes
                    .iter()
                    .map(|b| Detection {
                        class: b.class,
                        bbox: b.bbox,
                        score: 1.0,
                        level: Level::Coarse,
                    })
                    .collect();
                let labels: Vec<f64> = s.labels.iter().map(|&l| f64::from(l)).collect();
                Prediction {
                    output: DistillOutput {
                        coarse: labels.clone(),
                        fine: Some(labels.clone()),
                        distilled: labels,
                        hams: Tensor::zeros(&[1, s.labels.len(), 1, 1]),
                        crops: None,
                        fine_maps: None,
                    },
                    level1: dets.clone(),
                    level2: Some(dets),
                }
            })
            .collect()
    }

    #[test]
    fn oracle_detections_score_perfectly() {
        let data = generate(&DatasetSpec { num_samples: 30, ..DatasetSpec::default() }).unwrap();
        let r = EvalReport::from_predictions(&data, &oracle(&data), "", 1).unwrap();
        assert_eq!(r.miou_level1_mean, 1.0);
        assert_eq!(r.miou_level2_mean, Some(1.0));
        assert_eq!(r.ap_level1(), [1.0; 4]);
        assert_eq!(r.ap_level2(), Some([1.0; 4]));
        assert_eq!(r.auc_mean, Some(1.0));
        assert_eq!(r.accuracy_exact_match, 1.0);
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(EvalReport::from_predictions(&[], &[], "", 1), Err(Error::Data(_))));
    }
}
