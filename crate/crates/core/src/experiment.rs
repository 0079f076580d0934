//! End-to-end runs: dataset loading, training with per-epoch checkpoints and
//! a loss log, evaluation, and the component ablation grid.

use serde::Serialize;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;

use crate::config::RunConfig;
use crate::data::{dataset_digest, epoch_batches, generate, load_manifest, Sample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, Prediction};
use crate::training::{Checkpoint, LossBreakdown, PeekabooConfig, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "loss_log.csv";
pub const REPORT_FILE: &str = "report.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Loads the split's manifest, or generates it from the configured spec,
/// and checks it against the model.
pub fn load_dataset(cfg: &RunConfig, split: Split) -> Result<Vec<Sample>> {
    let (manifest, spec) = match split {
        Split::Train => (&cfg.data.manifest, cfg.train_spec()),
        Split::Test => (&cfg.data.test_manifest, cfg.test_spec()),
    };
    let samples = if manifest.as_os_str().is_empty() {
        generate(&spec)?
    } else {
        load_manifest(manifest)?
    };
    let m = &cfg.model;
    let want = [m.in_channels, m.image_size, m.image_size];
    for s in &samples {
        if s.image.shape() != want {
            return Err(Error::Data(format!("sample {} has shape {:?}, the model expects {want:?}", s.id, s.image.shape())));
        }
        if s.labels.len() != m.num_classes {
            return Err(Error::Data(format!(
                "sample {} has {} labels, the model expects {}",
                s.id,
                s.labels.len(),
                m.num_classes
            )));
        }
    }
    Ok(samples)
}

pub fn new_trainer(cfg: &RunConfig) -> Result<Trainer> {
    cfg.validate()?;
    Trainer::new(cfg.model.clone(), cfg.loss.clone(), cfg.peekaboo.clone(), &cfg.optim, cfg.seed)
}

/// Reads a checkpoint and its embedded config.
pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = RunConfig::parse(&ckpt.config_echo)?;
    Ok((cfg, ckpt))
}

/// Restores a trainer from `ckpt` under `cfg` (whose model section must
/// match the stored tensors).
pub fn resume_trainer(cfg: &RunConfig, ckpt: Checkpoint) -> Result<Trainer> {
    cfg.validate()?;
    Trainer::from_checkpoint(ckpt, cfg.model.clone(), cfg.loss.clone(), cfg.peekaboo.clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: u64,
    pub step: u64,
    pub loss: LossBreakdown,
}

fn open_log(dir: &Path, cfg: &RunConfig, fresh: bool) -> Result<File> {
    let path = dir.join(LOG_FILE);
    if fresh || !path.exists() {
        let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut head: String = cfg.echo().lines().map(|l| format!("# {l}\n")).collect();
        head.push_str("epoch,step,margin,har,total\n");
        f.write_all(head.as_bytes()).map_err(|e| Error::io(&path, e))?;
        Ok(f)
    } else {
        OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))
    }
}

/// Runs the remaining epochs of `cfg.optim.epochs`. With `out`, appends to
/// the CSV loss log and writes `epoch_<n>.bin` plus `checkpoint.bin` after
/// every epoch.
pub fn train(
    cfg: &RunConfig,
    trainer: &mut Trainer,
    data: &[Sample],
    out: Option<&Path>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(open_log(dir, cfg, trainer.step == 0)?)
        }
        None => None,
    };
    let echo = cfg.echo();
    for epoch in trainer.epoch..cfg.optim.epochs as u64 {
        trainer.epoch = epoch;
        for batch in epoch_batches(data.len(), cfg.optim.batch_size, cfg.seed, epoch)? {
            let refs: Vec<&Sample> = batch.iter().map(|&k| &data[k]).collect();
            let loss = trainer.peekaboo_train_step(&refs)?;
            let rec = StepRecord {
                epoch,
                step: trainer.step,
                loss,
            };
            if let (Some(f), Some(dir)) = (log.as_mut(), out) {
                let l = &rec.loss;
                writeln!(f, "{},{},{},{},{}", rec.epoch, rec.step, l.margin, l.har, l.total)
                    .map_err(|e| Error::io(dir.join(LOG_FILE), e))?;
            }
            on_step(&rec);
        }
        trainer.epoch = epoch + 1;
        if let Some(dir) = out {
            let ckpt = Checkpoint::from_trainer(trainer, &echo);
            ckpt.save(&dir.join(format!("epoch_{}.bin", epoch + 1)))?;
            ckpt.save(&dir.join(CHECKPOINT_FILE))?;
        }
    }
    Ok(())
}

/// Evaluates `trainer`'s model with the config's Peekaboo settings.
pub fn evaluate_run(cfg: &RunConfig, trainer: &Trainer, test: &[Sample]) -> Result<(EvalReport, Vec<Prediction>)> {
    evaluate(&trainer.model, test, &cfg.peekaboo, &cfg.echo(), cfg.seed)
}

/// One configuration of the component grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AblationSetting {
    pub name: &'static str,
    pub crop: bool,
    pub drop: bool,
    pub distill: bool,
}

const fn setting(name: &'static str, crop: bool, drop: bool, distill: bool) -> AblationSetting {
    AblationSetting { name, crop, drop, distill }
}

pub const ABLATION_GRID: [AblationSetting; 5] = [
    setting("idr", false, false, false),
    setting("idr+drop", false, true, false),
    setting("idr+crop", true, false, false),
    setting("idr+crop+drop", true, true, false),
    setting("idr+crop+drop+distill", true, true, true),
];

/// Metrics of one setting averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub setting: String,
    pub crop: bool,
    pub drop: bool,
    pub distill: bool,
    pub seeds: Vec<u64>,
    pub auc_per_seed: Vec<f64>,
    pub auc_mean: f64,
    pub miou_level1: f64,
    pub miou_level2: Option<f64>,
    pub accuracy_exact_match: f64,
    pub data_hash: String,
}

/// Trains once per distinct (crop, drop) pair and seed, then evaluates every
/// setting; distillation rows reuse the model trained without it.
pub fn ablate(
    cfg: &RunConfig,
    train_data: &[Sample],
    test: &[Sample],
    seeds: &[u64],
    settings: &[AblationSetting],
    mut progress: impl FnMut(&str, u64),
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let hash = dataset_digest(train_data) + &dataset_digest(test)[..16];
    let mut reports: Vec<Vec<EvalReport>> = vec![Vec::new(); settings.len()];
    for &seed in seeds {
        let mut cache: Vec<((bool, bool), Trainer)> = Vec::new();
        for (k, s) in settings.iter().enumerate() {
            let mut run = cfg.clone();
            run.seed = seed;
            run.peekaboo = PeekabooConfig {
                crop: s.crop,
                drop: s.drop,
                distill: s.distill,
                ..cfg.peekaboo.clone()
            };
            if !cache.iter().any(|(key, _)| *key == (s.crop, s.drop)) {
                progress(s.name, seed);
                let mut t = new_trainer(&run)?;
                train(&run, &mut t, train_data, None, |_| {})?;
                cache.push(((s.crop, s.drop), t));
            }
            let t = &cache.iter().find(|(key, _)| *key == (s.crop, s.drop)).expect("cached").1;
            let (report, _) = evaluate(&t.model, test, &run.peekaboo, &run.echo(), seed)?;
            reports[k].push(report);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    settings
        .iter()
        .zip(&reports)
        .map(|(s, rs)| {
            let aucs = rs
                .iter()
                .map(|r| r.auc_mean.ok_or_else(|| Error::Data("test set lacks both label values for every class".into())))
                .collect::<Result<Vec<_>>>()?;
            let l2: Option<Vec<f64>> = rs.iter().map(|r| r.miou_level2_mean).collect();
            Ok(AblationRow {
                setting: s.name.to_string(),
                crop: s.crop,
                drop: s.drop,
                distill: s.distill,
                seeds: seeds.to_vec(),
                auc_mean: mean(&aucs),
                auc_per_seed: aucs,
                miou_level1: mean(&rs.iter().map(|r| r.miou_level1_mean).collect::<Vec<_>>()),
                miou_level2: l2.map(|v| mean(&v)),
                accuracy_exact_match: mean(&rs.iter().map(|r| r.accuracy_exact_match).collect::<Vec<_>>()),
                data_hash: hash.clone(),
            })
        })
        .collect()
}

/// Plain-text table of ablation rows.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!("{:<24} {:>8} {:>8} {:>8} {:>8}\n", "setting", "mAUC", "mIoU-1", "mIoU-2", "acc");
    for r in rows {
        let l2 = r.miou_level2.map_or("-".to_string(), |v| format!("{v:.4}"));
        out.push_str(&format!(
            "{:<24} {:>8.4} {:>8.4} {:>8} {:>8.4}\n",
            r.setting, r.auc_mean, r.miou_level1, l2, r.accuracy_exact_match
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capsnet::ConvBlock;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.model.image_size = 16;
        c.model.backbone = vec![ConvBlock::new(4, 2), ConvBlock::new(4, 2)];
        c.model.num_heads = 2;
        c.model.pose_dim = 4;
        c.model.class_dim = 4;
        c.data.spec.num_samples = 12;
        c.data.spec.size = (5, 7);
        c.data.test_samples = 10;
        c.optim.epochs = 2;
        c.optim.batch_size = 4;
        c
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = tiny();
        let data = load_dataset(&cfg, Split::Train).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut full = new_trainer(&cfg).unwrap();
        let mut losses = Vec::new();
        train(&cfg, &mut full, &data, Some(dir.path()), |r| losses.push(r.loss.total)).unwrap();
        assert!(dir.path().join("epoch_1.bin").exists());
        let log = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(log.lines().filter(|l| !l.starts_with('#')).count(), 1 + losses.len());

        let (saved_cfg, ckpt) = load_checkpoint(&dir.path().join("epoch_1.bin")).unwrap();
        assert_eq!(saved_cfg, cfg);
        let mut resumed = resume_trainer(&saved_cfg, ckpt).unwrap();
        let mut tail = Vec::new();
        train(&cfg, &mut resumed, &data, None, |r| tail.push(r.loss.total)).unwrap();
        assert_eq!(tail, losses[losses.len() - tail.len()..]);
        assert_eq!(resumed.model.params(), full.model.params());
    }

    #[test]
    fn ablation_rows_share_data_hash() {
        let mut cfg = tiny();
        cfg.optim.epochs = 1;
        let train_data = load_dataset(&cfg, Split::Train).unwrap();
        let test = load_dataset(&cfg, Split::Test).unwrap();
        let rows = ablate(&cfg, &train_data, &test, &[1], &ABLATION_GRID, |_, _| {}).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| r.data_hash == rows[0].data_hash));
        assert!(rows[4].miou_level2.is_some() && rows[3].miou_level2.is_none());
        assert!(ablation_table(&rows).lines().count() == 6);
    }
}
