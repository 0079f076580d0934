//! Versioned binary checkpoint. All numbers are little-endian; floats are
//! stored as raw bits so a reload is bitwise identical.

use std::fs;
use std::path::Path;

use super::{TemplateBank, Trainer};
use crate::error::{Error, Result};
use crate::tensor::{AdamState, Tensor};

const MAGIC: &[u8; 8] = b"DECAPS1\n";

/// Everything needed to resume training or evaluate.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Canonical config text the run was started with.
    pub config_echo: String,
    pub seed: u64,
    pub epoch: u64,
    pub step: u64,
    pub params: Vec<(String, Tensor)>,
    pub templates: TemplateBank,
    pub optimizer: AdamState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_bits().to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn floats(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u64(t.shape().len() as u64);
        t.shape().iter().for_each(|&d| self.u64(d as u64));
        t.data().iter().for_each(|&x| self.f64(x));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        // a length can never exceed the bytes left, which also bounds allocation
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible length {n}")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }

    fn floats(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.len()?;
        let shape = (0..ndim).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("implausible tensor shape {shape:?}")));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("bad tensor: {e}")))
    }
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, config_echo: &str) -> Self {
        Checkpoint {
            config_echo: config_echo.to_string(),
            seed: trainer.seed,
            epoch: trainer.epoch,
            step: trainer.step,
            params: trainer
                .model
                .param_names()
                .iter()
                .cloned()
                .zip(trainer.model.params().iter().map(|p| Tensor::clone(p)))
                .collect(),
            templates: trainer.templates.clone(),
            optimizer: trainer.optimizer.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(MAGIC.to_vec());
        w.str(&self.config_echo);
        w.u64(self.seed);
        w.u64(self.epoch);
        w.u64(self.step);
        w.u64(self.params.len() as u64);
        for (name, t) in &self.params {
            w.str(name);
            w.tensor(t);
        }
        let tb = &self.templates;
        w.u64(tb.num_heads() as u64);
        w.u64(tb.num_classes() as u64);
        w.u64(tb.dim() as u64);
        w.f64(tb.gamma());
        w.floats(tb.data());
        let o = &self.optimizer;
        for v in [o.learning_rate, o.beta1, o.beta2, o.epsilon] {
            w.f64(v);
        }
        w.u64(o.step_count);
        let (first, second) = o.moments();
        w.u64(first.len() as u64);
        first.iter().chain(second).for_each(|t| w.tensor(t));
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if !bytes.starts_with(MAGIC) {
            return Err(Error::Checkpoint("not a DECAPS1 checkpoint".into()));
        }
        let mut r = Reader { bytes, pos: MAGIC.len() };
        let config_echo = r.str()?;
        let (seed, epoch, step) = (r.u64()?, r.u64()?, r.u64()?);
        let n = r.len()?;
        let params = (0..n).map(|_| Ok((r.str()?, r.tensor()?))).collect::<Result<Vec<_>>>()?;
        let (heads, classes, dim) = (r.len()?, r.len()?, r.len()?);
        let mut templates = TemplateBank::new(heads, classes, dim, r.f64()?);
        let data = r.floats()?;
        if data.len() != heads * classes * dim {
            return Err(Error::Checkpoint("template bank size mismatch".into()));
        }
        *templates.data_mut() = data;
        let hyper = [r.f64()?, r.f64()?, r.f64()?, r.f64()?];
        let step_count = r.u64()?;
        let k = r.len()?;
        let first = (0..k).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let second = (0..k).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            config_echo,
            seed,
            epoch,
            step,
            params,
            templates,
            optimizer: AdamState::from_parts(hyper, step_count, first, second),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capsnet::{ConvBlock, ModelConfig};
    use crate::training::{LossConfig, OptimConfig, PeekabooConfig};

    fn trained() -> Trainer {
        let model = ModelConfig {
            image_size: 8,
            backbone: vec![ConvBlock::new(2, 2)],
            num_heads: 2,
            pose_dim: 2,
            class_dim: 3,
            num_classes: 2,
            ..ModelConfig::default()
        };
        let mut t = Trainer::new(model, LossConfig::default(), PeekabooConfig::default(), &OptimConfig::default(), 3).unwrap();
        let data = crate::data::generate(&crate::data::DatasetSpec {
            num_samples: 2,
            height: 8,
            width: 8,
            classes: vec![crate::data::ShapeKind::Disc, crate::data::ShapeKind::Cross],
            objects: (1, 1),
            size: (4, 6),
            ..Default::default()
        })
        .unwrap();
        t.peekaboo_train_step(&data.iter().collect::<Vec<_>>()).unwrap();
        t
    }

    #[test]
    fn bytes_round_trip() {
        let c = Checkpoint::from_trainer(&trained(), "seed = 3\n");
        let bytes = c.to_bytes();
        assert!(bytes.starts_with(b"DECAPS1"));
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_input_is_an_error() {
        let bytes = Checkpoint::from_trainer(&trained(), "").to_bytes();
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
