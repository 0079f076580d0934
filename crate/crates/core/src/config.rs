//! Run configuration as flat `key = value` text with dotted sections.
//!
//! The canonical echo lists every key in a fixed order; parsing an echo
//! yields the identical configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::capsnet::{ConvBlock, ModelConfig, RoutingMode};
use crate::data::{DatasetSpec, ShapeKind};
use crate::error::{Error, Result};
use crate::training::{HeadChoice, LossConfig, MarginParams, OptimConfig, PeekabooConfig};

/// Environment variable that overrides `seed`.
pub const SEED_ENV: &str = "DECAPS_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Training manifest; empty means generate from `spec`.
    pub manifest: PathBuf,
    /// Evaluation manifest; empty means generate from `spec` with `test_seed`.
    pub test_manifest: PathBuf,
    pub spec: DatasetSpec,
    pub test_samples: usize,
    pub test_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: PathBuf::new(),
            test_manifest: PathBuf::new(),
            spec: DatasetSpec {
                num_samples: 2000,
                ..DatasetSpec::default()
            },
            test_samples: 500,
            test_seed: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub peekaboo: PeekabooConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub seed: u64,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            peekaboo: PeekabooConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            seed: 1,
            output: PathBuf::from("runs"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value {value:?} for key `{key}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn path_text(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

impl RunConfig {
    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let p = &self.peekaboo;
        let l = &self.loss;
        let o = &self.optim;
        let d = &self.data;
        vec![
            ("model.image_size", m.image_size.to_string()),
            ("model.in_channels", m.in_channels.to_string()),
            ("model.backbone", join(&m.backbone)),
            ("model.heads", m.num_heads.to_string()),
            ("model.pose_dim", m.pose_dim.to_string()),
            ("model.class_dim", m.class_dim.to_string()),
            ("model.num_classes", m.num_classes.to_string()),
            ("model.n_iter", m.n_iter.to_string()),
            ("model.coord_add", m.coord_add.to_string()),
            ("model.routing", m.routing.to_string()),
            ("peekaboo.theta_c", p.theta_c.to_string()),
            ("peekaboo.theta_d", p.theta_d.to_string()),
            ("peekaboo.crop_size", p.crop_size.to_string()),
            ("peekaboo.crop", p.crop.to_string()),
            ("peekaboo.drop", p.drop.to_string()),
            ("peekaboo.distill", p.distill.to_string()),
            ("peekaboo.head_choice", p.head_choice.to_string()),
            ("loss.m_plus", l.margin.m_plus.to_string()),
            ("loss.m_minus", l.margin.m_minus.to_string()),
            ("loss.lambda", l.margin.lambda.to_string()),
            ("loss.har_weight", l.har_weight.to_string()),
            ("loss.gamma", l.gamma.to_string()),
            ("optim.lr", o.learning_rate.to_string()),
            ("optim.beta1", o.beta1.to_string()),
            ("optim.beta2", o.beta2.to_string()),
            ("optim.epsilon", o.epsilon.to_string()),
            ("optim.epochs", o.epochs.to_string()),
            ("optim.batch", o.batch_size.to_string()),
            ("data.manifest", path_text(&d.manifest)),
            ("data.test_manifest", path_text(&d.test_manifest)),
            ("data.num_samples", d.spec.num_samples.to_string()),
            ("data.test_samples", d.test_samples.to_string()),
            ("data.classes", join(&d.spec.classes)),
            ("data.objects_min", d.spec.objects.0.to_string()),
            ("data.objects_max", d.spec.objects.1.to_string()),
            ("data.size_min", d.spec.size.0.to_string()),
            ("data.size_max", d.spec.size.1.to_string()),
            ("data.noise", d.spec.noise.to_string()),
            ("data.seed", d.spec.seed.to_string()),
            ("data.test_seed", d.test_seed.to_string()),
            ("seed", self.seed.to_string()),
            ("output", path_text(&self.output)),
        ]
    }

    /// All recognised keys.
    pub fn keys() -> Vec<&'static str> {
        RunConfig::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let p = &mut self.peekaboo;
        let l = &mut self.loss;
        let o = &mut self.optim;
        let d = &mut self.data;
        match key {
            "model.image_size" => m.image_size = parse(key, v)?,
            "model.in_channels" => m.in_channels = parse(key, v)?,
            "model.backbone" => m.backbone = parse_list::<ConvBlock>(key, v)?,
            "model.heads" => m.num_heads = parse(key, v)?,
            "model.pose_dim" => m.pose_dim = parse(key, v)?,
            "model.class_dim" => m.class_dim = parse(key, v)?,
            "model.num_classes" => m.num_classes = parse(key, v)?,
            "model.n_iter" => m.n_iter = parse(key, v)?,
            "model.coord_add" => m.coord_add = parse(key, v)?,
            "model.routing" => m.routing = parse::<RoutingMode>(key, v)?,
            "peekaboo.theta_c" => p.theta_c = parse(key, v)?,
            "peekaboo.theta_d" => p.theta_d = parse(key, v)?,
            "peekaboo.crop_size" => p.crop_size = parse(key, v)?,
            "peekaboo.crop" => p.crop = parse(key, v)?,
            "peekaboo.drop" => p.drop = parse(key, v)?,
            "peekaboo.distill" => p.distill = parse(key, v)?,
            "peekaboo.head_choice" => p.head_choice = parse::<HeadChoice>(key, v)?,
            "loss.m_plus" => l.margin.m_plus = parse(key, v)?,
            "loss.m_minus" => l.margin.m_minus = parse(key, v)?,
            "loss.lambda" => l.margin.lambda = parse(key, v)?,
            "loss.har_weight" => l.har_weight = parse(key, v)?,
            "loss.gamma" => l.gamma = parse(key, v)?,
            "optim.lr" => o.learning_rate = parse(key, v)?,
            "optim.beta1" => o.beta1 = parse(key, v)?,
            "optim.beta2" => o.beta2 = parse(key, v)?,
            "optim.epsilon" => o.epsilon = parse(key, v)?,
            "optim.epochs" => o.epochs = parse(key, v)?,
            "optim.batch" => o.batch_size = parse(key, v)?,
            "data.manifest" => d.manifest = PathBuf::from(v),
            "data.test_manifest" => d.test_manifest = PathBuf::from(v),
            "data.num_samples" => d.spec.num_samples = parse(key, v)?,
            "data.test_samples" => d.test_samples = parse(key, v)?,
            "data.classes" => d.spec.classes = parse_list::<ShapeKind>(key, v)?,
            "data.objects_min" => d.spec.objects.0 = parse(key, v)?,
            "data.objects_max" => d.spec.objects.1 = parse(key, v)?,
            "data.size_min" => d.spec.size.0 = parse(key, v)?,
            "data.size_max" => d.spec.size.1 = parse(key, v)?,
            "data.noise" => d.spec.noise = parse(key, v)?,
            "data.seed" => d.spec.seed = parse(key, v)?,
            "data.test_seed" => d.test_seed = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "output" => self.output = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines over the current values. `#` starts a
    /// comment; blank lines are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", k + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {}", k + 1, e.to_string().trim_start_matches("config error: "))))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    /// Canonical `key = value` text of every setting.
    pub fn echo(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Overrides `seed` from `value` when present (the caller reads the
    /// environment).
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = parse(SEED_ENV, v)?;
        }
        Ok(())
    }

    /// Cross-field checks that individual setters cannot make.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.peekaboo.validate()?;
        if self.optim.batch_size == 0 {
            return Err(Error::Config("optim.batch must be at least 1".into()));
        }
        if !(self.optim.learning_rate > 0.0) {
            return Err(Error::Config("optim.lr must be positive".into()));
        }
        if self.data.manifest.as_os_str().is_empty() && self.data.spec.classes.len() != self.model.num_classes {
            return Err(Error::Config(format!(
                "data.classes lists {} shapes but model.num_classes is {}",
                self.data.spec.classes.len(),
                self.model.num_classes
            )));
        }
        Ok(())
    }

    /// Dataset spec for generated training data, with images sized to the
    /// model.
    pub fn train_spec(&self) -> DatasetSpec {
        DatasetSpec {
            height: self.model.image_size,
            width: self.model.image_size,
            ..self.data.spec.clone()
        }
    }

    pub fn test_spec(&self) -> DatasetSpec {
        DatasetSpec {
            num_samples: self.data.test_samples,
            seed: self.data.test_seed,
            ..self.train_spec()
        }
    }
}

impl From<&RunConfig> for MarginParams {
    fn from(c: &RunConfig) -> Self {
        c.loss.margin
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let c = RunConfig::default();
        assert_eq!((c.model.num_heads, c.model.pose_dim, c.model.class_dim, c.model.n_iter), (4, 64, 16, 3));
        assert!(c.model.coord_add);
        assert_eq!((c.peekaboo.theta_c, c.peekaboo.theta_d), (0.5, 0.3));
        assert_eq!((c.loss.margin.m_plus, c.loss.margin.m_minus, c.loss.margin.lambda), (0.9, 0.1, 0.5));
        assert_eq!((c.loss.har_weight, c.loss.gamma), (1.0, 1e-4));
        assert_eq!((c.optim.beta1, c.optim.beta2, c.optim.learning_rate), (0.5, 0.999, 1e-3));
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.set("model.n_iter", "5").unwrap();
        c.set("model.routing", "baseline").unwrap();
        c.set("optim.lr", "0.00031").unwrap();
        c.set("data.classes", "cross, disc").unwrap();
        let echo = c.echo();
        let back = RunConfig::parse(&echo).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.echo(), echo);
    }

    #[test]
    fn unknown_key_rejected_with_name() {
        let err = RunConfig::parse("model.n_iters = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("model.n_iters"));
        let err = RunConfig::parse("# comment\nmodel.n_iter = three").unwrap_err();
        assert!(err.to_string().contains("line 2") && err.to_string().contains("model.n_iter"));
    }

    #[test]
    fn seed_override() {
        let mut c = RunConfig::default();
        c.apply_seed_override(Some("42")).unwrap();
        assert_eq!(c.seed, 42);
        assert!(c.apply_seed_override(Some("x")).is_err());
    }

    #[test]
    fn class_count_must_agree() {
        let mut c = RunConfig::default();
        c.set("data.classes", "disc,square").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
