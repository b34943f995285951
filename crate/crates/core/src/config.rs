//! Flat `key=value` run configuration. Unknown keys, repeated keys and
//! malformed numbers are errors.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{load_cifar10_train, make_synthetic, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::search::SearchConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Synthetic => "synthetic",
            DatasetKind::Cifar10 => "cifar10",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(DatasetKind::Synthetic),
            "cifar10" => Ok(DatasetKind::Cifar10),
            _ => Err(Error::Config(format!("unknown dataset `{s}` (expected synthetic or cifar10)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub data_path: Option<PathBuf>,
    pub search: SearchConfig,
    pub out_dir: PathBuf,
    pub samples: usize,
    pub image_size: usize,
    pub classes: usize,
    pub noise: f64,
    pub subset: usize,
    pub eval_depth: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synthetic = SyntheticSpec::default();
        Self {
            dataset: DatasetKind::Synthetic,
            data_path: None,
            search: SearchConfig::default(),
            out_dir: PathBuf::from("out"),
            samples: synthetic.samples,
            image_size: synthetic.image_size,
            classes: synthetic.n_classes,
            noise: synthetic.noise,
            subset: 0,
            eval_depth: 20,
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("dataset", "synthetic or cifar10"),
    ("data_path", "directory holding data_batch_{1..5}.bin (cifar10 only)"),
    ("depth", "cells in the search network"),
    ("channels", "initial channel count C0"),
    ("epochs", "training epochs"),
    ("batchsize", "samples per batch"),
    ("K", "partial-channel divisor: 1/K of the channels enter the op space"),
    ("r", "attention MLP reduction ratio"),
    ("mode", "attention, random or full"),
    ("seed", "seed for initialization, splits, batches and masks"),
    ("w_lr", "initial SGD learning rate for network weights (cosine to 0)"),
    ("w_momentum", "SGD momentum"),
    ("w_decay", "SGD weight decay"),
    ("a_lr", "Adam learning rate for architecture weights"),
    ("a_beta1", "Adam beta1"),
    ("a_beta2", "Adam beta2"),
    ("a_decay", "Adam weight decay"),
    ("out_dir", "directory for every artifact"),
    ("samples", "synthetic dataset size"),
    ("image_size", "synthetic image side"),
    ("classes", "synthetic class count"),
    ("noise", "synthetic pixel noise standard deviation"),
    ("subset", "use only the first N CIFAR-10 images (0 = all)"),
    ("eval_depth", "cells in the discrete evaluation network"),
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}` expects a number, got `{value}`")))
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = &mut self.search;
        match key {
            "dataset" => self.dataset = value.parse()?,
            "data_path" => self.data_path = (!value.is_empty()).then(|| PathBuf::from(value)),
            "depth" => s.depth = parse_num(key, value)?,
            "channels" => s.channels = parse_num(key, value)?,
            "epochs" => s.epochs = parse_num(key, value)?,
            "batchsize" => s.batch_size = parse_num(key, value)?,
            "K" => s.k = parse_num(key, value)?,
            "r" => s.r = parse_num(key, value)?,
            "mode" => s.mode = value.parse()?,
            "seed" => s.seed = parse_num(key, value)?,
            "w_lr" => s.w_lr = parse_num(key, value)?,
            "w_momentum" => s.w_momentum = parse_num(key, value)?,
            "w_decay" => s.w_decay = parse_num(key, value)?,
            "a_lr" => s.a_lr = parse_num(key, value)?,
            "a_beta1" => s.a_beta1 = parse_num(key, value)?,
            "a_beta2" => s.a_beta2 = parse_num(key, value)?,
            "a_decay" => s.a_decay = parse_num(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "samples" => self.samples = parse_num(key, value)?,
            "image_size" => self.image_size = parse_num(key, value)?,
            "classes" => self.classes = parse_num(key, value)?,
            "noise" => self.noise = parse_num(key, value)?,
            "subset" => self.subset = parse_num(key, value)?,
            "eval_depth" => self.eval_depth = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Text form of one key.
    pub fn get(&self, key: &str) -> Result<String> {
        let s = &self.search;
        Ok(match key {
            "dataset" => self.dataset.to_string(),
            "data_path" => self.data_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "depth" => s.depth.to_string(),
            "channels" => s.channels.to_string(),
            "epochs" => s.epochs.to_string(),
            "batchsize" => s.batch_size.to_string(),
            "K" => s.k.to_string(),
            "r" => s.r.to_string(),
            "mode" => s.mode.to_string(),
            "seed" => s.seed.to_string(),
            "w_lr" => s.w_lr.to_string(),
            "w_momentum" => s.w_momentum.to_string(),
            "w_decay" => s.w_decay.to_string(),
            "a_lr" => s.a_lr.to_string(),
            "a_beta1" => s.a_beta1.to_string(),
            "a_beta2" => s.a_beta2.to_string(),
            "a_decay" => s.a_decay.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "samples" => self.samples.to_string(),
            "image_size" => self.image_size.to_string(),
            "classes" => self.classes.to_string(),
            "noise" => self.noise.to_string(),
            "subset" => self.subset.to_string(),
            "eval_depth" => self.eval_depth.to_string(),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        })
    }

    /// Applies the pairs of a config file on top of the current values.
    /// Blank lines and `#` comments are ignored; a key may appear once.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: key `{key}` repeated", n + 1)));
            }
            self.set(key, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text)
    }

    /// Every key, one `key=value` line each, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k}={}\n", self.get(k).expect("listed keys are known")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.search.validate()?;
        if self.dataset == DatasetKind::Cifar10 && self.data_path.is_none() {
            return Err(Error::Config("dataset=cifar10 needs data_path".into()));
        }
        if self.eval_depth == 0 {
            return Err(Error::Config("eval_depth must be at least 1".into()));
        }
        Ok(())
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            samples: self.samples,
            image_size: self.image_size,
            n_classes: self.classes,
            noise: self.noise,
            seed: self.search.seed,
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match self.dataset {
            DatasetKind::Synthetic => make_synthetic(&self.synthetic_spec()),
            DatasetKind::Cifar10 => {
                let dir = self.data_path.as_ref().ok_or_else(|| Error::Config("dataset=cifar10 needs data_path".into()))?;
                let data = load_cifar10_train(dir)?;
                if self.subset > 0 { data.take(self.subset) } else { Ok(data) }
            }
        }
    }
}
