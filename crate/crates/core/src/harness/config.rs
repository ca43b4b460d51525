//! Run configuration and the `key = value` config-file format.
//!
//! ```text
//! # comments start with '#'
//! model = resnet-tiny          # preset name
//! blocks = 1,1,1,1             # optional custom stage layout
//! block = basic                # optional, basic | bottleneck
//! width = 16                   # optional base width
//! norm = batchnorm             # batchnorm | affine | batchnorm-minus | none
//! opt = adam                   # adam | sgd
//! lr = 0.001
//! batch = 20
//! epochs = 15
//! seed = 0
//! data = cifar10:/path/to/cifar-10-batches-bin   # or: synthetic
//! train_limit = 2000           # optional CIFAR subset sizes
//! val_limit = 1000
//! synthetic_train = 1000       # synthetic dataset shape
//! synthetic_val = 500
//! classes = 10
//! image_size = 32
//! epsilon = 1e-5
//! momentum = 0.1
//! instrument = false
//! ics = false
//! bins = 50
//! eval_batch = 100
//! ```
//!
//! Grid files use the same keys; `model`, `norm`, `opt`, `lr` and `batch`
//! accept comma-separated lists, and `repeats` sets the repeat count.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::norm::{NormScheme, DEFAULT_EPSILON, DEFAULT_MOMENTUM};
use crate::optim::OptimizerKind;
use crate::resnet::{BlockKind, ModelConfig};

pub const STANDARD_LRS: [f64; 3] = [0.01, 0.005, 0.001];
pub const STANDARD_OPTIMIZERS: [OptimizerKind; 2] = [OptimizerKind::Adam, OptimizerKind::Sgd];
pub const STANDARD_BATCH_SIZES: [usize; 9] = [20, 30, 40, 50, 60, 70, 80, 90, 100];
pub const STANDARD_EPOCHS: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Cifar10 {
        dir: PathBuf,
        train_limit: Option<usize>,
        validation_limit: Option<usize>,
    },
    Synthetic {
        train: usize,
        validation: usize,
        classes: usize,
        image_size: usize,
    },
}

impl DataSource {
    /// Loads `(train, validation)`. Synthetic splits are generated from
    /// fixed seeds so every run sees the same data.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Cifar10 { dir, train_limit, validation_limit } => {
                let (train, val) = data::load_cifar10(dir)?;
                let train = train_limit.map_or(train.clone(), |n| train.take(n));
                let val = validation_limit.map_or(val.clone(), |n| val.take(n));
                Ok((train, val))
            }
            DataSource::Synthetic { train, validation, classes, image_size } => Ok((
                data::make_synthetic(*train, *classes, *image_size, Split::Train, 0x5EED_0001)?,
                data::make_synthetic(*validation, *classes, *image_size, Split::Validation, 0x5EED_0002)?,
            )),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DataSource::Cifar10 { .. } => data::CIFAR_CLASSES,
            DataSource::Synthetic { classes, .. } => *classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: String,
    pub stage_blocks: Option<Vec<usize>>,
    pub block_kind: Option<BlockKind>,
    pub base_width: Option<usize>,
    pub norm: NormScheme,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub data: DataSource,
    pub epsilon: f64,
    pub momentum: f64,
    pub instrument: bool,
    pub ics: bool,
    pub bins: usize,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: "resnet-tiny".into(),
            stage_blocks: None,
            block_kind: None,
            base_width: None,
            norm: NormScheme::BatchNorm,
            optimizer: OptimizerKind::Adam,
            lr: 0.001,
            batch_size: 20,
            epochs: STANDARD_EPOCHS,
            seed: 0,
            data: DataSource::Synthetic { train: 1000, validation: 500, classes: 10, image_size: 32 },
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
            instrument: false,
            ics: false,
            bins: crate::instrument::DEFAULT_BINS,
            eval_batch_size: 100,
        }
    }
}

impl TrainConfig {
    /// The architecture this config trains.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::preset(&self.model, self.norm, self.data.num_classes())?;
        if let Some(blocks) = &self.stage_blocks {
            m.stage_blocks = blocks.clone();
        }
        if let Some(kind) = self.block_kind {
            m.block_kind = kind;
        }
        if let Some(width) = self.base_width {
            m.base_width = width;
        }
        m.epsilon = self.epsilon;
        m.momentum = self.momentum;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.bins == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch, epochs, bins and eval_batch must be positive".into()));
        }
        if self.norm.renormalizes() && self.batch_size < 2 {
            return Err(Error::Config(format!("{} needs a batch size of at least 2", self.norm)));
        }
        Ok(())
    }

    /// Human-readable notes for every setting outside the standard grid.
    pub fn off_grid(&self) -> Vec<String> {
        let mut notes = Vec::new();
        if !STANDARD_LRS.contains(&self.lr) {
            notes.push(format!("lr {} outside {:?}", self.lr, STANDARD_LRS));
        }
        if !STANDARD_BATCH_SIZES.contains(&self.batch_size) {
            notes.push(format!("batch size {} outside 20..=100 step 10", self.batch_size));
        }
        if self.epochs != STANDARD_EPOCHS {
            notes.push(format!("{} epochs instead of {STANDARD_EPOCHS}", self.epochs));
        }
        notes
    }

    /// Stable identifier used as the run's output directory name.
    pub fn run_id(&self) -> String {
        format!(
            "{}-{}-{}-lr{}-m{}-e{}-s{}",
            self.model, self.norm, self.optimizer, self.lr, self.batch_size, self.epochs, self.seed
        )
    }

    /// Applies every key of a parsed config file.
    pub fn apply(&mut self, entries: &BTreeMap<String, String>) -> Result<()> {
        let mut synthetic = match &self.data {
            DataSource::Synthetic { train, validation, classes, image_size } => (*train, *validation, *classes, *image_size),
            DataSource::Cifar10 { .. } => (1000, 500, 10, 32),
        };
        let mut cifar_dir: Option<PathBuf> = match &self.data {
            DataSource::Cifar10 { dir, .. } => Some(dir.clone()),
            _ => None,
        };
        let (mut train_limit, mut val_limit) = match &self.data {
            DataSource::Cifar10 { train_limit, validation_limit, .. } => (*train_limit, *validation_limit),
            _ => (None, None),
        };
        for (key, value) in entries {
            match key.as_str() {
                "model" => self.model = value.clone(),
                "blocks" => self.stage_blocks = Some(parse_list(key, value)?),
                "block" => self.block_kind = Some(value.parse()?),
                "width" => self.base_width = Some(parse(key, value)?),
                "norm" => self.norm = value.parse()?,
                "opt" | "optimizer" => self.optimizer = value.parse()?,
                "lr" => self.lr = parse(key, value)?,
                "batch" => self.batch_size = parse(key, value)?,
                "epochs" => self.epochs = parse(key, value)?,
                "seed" => self.seed = parse(key, value)?,
                "data" => {
                    if value == "synthetic" {
                        cifar_dir = None;
                    } else if let Some(dir) = value.strip_prefix("cifar10:") {
                        cifar_dir = Some(PathBuf::from(dir));
                    } else {
                        return Err(Error::Config(format!("data must be 'synthetic' or 'cifar10:<dir>', got '{value}'")));
                    }
                }
                "train_limit" => train_limit = Some(parse(key, value)?),
                "val_limit" => val_limit = Some(parse(key, value)?),
                "synthetic_train" => synthetic.0 = parse(key, value)?,
                "synthetic_val" => synthetic.1 = parse(key, value)?,
                "classes" => synthetic.2 = parse(key, value)?,
                "image_size" => synthetic.3 = parse(key, value)?,
                "epsilon" => self.epsilon = parse(key, value)?,
                "momentum" => self.momentum = parse(key, value)?,
                "instrument" => self.instrument = parse(key, value)?,
                "ics" => self.ics = parse(key, value)?,
                "bins" => self.bins = parse(key, value)?,
                "eval_batch" => self.eval_batch_size = parse(key, value)?,
                other => return Err(Error::Config(format!("unknown config key '{other}'"))),
            }
        }
        self.data = match cifar_dir {
            Some(dir) => DataSource::Cifar10 { dir, train_limit, validation_limit: val_limit },
            None => DataSource::Synthetic {
                train: synthetic.0,
                validation: synthetic.1,
                classes: synthetic.2,
                image_size: synthetic.3,
            },
        };
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut config = TrainConfig::default();
        config.apply(&read_entries(path)?)?;
        config.validate()?;
        Ok(config)
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_entries(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key = value", lineno + 1)))?;
        let key = key.trim().to_string();
        if out.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::Format(format!("line {}: duplicate key '{key}'", lineno + 1)));
        }
    }
    Ok(out)
}

pub fn read_entries(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_entries(&text).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Cartesian hyperparameter space around a base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpace {
    pub base: TrainConfig,
    pub models: Vec<String>,
    pub norms: Vec<NormScheme>,
    pub optimizers: Vec<OptimizerKind>,
    pub lrs: Vec<f64>,
    pub batch_sizes: Vec<usize>,
}

/// One point of a [`GridSpace`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub model: String,
    pub norm: NormScheme,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
}

impl GridCell {
    pub fn key(&self) -> String {
        format!("{}-{}-{}-lr{}-m{}", self.model, self.norm, self.optimizer, self.lr, self.batch_size)
    }
}

impl GridSpace {
    /// The single-axis space holding only `base`'s own values.
    pub fn single(base: TrainConfig) -> Self {
        GridSpace {
            models: vec![base.model.clone()],
            norms: vec![base.norm],
            optimizers: vec![base.optimizer],
            lrs: vec![base.lr],
            batch_sizes: vec![base.batch_size],
            base,
        }
    }

    /// Learning rate × optimizer × batch size over the standard value lists.
    pub fn standard(base: TrainConfig) -> Self {
        GridSpace {
            optimizers: STANDARD_OPTIMIZERS.to_vec(),
            lrs: STANDARD_LRS.to_vec(),
            batch_sizes: STANDARD_BATCH_SIZES.to_vec(),
            ..GridSpace::single(base)
        }
    }

    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::new();
        for model in &self.models {
            for &norm in &self.norms {
                for &optimizer in &self.optimizers {
                    for &lr in &self.lrs {
                        for &batch_size in &self.batch_sizes {
                            out.push(GridCell { model: model.clone(), norm, optimizer, lr, batch_size });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn config_for(&self, cell: &GridCell, repeat: usize) -> TrainConfig {
        TrainConfig {
            model: cell.model.clone(),
            norm: cell.norm,
            optimizer: cell.optimizer,
            lr: cell.lr,
            batch_size: cell.batch_size,
            seed: self.base.seed + repeat as u64,
            ..self.base.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells().is_empty() {
            return Err(Error::Config("grid space is empty".into()));
        }
        for cell in self.cells() {
            self.config_for(&cell, 0).validate()?;
        }
        Ok(())
    }

    /// Parses a grid file; also returns its `repeats` value, if any.
    pub fn from_entries(mut entries: BTreeMap<String, String>) -> Result<(Self, Option<usize>)> {
        let repeats = entries.remove("repeats").map(|v| parse("repeats", &v)).transpose()?;
        let take = |entries: &mut BTreeMap<String, String>, keys: &[&str]| {
            keys.iter().find_map(|k| entries.remove(*k))
        };
        let models = take(&mut entries, &["model"]);
        let norms = take(&mut entries, &["norm"]);
        let opts = take(&mut entries, &["opt", "optimizer"]);
        let lrs = take(&mut entries, &["lr"]);
        let batches = take(&mut entries, &["batch"]);
        let mut base = TrainConfig::default();
        base.apply(&entries)?;
        let mut space = GridSpace::single(base);
        if let Some(v) = models {
            space.models = v.split(',').map(|s| s.trim().to_string()).collect();
        }
        if let Some(v) = norms {
            space.norms = v.split(',').map(|s| s.trim().parse()).collect::<Result<_>>()?;
        }
        if let Some(v) = opts {
            space.optimizers = v.split(',').map(|s| s.trim().parse()).collect::<Result<_>>()?;
        }
        if let Some(v) = lrs {
            space.lrs = parse_list("lr", &v)?;
        }
        if let Some(v) = batches {
            space.batch_sizes = parse_list("batch", &v)?;
        }
        space.base.model = space.models[0].clone();
        space.base.norm = space.norms[0];
        space.validate()?;
        Ok((space, repeats))
    }
}
