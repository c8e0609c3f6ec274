//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every other line
//! must be `key=value` with a known key. Later settings win, so command
//! line `--set` overrides are applied after the file. Image shape and class
//! count default to the dataset's unless set explicitly.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{self, CifarVariant, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::runtime::{Pinning, PoolConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Synth,
    FashionMnist,
    Cifar10,
    Cifar100,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "synth" => Some(DatasetKind::Synth),
            "fashion-mnist" => Some(DatasetKind::FashionMnist),
            "cifar10" => Some(DatasetKind::Cifar10),
            "cifar100" => Some(DatasetKind::Cifar100),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Synth => "synth",
            DatasetKind::FashionMnist => "fashion-mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Cifar100 => "cifar100",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub kind: DatasetKind,
    pub dir: PathBuf,
    /// Subset sizes; ignored when `full` is set.
    pub train_limit: usize,
    pub test_limit: usize,
    pub full: bool,
    pub standardize: bool,
    pub synth_train: usize,
    pub synth_test: usize,
    pub synth_noise: f64,
    pub synth_seed: u64,
    pub synth_height: usize,
    pub synth_width: usize,
    pub synth_channels: usize,
    pub synth_classes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DatasetKind::Synth,
            dir: PathBuf::from("data"),
            train_limit: 6000,
            test_limit: 1000,
            full: false,
            standardize: false,
            synth_train: 512,
            synth_test: 512,
            synth_noise: 0.3,
            synth_seed: 5,
            synth_height: 8,
            synth_width: 8,
            synth_channels: 1,
            synth_classes: 4,
        }
    }
}

/// A train split, a test split, and a second training shard drawn from the
/// same distribution (used by branch expansion).
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub new_shard: Dataset,
}

impl DataConfig {
    fn shape(&self) -> (usize, usize, usize, usize) {
        match self.kind {
            DatasetKind::Synth => (self.synth_height, self.synth_width, self.synth_channels, self.synth_classes),
            DatasetKind::FashionMnist => (28, 28, 1, 10),
            DatasetKind::Cifar10 => (32, 32, 3, 10),
            DatasetKind::Cifar100 => (32, 32, 3, 100),
        }
    }

    pub fn load(&self) -> Result<Splits> {
        let (train_full, test_full) = match self.kind {
            DatasetKind::Synth => {
                let shape = (self.synth_height, self.synth_width, self.synth_channels);
                let gen = |stream, n, split| {
                    data::synth_clusters_stream(self.synth_seed, stream, self.synth_classes, n, shape, self.synth_noise, split)
                };
                let train = gen(0, self.synth_train, Split::Train)?;
                let test = gen(1, self.synth_test, Split::Test)?;
                let new_shard = gen(2, self.synth_train, Split::Train)?;
                return self.finish(Splits { train, test, new_shard });
            }
            DatasetKind::FashionMnist => (
                data::load_idx(
                    &self.dir.join("train-images-idx3-ubyte"),
                    &self.dir.join("train-labels-idx1-ubyte"),
                    Split::Train,
                )?,
                data::load_idx(
                    &self.dir.join("t10k-images-idx3-ubyte"),
                    &self.dir.join("t10k-labels-idx1-ubyte"),
                    Split::Test,
                )?,
            ),
            DatasetKind::Cifar10 => (
                data::load_cifar_binary(&self.dir, CifarVariant::Cifar10, Split::Train)?,
                data::load_cifar_binary(&self.dir, CifarVariant::Cifar10, Split::Test)?,
            ),
            DatasetKind::Cifar100 => (
                data::load_cifar_binary(&self.dir, CifarVariant::Cifar100, Split::Train)?,
                data::load_cifar_binary(&self.dir, CifarVariant::Cifar100, Split::Test)?,
            ),
        };
        let (train, test, new_shard) = if self.full {
            let half = train_full.len() / 2;
            (train_full.clone(), test_full, train_full.range(half, train_full.len()))
        } else {
            let n = self.train_limit;
            (
                train_full.take(n),
                test_full.take(self.test_limit),
                train_full.range(n, 2 * n),
            )
        };
        self.finish(Splits { train, test, new_shard })
    }

    fn finish(&self, mut s: Splits) -> Result<Splits> {
        if s.train.is_empty() || s.test.is_empty() {
            return Err(Error::Data("dataset split is empty".into()));
        }
        if self.standardize {
            let (mean, std) = s.train.channel_stats();
            s.train.standardize(&mean, &std)?;
            s.test.standardize(&mean, &std)?;
            if !s.new_shard.is_empty() {
                s.new_shard.standardize(&mean, &std)?;
            }
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub metrics_csv: PathBuf,
    pub features_csv: PathBuf,
    pub bench_csv: PathBuf,
    pub checkpoint: PathBuf,
    pub bench_workers: Vec<usize>,
    pub bench_batch: usize,
    pub pinning: Pinning,
    explicit: HashSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            metrics_csv: PathBuf::from("metrics.csv"),
            features_csv: PathBuf::from("features.csv"),
            bench_csv: PathBuf::from("bench.csv"),
            checkpoint: PathBuf::from("paraformer.ckpt"),
            bench_workers: vec![1, 2, 4],
            bench_batch: 64,
            pinning: Pinning::None,
            explicit: HashSet::new(),
        };
        cfg.resolve();
        cfg
    }
}

const SHAPE_KEYS: [&str; 4] = ["image_height", "image_width", "image_channels", "n_classes"];

impl RunConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies a `key=value` override string.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        if !(self.model.set(key, value)? || self.train.set(key, value)?) {
            let d = &mut self.data;
            match key {
                "dataset" => {
                    d.kind = DatasetKind::parse(value)
                        .ok_or_else(|| Error::Config(format!("dataset: unknown {value:?}")))?
                }
                "data_dir" => d.dir = PathBuf::from(value),
                "train_limit" => d.train_limit = num(key, value)?,
                "test_limit" => d.test_limit = num(key, value)?,
                "full_dataset" => d.full = num(key, value)?,
                "standardize" => d.standardize = num(key, value)?,
                "synth_train" => d.synth_train = num(key, value)?,
                "synth_test" => d.synth_test = num(key, value)?,
                "synth_noise" => d.synth_noise = num(key, value)?,
                "synth_seed" => d.synth_seed = num(key, value)?,
                "synth_height" => d.synth_height = num(key, value)?,
                "synth_width" => d.synth_width = num(key, value)?,
                "synth_channels" => d.synth_channels = num(key, value)?,
                "synth_classes" => d.synth_classes = num(key, value)?,
                "metrics_csv" => self.metrics_csv = PathBuf::from(value),
                "features_csv" => self.features_csv = PathBuf::from(value),
                "bench_csv" => self.bench_csv = PathBuf::from(value),
                "checkpoint" => self.checkpoint = PathBuf::from(value),
                "bench_workers" => {
                    self.bench_workers = value
                        .split(',')
                        .map(|s| num(key, s.trim()))
                        .collect::<Result<_>>()?
                }
                "bench_batch" => self.bench_batch = num(key, value)?,
                "pinning" => {
                    self.pinning = Pinning::parse(value)
                        .ok_or_else(|| Error::Config(format!("pinning: unknown {value:?}")))?
                }
                _ => return Err(Error::Config(format!("unknown key {key:?}"))),
            }
        }
        self.explicit.insert(key.to_string());
        self.resolve();
        Ok(())
    }

    /// Fills image shape and class count from the dataset unless set explicitly.
    fn resolve(&mut self) {
        let (h, w, c, k) = self.data.shape();
        let values = [h, w, c, k];
        for (key, v) in SHAPE_KEYS.iter().zip(values) {
            if !self.explicit.contains(*key) {
                let _ = self.model.set(key, &v.to_string());
            }
        }
    }

    pub fn pool_configs(&self) -> Vec<PoolConfig> {
        self.bench_workers
            .iter()
            .map(|&w| PoolConfig {
                workers: w,
                batch_size: self.bench_batch,
                pinning: self.pinning,
            })
            .collect()
    }

    /// Every key this config accepts.
    pub fn known_keys() -> Vec<&'static str> {
        let mut keys: Vec<&'static str> = ModelConfig::KEYS.to_vec();
        keys.extend(TrainConfig::KEYS);
        keys.extend([
            "dataset",
            "data_dir",
            "train_limit",
            "test_limit",
            "full_dataset",
            "standardize",
            "synth_train",
            "synth_test",
            "synth_noise",
            "synth_seed",
            "synth_height",
            "synth_width",
            "synth_channels",
            "synth_classes",
            "metrics_csv",
            "features_csv",
            "bench_csv",
            "checkpoint",
            "bench_workers",
            "bench_batch",
            "pinning",
        ]);
        keys
    }
}
