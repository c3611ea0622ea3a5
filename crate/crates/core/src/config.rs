//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::RegressionTarget;
use crate::error::{Error, Result};
use crate::init::InitScheme;

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetChoice {
    Mnist,
    FashionMnist,
    Synth(RegressionTarget),
}

impl DatasetChoice {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(Self::Mnist),
            "fashion-mnist" => Ok(Self::FashionMnist),
            _ => match s.strip_prefix("synth:") {
                Some(f) => Ok(Self::Synth(RegressionTarget::parse(f)?)),
                None => Err(Error::Config(format!("unknown dataset `{s}`"))),
            },
        }
    }

    /// IDX file stems `(train images, train labels, test images, test labels)`.
    pub fn idx_files(&self) -> Option<[&'static str; 4]> {
        match self {
            Self::Mnist | Self::FashionMnist => Some([
                "train-images-idx3-ubyte",
                "train-labels-idx1-ubyte",
                "t10k-images-idx3-ubyte",
                "t10k-labels-idx1-ubyte",
            ]),
            Self::Synth(_) => None,
        }
    }

    /// Subdirectory of the data root holding the IDX files.
    pub fn dir_name(&self) -> &'static str {
        match self {
            Self::Mnist => "mnist",
            Self::FashionMnist => "fashion-mnist",
            Self::Synth(_) => "",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetChoice,
    pub preset: Option<String>,
    pub spec_file: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Overrides the dropout rate of every layer that supports it.
    pub dropout_rate: Option<f64>,
    pub init: InitScheme,
    pub out: PathBuf,
    pub data_dir: Option<PathBuf>,
    /// Use only the first `n` training-file examples (before splitting).
    pub train_limit: Option<usize>,
    /// Checkpoint for eval and prune.
    pub checkpoint: Option<PathBuf>,
    pub prune_method: Option<String>,
    pub prune_ratio: f64,
    pub prune_keep: usize,
    pub snip_batch: usize,
    /// Regression sample counts and noise.
    pub reg_train: usize,
    pub reg_test: usize,
    pub reg_noise: f64,
    /// Evaluation split for `eval`: train, val or test.
    pub split: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetChoice::Mnist,
            preset: None,
            spec_file: None,
            epochs: 50,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
            dropout_rate: None,
            init: InitScheme::mnist(),
            out: PathBuf::from("runs/default"),
            data_dir: None,
            train_limit: None,
            checkpoint: None,
            prune_method: None,
            prune_ratio: 0.9,
            prune_keep: 1173,
            snip_batch: 128,
            reg_train: 1000,
            reg_test: 1000,
            reg_noise: crate::data::REG_NOISE,
            split: "test".into(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{v}`"))),
    }
}

/// Splits `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let k = k.trim().to_string();
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
    }
    Ok(out)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut dataset_set = false;
        let mut zero_first: Option<bool> = None;
        for (k, v) in parse_pairs(text)? {
            match k.as_str() {
                "dataset" => {
                    c.dataset = DatasetChoice::parse(&v)?;
                    dataset_set = true;
                }
                "preset" | "network" => c.preset = Some(v),
                "spec" => c.spec_file = Some(PathBuf::from(v)),
                "epochs" => c.epochs = num(&k, &v)?,
                "batch_size" => c.batch_size = num(&k, &v)?,
                "lr" => c.lr = num(&k, &v)?,
                "seed" => c.seed = num(&k, &v)?,
                "dropout_rate" => c.dropout_rate = Some(num(&k, &v)?),
                "out" => c.out = PathBuf::from(v),
                "data_dir" => c.data_dir = Some(PathBuf::from(v)),
                "train_limit" => c.train_limit = Some(num(&k, &v)?),
                "checkpoint" => c.checkpoint = Some(PathBuf::from(v)),
                "prune_method" => c.prune_method = Some(v),
                "prune_ratio" => c.prune_ratio = num(&k, &v)?,
                "prune_keep" => c.prune_keep = num(&k, &v)?,
                "snip_batch" => c.snip_batch = num(&k, &v)?,
                "reg_train" => c.reg_train = num(&k, &v)?,
                "reg_test" => c.reg_test = num(&k, &v)?,
                "reg_noise" => c.reg_noise = num(&k, &v)?,
                "split" => c.split = v,
                "init.mp_mean" => c.init.mp_mean = num(&k, &v)?,
                "init.mp_std" => c.init.mp_std = num(&k, &v)?,
                "init.morph_std" => c.init.morph_std = num(&k, &v)?,
                "init.alpha_std" => c.init.alpha_std = num(&k, &v)?,
                "init.conv_act_std" => c.init.conv_act_std = num(&k, &v)?,
                "init.lambda_lo" => c.init.lambda_lo = num(&k, &v)?,
                "init.lambda_hi" => c.init.lambda_hi = num(&k, &v)?,
                "init.zero_first_layer" => zero_first = Some(flag(&k, &v)?),
                other => return Err(Error::Config(format!("unknown key `{other}`"))),
            }
        }
        if !dataset_set {
            return Err(Error::Config("missing `dataset`".into()));
        }
        // Zeroing the first layer is the MNIST-family default only.
        c.init.zero_first_layer = zero_first.unwrap_or(!matches!(c.dataset, DatasetChoice::Synth(_)));
        if c.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(c.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", c.lr)));
        }
        if c.preset.is_none() && c.spec_file.is_none() && !matches!(c.dataset, DatasetChoice::Synth(_)) {
            return Err(Error::Config("set `preset` or `spec`".into()));
        }
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_defaults() {
        let c = RunConfig::parse("# comment\ndataset = mnist\npreset = mpm  # inline\nepochs = 10\n").unwrap();
        assert_eq!(c.preset.as_deref(), Some("mpm"));
        assert_eq!(c.epochs, 10);
        assert_eq!(c.batch_size, 64);
        assert!(c.init.zero_first_layer);
        let r = RunConfig::parse("dataset = synth:sin6\n").unwrap();
        assert_eq!(r.dataset, DatasetChoice::Synth(RegressionTarget::Sin6));
        assert!(!r.init.zero_first_layer);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("preset = mpm\n").is_err());
        assert!(RunConfig::parse("dataset = mnist\npreset = mpm\nbogus = 1\n").is_err());
        assert!(RunConfig::parse("dataset = mnist\npreset = mpm\nepochs = x\n").is_err());
        assert!(RunConfig::parse("dataset = mnist\npreset = mpm\nepochs = 1\nepochs = 2\n").is_err());
        assert!(RunConfig::parse("dataset = cifar\npreset = mpm\n").is_err());
        assert!(RunConfig::parse("dataset = mnist\npreset mpm\n").is_err());
    }
}
