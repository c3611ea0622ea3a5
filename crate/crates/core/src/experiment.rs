//! Config-driven runs shared by the command-line tool and the acceptance
//! suite: data loading, network construction, training, pruning and
//! regression.

use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::{DatasetChoice, RunConfig};
use crate::data::{load_idx, split, synth_regression, REG_RANGE};
use crate::error::{Error, Result};
use crate::init::init_network;
use crate::layers::NetworkSpec;
use crate::model::Network;
use crate::presets::preset;
use crate::pruning::{apply_masks, l1_masks, snip_masks, sparsity_report, SparsityReport};
use crate::train::{train, History, MetricsWriter, Samples, TrainOptions};

/// Environment variable naming the dataset root.
pub const DATA_DIR_ENV: &str = "MORPHNET_DATA_DIR";

/// `data_dir` from the config, else the environment, else `./data`.
pub fn data_root(cfg: &RunConfig) -> PathBuf {
    cfg.data_dir
        .clone()
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Train/validation split of the training files plus the official test set.
#[derive(Clone, Debug)]
pub struct ClassData {
    pub train: Samples,
    pub val: Samples,
    pub test: Samples,
    pub input_shape: Vec<usize>,
    pub classes: usize,
}

impl ClassData {
    pub fn split(&self, name: &str) -> Result<&Samples> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

pub fn load_classification(cfg: &RunConfig) -> Result<ClassData> {
    let files = cfg
        .dataset
        .idx_files()
        .ok_or_else(|| Error::Config("regression datasets have no class splits".into()))?;
    let dir = data_root(cfg).join(cfg.dataset.dir_name());
    let find = |stem: &str| -> Result<PathBuf> {
        [dir.join(stem), dir.join(format!("{stem}.gz"))]
            .into_iter()
            .find(|p| p.exists())
            .ok_or_else(|| Error::Config(format!("missing data file {}", dir.join(stem).display())))
    };
    let mut full = load_idx(&find(files[0])?, &find(files[1])?)?;
    if let Some(n) = cfg.train_limit {
        let idx: Vec<usize> = (0..n.min(full.len())).collect();
        full = full.subset(&idx)?;
    }
    let test = load_idx(&find(files[2])?, &find(files[3])?)?;
    let (tr, va) = split(&full, cfg.seed)?;
    Ok(ClassData {
        input_shape: full.example_shape().to_vec(),
        classes: full.classes().max(test.classes()),
        train: Samples::classes(&tr)?,
        val: Samples::classes(&va)?,
        test: Samples::classes(&test)?,
    })
}

/// The configured architecture for `input_shape` and `outputs`.
pub fn network_spec(cfg: &RunConfig, input_shape: &[usize], outputs: usize) -> Result<NetworkSpec> {
    let mut spec = match (&cfg.spec_file, &cfg.preset) {
        (Some(path), _) => NetworkSpec::from_json(&std::fs::read_to_string(path)?)?,
        (None, Some(name)) => preset(name, input_shape, outputs)?,
        (None, None) => return Err(Error::Config("set `preset` or `spec`".into())),
    };
    if let Some(rate) = cfg.dropout_rate {
        for l in spec.layers.iter_mut().filter(|l| l.supports_dropout()) {
            l.dropout_rate = rate;
        }
    }
    spec.validate()?;
    Ok(spec)
}

pub fn init_from_config(cfg: &RunConfig, input_shape: &[usize], outputs: usize) -> Result<Network> {
    init_network(&network_spec(cfg, input_shape, outputs)?, &cfg.init, cfg.seed)
}

pub fn train_options(cfg: &RunConfig) -> TrainOptions {
    TrainOptions {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        seed: cfg.seed,
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: Network,
    pub history: History,
    pub test_loss: f64,
    pub test_acc: f64,
}

/// Trains `net` on `data`, writing `metrics.csv` under `out` when given.
pub fn fit(cfg: &RunConfig, mut net: Network, data: &ClassData, out: Option<&Path>) -> Result<TrainOutcome> {
    let mut writer = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(MetricsWriter::create(&dir.join("metrics.csv"))?)
        }
        None => None,
    };
    let history = train(&mut net, &data.train, Some(&data.val), &train_options(cfg), |m, _| {
        if let Some(w) = writer.as_mut() {
            w.row(m)?;
        }
        Ok(())
    })?;
    let (test_loss, acc) = net.evaluate(&data.test.x, data.test.targets())?;
    if let Some(dir) = out {
        checkpoint::save(&net, &dir.join("checkpoint"))?;
    }
    Ok(TrainOutcome {
        net,
        history,
        test_loss,
        test_acc: acc.unwrap_or(f64::NAN),
    })
}

/// Initializes the configured network and trains it.
pub fn run_train(cfg: &RunConfig, data: &ClassData, out: Option<&Path>) -> Result<TrainOutcome> {
    let net = init_from_config(cfg, &data.input_shape, data.classes)?;
    fit(cfg, net, data, out)
}

pub fn accuracy_on(net: &Network, s: &Samples) -> Result<f64> {
    Ok(net.evaluate(&s.x, s.targets())?.1.unwrap_or(f64::NAN))
}

#[derive(Clone, Debug)]
pub struct PruneOutcome {
    pub net: Network,
    pub before_acc: f64,
    pub after_acc: f64,
    /// Test accuracy after training the masked network (SNIP only).
    pub trained_acc: Option<f64>,
    pub report: SparsityReport,
}

/// Magnitude pruning of a trained network, without fine-tuning.
pub fn prune_l1(net: &Network, ratio: f64, test: &Samples) -> Result<PruneOutcome> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("prune ratio must be in [0, 1), got {ratio}")));
    }
    let before_acc = accuracy_on(net, test)?;
    let mut pruned = net.clone();
    let masks = l1_masks(&pruned.params, ratio)?;
    apply_masks(&mut pruned.params, &masks)?;
    Ok(PruneOutcome {
        before_acc,
        after_acc: accuracy_on(&pruned, test)?,
        trained_acc: None,
        report: sparsity_report(&pruned.params),
        net: pruned,
    })
}

/// SNIP at initialization on the first `cfg.snip_batch` training examples,
/// keeping `keep` weights, followed by training the masked network.
pub fn prune_snip(cfg: &RunConfig, init: &Network, data: &ClassData, keep: usize) -> Result<PruneOutcome> {
    let before_acc = accuracy_on(init, &data.test)?;
    let batch = data.train.head(cfg.snip_batch)?;
    let masks = snip_masks(init, &batch.x, batch.targets(), keep)?;
    let mut net = init.clone();
    apply_masks(&mut net.params, &masks)?;
    let after_acc = accuracy_on(&net, &data.test)?;
    let trained = fit(cfg, net, data, None)?;
    Ok(PruneOutcome {
        before_acc,
        after_acc,
        trained_acc: Some(trained.test_acc),
        report: sparsity_report(&trained.net.params),
        net: trained.net,
    })
}

#[derive(Clone, Debug)]
pub struct RegressOutcome {
    pub net: Network,
    pub history: History,
    pub test_mse: f64,
    /// Variance of the label noise: the best achievable expected MSE.
    pub noise_floor: f64,
}

/// Fits the configured network to a synthetic 1-D target.
pub fn run_regression(cfg: &RunConfig, out: Option<&Path>) -> Result<RegressOutcome> {
    let DatasetChoice::Synth(target) = cfg.dataset else {
        return Err(Error::Config("regression needs a `synth:` dataset".into()));
    };
    let (xtr, ytr) = synth_regression(target, cfg.reg_train, cfg.reg_noise, REG_RANGE, cfg.seed)?;
    let (xte, yte) = synth_regression(target, cfg.reg_test, cfg.reg_noise, REG_RANGE, cfg.seed ^ 0x7e57)?;
    let train_set = Samples::values(xtr, ytr)?;
    let test_set = Samples::values(xte, yte)?;
    let mut net = init_from_config(cfg, &[1], 1)?;
    let mut writer = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(MetricsWriter::create(&dir.join("metrics.csv"))?)
        }
        None => None,
    };
    let history = train(&mut net, &train_set, Some(&test_set), &train_options(cfg), |m, _| {
        if let Some(w) = writer.as_mut() {
            w.row(m)?;
        }
        Ok(())
    })?;
    let (test_mse, _) = net.evaluate(&test_set.x, test_set.targets())?;
    if let Some(dir) = out {
        checkpoint::save(&net, &dir.join("checkpoint"))?;
    }
    Ok(RegressOutcome {
        net,
        history,
        test_mse,
        noise_floor: cfg.reg_noise * cfg.reg_noise,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{write_idx, Dataset};
    use crate::tensor::Tensor;

    fn fake_mnist(dir: &Path, n: usize) {
        let d = dir.join("mnist");
        std::fs::create_dir_all(&d).unwrap();
        let px: Vec<f64> = (0..n * 16).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
        let ds = Dataset::new(
            Tensor::new(vec![n, 1, 4, 4], px).unwrap(),
            (0..n).map(|i| i % 3).collect(),
            "fake",
        )
        .unwrap();
        write_idx(&ds, &d.join("train-images-idx3-ubyte"), &d.join("train-labels-idx1-ubyte")).unwrap();
        write_idx(&ds, &d.join("t10k-images-idx3-ubyte"), &d.join("t10k-labels-idx1-ubyte")).unwrap();
    }

    fn cfg(dir: &Path, extra: &str) -> RunConfig {
        let mut c = RunConfig::parse(&format!("dataset = mnist\npreset = mpm\nepochs = 2\nbatch_size = 8\n{extra}")).unwrap();
        c.data_dir = Some(dir.to_path_buf());
        c
    }

    #[test]
    fn loads_and_splits() {
        let dir = tempfile::tempdir().unwrap();
        fake_mnist(dir.path(), 50);
        let d = load_classification(&cfg(dir.path(), "")).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (40, 10, 50));
        assert_eq!(d.input_shape, vec![1, 4, 4]);
        assert_eq!(d.classes, 3);
        let limited = load_classification(&cfg(dir.path(), "train_limit = 20\n")).unwrap();
        assert_eq!(limited.train.len() + limited.val.len(), 20);
    }

    #[test]
    fn missing_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_classification(&cfg(dir.path(), "")), Err(Error::Config(_))));
    }

    #[test]
    fn train_writes_metrics_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        fake_mnist(dir.path(), 40);
        let c = cfg(dir.path(), "");
        let d = load_classification(&c).unwrap();
        let out = dir.path().join("run");
        let o = run_train(&c, &d, Some(&out)).unwrap();
        let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        let back = checkpoint::load(&out.join("checkpoint")).unwrap();
        assert_eq!(accuracy_on(&back, &d.test).unwrap(), o.test_acc);
    }

    #[test]
    fn zero_ratio_prune_keeps_accuracy() {
        let dir = tempfile::tempdir().unwrap();
        fake_mnist(dir.path(), 40);
        let c = cfg(dir.path(), "");
        let d = load_classification(&c).unwrap();
        let net = init_from_config(&c, &d.input_shape, d.classes).unwrap();
        let p = prune_l1(&net, 0.0, &d.test).unwrap();
        assert_eq!(p.before_acc, p.after_acc);
        assert!(prune_l1(&net, 1.0, &d.test).is_err());
    }

    #[test]
    fn dropout_override_reaches_droppable_layers() {
        let c = RunConfig::parse("dataset = mnist\npreset = hybrid-mlp\ndropout_rate = 0.2\n").unwrap();
        let s = network_spec(&c, &[784], 10).unwrap();
        assert!(s.layers.iter().all(|l| l.dropout_rate == if l.supports_dropout() { 0.2 } else { 0.0 }));
    }

    #[test]
    fn regression_needs_synthetic_data() {
        let c = RunConfig::parse("dataset = mnist\npreset = reg-mpm\n").unwrap();
        assert!(run_regression(&c, None).is_err());
        let c = RunConfig::parse("dataset = synth:lin20\npreset = reg-mpm\nepochs = 1\nreg_train = 32\nreg_test = 16\n").unwrap();
        let o = run_regression(&c, None).unwrap();
        assert!(o.test_mse.is_finite());
        assert_eq!(o.noise_floor, 0.25);
    }
}
