//! Mini-batch training with Adam and per-epoch metrics.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Batcher, Dataset};
use crate::error::{Error, Result};
use crate::model::{forward, slice_rows, Network, Targets};
use crate::optim::{adam_step, correct_count, AdamConfig, AdamState};
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "epoch,train_acc,val_acc,train_loss,val_loss";

/// Supervision for a whole sample set.
#[derive(Clone, Debug)]
pub enum Labels {
    Classes(Vec<usize>),
    /// `[N x out]`
    Values(Tensor),
}

/// Flattened inputs `[N x D]` with their labels.
#[derive(Clone, Debug)]
pub struct Samples {
    pub x: Tensor,
    pub y: Labels,
}

impl Samples {
    pub fn classes(ds: &Dataset) -> Result<Self> {
        Ok(Self {
            x: ds.flat()?,
            y: Labels::Classes(ds.labels.clone()),
        })
    }

    pub fn values(x: Tensor, y: Tensor) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(Error::Dimension(format!("{} inputs but {} targets", x.rows(), y.rows())));
        }
        Ok(Self { x, y: Labels::Values(y) })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn targets(&self) -> Targets<'_> {
        match &self.y {
            Labels::Classes(l) => Targets::Classes(l),
            Labels::Values(t) => Targets::Values(t),
        }
    }

    /// Rows at `idx`.
    pub fn gather(&self, idx: &[usize]) -> Result<Samples> {
        let d = self.x.cols();
        let mut x = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            x.extend_from_slice(&self.x.data()[i * d..(i + 1) * d]);
        }
        let y = match &self.y {
            Labels::Classes(l) => Labels::Classes(idx.iter().map(|&i| l[i]).collect()),
            Labels::Values(t) => {
                let c = t.cols();
                let mut v = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    v.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
                }
                Labels::Values(Tensor::new(vec![idx.len(), c], v)?)
            }
        };
        Ok(Samples {
            x: Tensor::new(vec![idx.len(), d], x)?,
            y,
        })
    }

    /// The first `n` rows.
    pub fn head(&self, n: usize) -> Result<Samples> {
        let n = n.min(self.len());
        let y = match &self.y {
            Labels::Classes(l) => Labels::Classes(l[..n].to_vec()),
            Labels::Values(t) => Labels::Values(slice_rows(t, 0, n)?),
        };
        Ok(Samples {
            x: slice_rows(&self.x, 0, n)?,
            y,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Seeds batching and dropout.
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Metrics of one epoch. Train figures are running averages over the
/// epoch's batches (with dropout active); validation figures come from a
/// deterministic pass after the epoch. Accuracies are `NaN` for regression.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_acc: f64,
    pub val_acc: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.train_acc, self.val_acc, self.train_loss, self.val_loss
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct History {
    pub epochs: Vec<EpochMetrics>,
}

impl History {
    pub fn peak_train_acc(&self) -> f64 {
        self.epochs.iter().map(|e| e.train_acc).fold(f64::NAN, f64::max)
    }

    pub fn peak_val_acc(&self) -> f64 {
        self.epochs.iter().map(|e| e.val_acc).fold(f64::NAN, f64::max)
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }
}

/// Writes `metrics.csv` rows as epochs finish.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{METRICS_HEADER}")?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn row(&mut self, m: &EpochMetrics) -> Result<()> {
        writeln!(self.out, "{}", m.csv_row())?;
        self.out.flush()?;
        Ok(())
    }
}

/// One Adam step on a batch; returns the batch loss and, for class
/// targets, the number of correct predictions.
pub fn train_step(
    net: &mut Network,
    state: &mut AdamState,
    x: &Tensor,
    targets: Targets<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let (loss, correct, grads) = {
        let (mut tape, out) = forward(&net.spec, &net.params, x, true, rng)?;
        let correct = match targets {
            Targets::Classes(l) => correct_count(tape.value(out), l),
            Targets::Values(_) => 0,
        };
        let l = match targets {
            Targets::Classes(lab) => tape.cross_entropy(out, lab)?,
            Targets::Values(t) => tape.mse(out, t)?,
        };
        let loss = tape.value(l).data()[0];
        (loss, correct, tape.backward(l, &Tensor::scalar(1.0))?)
    };
    net.params.zero_grads();
    net.params.accumulate(&grads)?;
    adam_step(&mut net.params, state).map_err(|e| match e {
        Error::Divergence { id } => Error::Divergence {
            id: format!("{id} at step {}", state.step + 1),
        },
        other => other,
    })?;
    Ok((loss, correct))
}

/// Trains `net` in place, calling `on_epoch` after every epoch.
pub fn train(
    net: &mut Network,
    train_set: &Samples,
    val_set: Option<&Samples>,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochMetrics, &Network) -> Result<()>,
) -> Result<History> {
    let mut state = AdamState::new(AdamConfig {
        lr: opts.lr,
        ..AdamConfig::default()
    });
    let batcher = Batcher::new(train_set.len(), opts.batch_size, opts.seed)?;
    let mut drop_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_d209);
    let is_class = matches!(train_set.y, Labels::Classes(_));
    let mut history = History::default();
    for epoch in 1..=opts.epochs {
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for idx in batcher.epoch(epoch as u64) {
            let b = train_set.gather(&idx)?;
            let (l, c) = train_step(net, &mut state, &b.x, b.targets(), &mut drop_rng)?;
            loss_sum += l * idx.len() as f64;
            correct += c;
            seen += idx.len();
        }
        let (val_loss, val_acc) = match val_set {
            Some(v) => {
                let (l, a) = net.evaluate(&v.x, v.targets())?;
                (l, a.unwrap_or(f64::NAN))
            }
            None => (f64::NAN, f64::NAN),
        };
        let m = EpochMetrics {
            epoch,
            train_acc: if is_class { correct as f64 / seen as f64 } else { f64::NAN },
            val_acc,
            train_loss: loss_sum / seen as f64,
            val_loss,
        };
        on_epoch(&m, net)?;
        history.epochs.push(m);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{init_network, InitScheme};
    use crate::layers::{LayerSpec, NetworkSpec};

    fn toy() -> Samples {
        // Two linearly separable blobs.
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..40 {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            let t = i as f64 / 40.0;
            x.extend_from_slice(&[s * (1.0 + t), s * (0.5 - t) + 0.1]);
            y.push(usize::from(s > 0.0));
        }
        Samples {
            x: Tensor::new(vec![40, 2], x).unwrap(),
            y: Labels::Classes(y),
        }
    }

    #[test]
    fn loss_decreases_on_separable_toy() {
        let spec = NetworkSpec::new(vec![2], vec![LayerSpec::linear(2, 2).output()]);
        let mut net = init_network(&spec, &InitScheme::default(), 0).unwrap();
        let s = toy();
        let mut state = AdamState::new(AdamConfig { lr: 0.05, ..AdamConfig::default() });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let first = train_step(&mut net, &mut state, &s.x, s.targets(), &mut rng).unwrap().0;
        let mut last = first;
        for _ in 0..49 {
            last = train_step(&mut net, &mut state, &s.x, s.targets(), &mut rng).unwrap().0;
        }
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn training_is_deterministic_and_masks_persist() {
        let spec = crate::presets::preset("mpm", &[2], 2).unwrap();
        let s = toy();
        let run = || {
            let mut net = init_network(&spec, &InitScheme::default(), 3).unwrap();
            let m = crate::pruning::l1_masks(&net.params, 0.5).unwrap();
            crate::pruning::apply_masks(&mut net.params, &m).unwrap();
            let opts = TrainOptions {
                epochs: 10,
                batch_size: 8,
                ..TrainOptions::default()
            };
            let h = train(&mut net, &s, Some(&s), &opts, |_, _| Ok(())).unwrap();
            (net, h)
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(ha.epochs, hb.epochs);
        for (p, q) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(p.value, q.value);
            if let Some(m) = &p.mask {
                for (k, &keep) in m.iter().enumerate() {
                    if !keep {
                        assert_eq!(p.grad.data()[k], 0.0);
                    }
                }
            }
        }
        // Masked shared weights keep their value: they are excluded, not moved.
        let init = init_network(&spec, &InitScheme::default(), 3).unwrap();
        let w = a.params.get("0.W").unwrap();
        let w_init = init.params.get("0.W").unwrap();
        for (k, &keep) in w.mask.as_ref().unwrap().iter().enumerate() {
            if !keep {
                assert_eq!(w.value.data()[k], w_init.value.data()[k]);
            }
        }
    }

    #[test]
    fn zero_epochs_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        drop(MetricsWriter::create(&p).unwrap());
        assert_eq!(std::fs::read_to_string(&p).unwrap(), format!("{METRICS_HEADER}\n"));
    }
}
