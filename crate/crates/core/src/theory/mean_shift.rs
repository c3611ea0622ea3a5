//! Online training of a single unit whose optimal weights are all 10,
//! starting from zero weights: a linear unit fitting `10 * sum x` and a
//! max-plus unit fitting `max_i (x_i + 10)`.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::param::{ParamRole, ParamSet, Parameter};
use crate::tensor::Tensor;
use crate::tropical::TropicalMode;

/// Target offset of every weight.
pub const SHIFT: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftModel {
    Linear,
    MaxPlus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftConfig {
    pub model: ShiftModel,
    pub dim: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl ShiftConfig {
    pub fn new(model: ShiftModel, batch_size: usize) -> Self {
        Self {
            model,
            dim: 10,
            batch_size,
            epochs: 1000,
            lr: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub weights: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
}

impl EpochStats {
    fn of(epoch: usize, w: &[f64]) -> Self {
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = if w.len() > 1 {
            (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            epoch,
            weights: w.to_vec(),
            mean,
            std,
        }
    }
}

fn target(model: ShiftModel, x: &[f64]) -> f64 {
    match model {
        ShiftModel::Linear => SHIFT * x.iter().sum::<f64>(),
        ShiftModel::MaxPlus => x.iter().map(|v| v + SHIFT).fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Runs one Adam step per epoch on a fresh standard-normal batch. The
/// history starts with the initial weights as epoch 0.
pub fn mean_shift_run(cfg: &ShiftConfig) -> Result<Vec<EpochStats>> {
    if cfg.dim == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("mean shift needs a positive dimension and batch size".into()));
    }
    let d = cfg.dim;
    let role = match cfg.model {
        ShiftModel::Linear => ParamRole::LinearWeight,
        ShiftModel::MaxPlus => ParamRole::MaxPathWeight,
    };
    let mut params = ParamSet::new();
    params.insert(Parameter::new("w", Tensor::zeros(vec![1, d]), role, true))?;
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = vec![EpochStats::of(0, params.get("w")?.value.data())];
    for epoch in 1..=cfg.epochs {
        let xs: Vec<f64> = (0..cfg.batch_size * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let ys: Vec<f64> = xs.chunks(d).map(|x| target(cfg.model, x)).collect();
        let grads = {
            let mut tape = Tape::new(&params);
            let x = tape.input(Tensor::new(vec![cfg.batch_size, d], xs)?);
            let w = tape.param("w")?;
            let pred = match cfg.model {
                ShiftModel::Linear => tape.linear(x, w, None)?,
                ShiftModel::MaxPlus => tape.tropical(x, w, None, TropicalMode::MaxPlus, None)?,
            };
            let loss = tape.mse(pred, &Tensor::new(vec![cfg.batch_size, 1], ys)?)?;
            tape.backward(loss, &Tensor::scalar(1.0))?
        };
        params.zero_grads();
        params.accumulate(&grads)?;
        adam_step(&mut params, &mut adam)?;
        history.push(EpochStats::of(epoch, params.get("w")?.value.data()));
    }
    Ok(history)
}

/// `epoch,w1..wd,mean,std` rows.
pub fn history_csv(history: &[EpochStats]) -> String {
    let d = history.first().map_or(0, |h| h.weights.len());
    let mut s = String::from("epoch");
    for i in 1..=d {
        let _ = write!(s, ",w{i}");
    }
    s.push_str(",mean,std\n");
    for h in history {
        let _ = write!(s, "{}", h.epoch);
        for w in &h.weights {
            let _ = write!(s, ",{w}");
        }
        let _ = writeln!(s, ",{},{}", h.mean, h.std);
    }
    s
}
