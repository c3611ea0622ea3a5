//! Gradient audits of networks built only from max-plus/min-plus units or
//! from dilation-erosion (DEP) units.
//!
//! Each trial draws an input, backpropagates through the exact subgradient
//! tape and checks the gradient shape. Inputs within a tie tolerance of a
//! selection boundary are redrawn; persistent ties count as degenerate and
//! are excluded.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::layers::{Activation, LambdaMode, LayerKind, LayerSpec, NetworkSpec};
use crate::model::{forward, Network};
use crate::param::{Gradients, ParamSet, Parameter};
use crate::tensor::Tensor;
use crate::tropical::TropicalMode;

/// Selections closer than this are treated as ties.
pub const TIE_TOL: f64 = 1e-9;
/// Input redraws before a trial is declared degenerate.
pub const TIE_RETRIES: usize = 8;
/// Slack for float rounding in the DEP simplex checks.
pub const SIMPLEX_TOL: f64 = 1e-12;
/// Largest derivative of the logistic sigmoid.
pub const SIGMOID_SLOPE: f64 = 0.25;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AuditReport {
    pub trials: usize,
    pub violations: usize,
    pub degenerate: usize,
    /// Audit-specific extreme: the largest `||grad_x y||_1` (one-hot and DEP
    /// audits) or the largest per-layer count of active parameters.
    pub worst: f64,
    /// First failing trial, with what is needed to replay it.
    pub counterexample: Option<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    pub fn merge(&mut self, other: AuditReport) {
        self.trials += other.trials;
        self.violations += other.violations;
        self.degenerate += other.degenerate;
        self.worst = self.worst.max(other.worst);
        if self.counterexample.is_none() {
            self.counterexample = other.counterexample;
        }
    }
}

/// Smallest gap between the winning and the runner-up candidate of any
/// row of `bias (+) W (x) x`; `inf` when every row has a single candidate.
fn reduction_margin(w: &Tensor, x: &[f64], bias: Option<&[f64]>, mode: TropicalMode) -> f64 {
    let sign = match mode {
        TropicalMode::MaxPlus => 1.0,
        TropicalMode::MinPlus => -1.0,
    };
    let mut margin = f64::INFINITY;
    for i in 0..w.rows() {
        let (mut best, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        let cands = bias.map(|b| b[i]).into_iter().chain(w.row(i).iter().zip(x).map(|(a, b)| a + b));
        for c in cands {
            let v = sign * c;
            if v > best {
                second = best;
                best = v;
            } else if v > second {
                second = v;
            }
        }
        margin = margin.min(best - second);
    }
    margin
}

fn param<'a>(params: &'a ParamSet, idx: usize, name: &str) -> Result<&'a Tensor> {
    Ok(&params.get(&format!("{idx}.{name}"))?.value)
}

fn opt_param<'a>(params: &'a ParamSet, idx: usize, name: &str) -> Option<&'a [f64]> {
    params.get(&format!("{idx}.{name}")).ok().map(|p| p.value.data())
}

/// Smallest selection margin over every tropical reduction of the pass.
fn selection_margin(net: &Network, x: &[f64]) -> Result<f64> {
    let mut h = x.to_vec();
    let mut margin = f64::INFINITY;
    for (i, l) in net.spec.layers.iter().enumerate() {
        let ps = &net.params;
        h = match l.kind {
            LayerKind::Mp => {
                let (w, b) = (param(ps, i, "W")?, opt_param(ps, i, "w0"));
                margin = margin.min(reduction_margin(w, &h, b, l.mode));
                crate::layers::mp_forward(&h, w, b, l.mode)?
            }
            LayerKind::Dep => {
                let (w, m) = (param(ps, i, "W")?, param(ps, i, "M")?);
                let (w0, m0) = (opt_param(ps, i, "w0"), opt_param(ps, i, "m0"));
                margin = margin
                    .min(reduction_margin(w, &h, w0, TropicalMode::MaxPlus))
                    .min(reduction_margin(m, &h, m0, TropicalMode::MinPlus));
                let lambda = match l.lambda_mode {
                    LambdaMode::Learnable => param(ps, i, "lambda")?.data().to_vec(),
                    LambdaMode::Fixed(v) => vec![v; l.n_out],
                };
                let alpha = opt_param(ps, i, "alpha");
                crate::layers::dep_forward(&h, w, m, &lambda, w0, m0, l.activation, alpha)?
            }
            other => return Err(Error::Spec(format!("{other:?} layer is outside the audited family"))),
        };
    }
    Ok(margin)
}

fn input_and_param_grads(net: &Network, x: &[f64]) -> Result<Gradients> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (tape, out) = forward(&net.spec, &net.params, &Tensor::vector(x.to_vec()), false, &mut rng)?;
    let seed = Tensor::filled(tape.value(out).shape().to_vec(), 1.0);
    tape.backward(out, &seed)
}

/// Draws tie-free inputs; `None` after [`TIE_RETRIES`] redraws.
fn draw_input(net: &Network, rng: &mut ChaCha8Rng, scale: f64) -> Result<Option<Vec<f64>>> {
    let d = net.spec.input_size();
    for _ in 0..=TIE_RETRIES {
        let x: Vec<f64> = (0..d).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<f64>>();
        if selection_margin(net, &x)? > TIE_TOL {
            return Ok(Some(x));
        }
    }
    Ok(None)
}

fn require_tropical_only(spec: &NetworkSpec) -> Result<()> {
    for l in &spec.layers {
        if l.kind != LayerKind::Mp || l.activation != Activation::None || l.residual {
            return Err(Error::Spec(format!(
                "audit needs plain max-plus/min-plus layers, found {:?} with {:?}",
                l.kind, l.activation
            )));
        }
    }
    Ok(())
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Checks that the input gradient of a single-output max-plus/min-plus
/// network is `0` or a standard basis vector.
pub fn check_thm1(net: &Network, n_trials: usize, seed: u64) -> Result<AuditReport> {
    require_tropical_only(&net.spec)?;
    if net.spec.output_size != 1 {
        return Err(Error::Spec(format!("one-hot audit needs a single output, got {}", net.spec.output_size)));
    }
    let mut report = AuditReport::default();
    for t in 0..n_trials {
        report.trials += 1;
        let mut rng = trial_rng(seed, t);
        let Some(x) = draw_input(net, &mut rng, 2.0)? else {
            report.degenerate += 1;
            continue;
        };
        let g = input_and_param_grads(net, &x)?;
        let gx = g.input.ok_or_else(|| Error::State("no input gradient".into()))?;
        let l1: f64 = gx.data().iter().map(|v| v.abs()).sum();
        report.worst = report.worst.max(l1);
        let ones = gx.data().iter().filter(|&&v| v == 1.0).count();
        let zeros = gx.data().iter().filter(|&&v| v == 0.0).count();
        if ones + zeros != gx.len() || ones > 1 {
            report.violations += 1;
            report.counterexample.get_or_insert_with(|| {
                format!("trial {t} (seed {seed}): x = {} gives grad {}", fmt_vec(&x), fmt_vec(gx.data()))
            });
        }
    }
    Ok(report)
}

/// Per layer, counts parameters (weights and biases) with a nonzero
/// derivative of any output; the count may not exceed the output count.
pub fn check_thm2(net: &Network, n_trials: usize, seed: u64) -> Result<AuditReport> {
    require_tropical_only(&net.spec)?;
    let m = net.spec.output_size;
    let mut report = AuditReport::default();
    for t in 0..n_trials {
        report.trials += 1;
        let mut rng = trial_rng(seed, t);
        let Some(x) = draw_input(net, &mut rng, 2.0)? else {
            report.degenerate += 1;
            continue;
        };
        let g = input_and_param_grads(net, &x)?;
        for i in 0..net.spec.layers.len() {
            let count: usize = ["W", "w0"]
                .iter()
                .filter_map(|n| g.params.get(&format!("{i}.{n}")))
                .map(|t| t.data().iter().filter(|&&v| v != 0.0).count())
                .sum();
            report.worst = report.worst.max(count as f64);
            if count > m {
                report.violations += 1;
                report.counterexample.get_or_insert_with(|| {
                    format!("trial {t} (seed {seed}): layer {i} has {count} active parameters for {m} outputs at x = {}", fmt_vec(&x))
                });
            }
        }
    }
    Ok(report)
}

/// Checks `grad_x y >= 0` and `||grad_x y||_1 <= s^k` for a single-output
/// DEP network with `k` sigmoid layers (`s = 1/4`); unbiased networks
/// without activations must hit `||grad_x y||_1 = 1`.
pub fn check_thm3(net: &Network, n_trials: usize, seed: u64) -> Result<AuditReport> {
    let mut sigmoids = 0;
    for l in &net.spec.layers {
        if l.kind != LayerKind::Dep || l.residual || !matches!(l.activation, Activation::None | Activation::Sigmoid) {
            return Err(Error::Spec(format!("DEP audit needs plain DEP layers, found {:?} with {:?}", l.kind, l.activation)));
        }
        if l.activation == Activation::Sigmoid {
            sigmoids += 1;
        }
    }
    if net.spec.output_size != 1 {
        return Err(Error::Spec(format!("DEP audit needs a single output, got {}", net.spec.output_size)));
    }
    let bound = SIGMOID_SLOPE.powi(sigmoids);
    let exact_one = sigmoids == 0 && net.spec.layers.iter().all(|l| !l.biased);
    let mut report = AuditReport::default();
    for t in 0..n_trials {
        report.trials += 1;
        let mut rng = trial_rng(seed, t);
        let Some(x) = draw_input(net, &mut rng, 2.0)? else {
            report.degenerate += 1;
            continue;
        };
        let g = input_and_param_grads(net, &x)?;
        let gx = g.input.ok_or_else(|| Error::State("no input gradient".into()))?;
        let l1: f64 = gx.data().iter().map(|v| v.abs()).sum();
        report.worst = report.worst.max(l1);
        let negative = gx.data().iter().any(|&v| v < 0.0);
        let over = l1 > bound * (1.0 + SIMPLEX_TOL);
        let short = exact_one && (l1 - 1.0).abs() > SIMPLEX_TOL;
        if negative || over || short {
            report.violations += 1;
            report.counterexample.get_or_insert_with(|| {
                format!(
                    "trial {t} (seed {seed}): x = {} gives grad {} (bound {bound})",
                    fmt_vec(&x),
                    fmt_vec(gx.data())
                )
            });
        }
    }
    Ok(report)
}

/// Random network families for the audits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    /// Max-plus/min-plus layers with random modes, single output.
    Tropical,
    /// Max-plus/min-plus layers with random modes and `m` outputs.
    TropicalMulti(usize),
    /// DEP layers without activations, random `lambda`, single output.
    Dep,
    /// DEP layers with sigmoid on hidden layers, single output.
    DepSigmoid,
}

fn gaussian(shape: Vec<usize>, mean: f64, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| mean + std * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Samples a network of `family` with input width `d`, 1 to 5 layers and
/// hidden widths up to 8.
pub fn random_network(family: Family, d: usize, rng: &mut ChaCha8Rng) -> Result<Network> {
    let depth = rng.random_range(1..=5usize);
    let out = match family {
        Family::TropicalMulti(m) => m,
        _ => 1,
    };
    let mut widths = vec![d];
    for _ in 1..depth {
        widths.push(rng.random_range(2..=8usize));
    }
    widths.push(out);
    let biased = rng.random_bool(0.5);
    let mut layers = Vec::new();
    for (k, p) in widths.windows(2).enumerate() {
        let last = k + 2 == widths.len();
        let mut l = match family {
            Family::Tropical | Family::TropicalMulti(_) => {
                let mode = if rng.random_bool(0.5) { TropicalMode::MaxPlus } else { TropicalMode::MinPlus };
                LayerSpec::mp(p[0], p[1], mode, biased)
            }
            Family::Dep | Family::DepSigmoid => {
                let lambda = if rng.random_bool(0.5) {
                    LambdaMode::Learnable
                } else {
                    LambdaMode::Fixed(rng.random_range(0.0..=1.0))
                };
                let mut l = LayerSpec::dep(p[0], p[1], lambda);
                l.biased = biased;
                if family == Family::DepSigmoid {
                    l.activation = Activation::Sigmoid;
                }
                l
            }
        };
        if last {
            l = l.output();
        }
        layers.push(l);
    }
    let spec = NetworkSpec::new(vec![d], layers);
    spec.validate()?;
    let mut params = ParamSet::new();
    for decl in spec.param_decls() {
        let value = match decl.name() {
            "lambda" => {
                let n = decl.shape[0];
                Tensor::vector((0..n).map(|_| rng.random_range(0.0..=1.0)).collect())
            }
            "w0" | "m0" => gaussian(decl.shape.clone(), 0.0, 2.0, rng),
            _ => gaussian(decl.shape.clone(), 0.0, 1.0, rng),
        };
        params.insert(Parameter::new(decl.id.clone(), value, decl.role, decl.trainable))?;
    }
    Network::new(spec, params)
}

/// Runs `trials` audits, each on a freshly sampled network and input.
pub fn random_audit(family: Family, trials: usize, seed: u64) -> Result<AuditReport> {
    let mut report = AuditReport::default();
    for t in 0..trials {
        let mut rng = trial_rng(seed ^ 0xa0d1_7000, t);
        let d = rng.random_range(1..=6usize);
        let net = random_network(family, d, &mut rng)?;
        let trial_seed = seed.wrapping_add(t as u64);
        let mut r = match family {
            Family::Tropical => check_thm1(&net, 1, trial_seed)?,
            Family::TropicalMulti(_) => check_thm2(&net, 1, trial_seed)?,
            Family::Dep | Family::DepSigmoid => check_thm3(&net, 1, trial_seed)?,
        };
        if let Some(c) = r.counterexample.take() {
            r.counterexample = Some(format!("network trial {t} (audit seed {seed}): {c}"));
        }
        report.merge(r);
    }
    Ok(report)
}
