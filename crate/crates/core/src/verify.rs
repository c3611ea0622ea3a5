//! Named property suites over the theory module and the gradient tape.
//! Each suite compares against a direct oracle and reports its worst case.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::init::{init_network, InitScheme};
use crate::layers::{Activation, LayerKind, LayerSpec, NetworkSpec};
use crate::model::{grad_check, GradCheckOptions, Network, Targets};
use crate::presets::preset;
use crate::tensor::Tensor;
use crate::theory::audit::{random_audit, AuditReport, Family};
use crate::theory::builders::{
    build_affine_mpm, build_maxplusmin_mpm, embed_maxout_into_hybrid, embed_relu_into_hybrid, sample_l1_ball, Affine,
    AffineTarget,
};
use crate::theory::collapse::{collapse_stack, stack_forward, MaxPlusLayer};
use crate::theory::repr::repr_refinement;

pub const SUITES: &[&str] = &["collapse", "thm1", "thm2", "thm3", "thm4", "thm5", "reprthm", "gradcheck"];

/// Trials per gradient audit.
pub const AUDIT_TRIALS: usize = 1000;
/// In-ball samples per construction.
pub const BALL_SAMPLES: usize = 10_000;
/// Tolerance of the constructions, which only add, scale and compare.
pub const BUILD_TOL: f64 = 1e-9;
/// Largest accepted relative gradient error.
pub const GRAD_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    pub passed: bool,
    pub trials: usize,
    /// Suite-specific worst case, e.g. the largest error.
    pub worst: f64,
    pub detail: String,
}

impl SuiteReport {
    pub fn line(&self) -> String {
        format!(
            "{:<10} {}  trials={} worst={:.3e}  {}",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.trials,
            self.worst,
            self.detail
        )
    }
}

/// Runs one suite by name, or all of them for `"all"`.
pub fn run_suites(name: &str, seed: u64) -> Result<Vec<SuiteReport>> {
    if name == "all" {
        return SUITES.iter().map(|s| run_suite(s, seed)).collect();
    }
    Ok(vec![run_suite(name, seed)?])
}

pub fn run_suite(name: &str, seed: u64) -> Result<SuiteReport> {
    match name {
        "collapse" => collapse_suite(seed),
        "thm1" => audit_suite(name, Family::Tropical, seed),
        "thm2" => audit_suite(name, Family::TropicalMulti(4), seed),
        "thm3" => {
            let mut r = random_audit(Family::Dep, AUDIT_TRIALS / 2, seed)?;
            r.merge(random_audit(Family::DepSigmoid, AUDIT_TRIALS - AUDIT_TRIALS / 2, seed ^ 0x51)?);
            Ok(from_audit(name, r))
        }
        "thm4" => affine_suite(seed),
        "thm5" => embedding_suite(seed),
        "reprthm" => repr_suite(),
        "gradcheck" => gradcheck_suite(seed),
        other => Err(Error::Config(format!(
            "unknown suite `{other}`; expected one of {} or all",
            SUITES.join(", ")
        ))),
    }
}

fn from_audit(name: &str, r: AuditReport) -> SuiteReport {
    SuiteReport {
        name: name.into(),
        passed: r.passed(),
        trials: r.trials,
        worst: r.worst,
        detail: format!(
            "violations={} degenerate={}{}",
            r.violations,
            r.degenerate,
            r.counterexample.map(|c| format!(" first: {c}")).unwrap_or_default()
        ),
    }
}

fn audit_suite(name: &str, family: Family, seed: u64) -> Result<SuiteReport> {
    Ok(from_audit(name, random_audit(family, AUDIT_TRIALS, seed)?))
}

/// Multiples of 1/64 in `[-8, 8]`, so every sum along the way is exact.
fn dyadic(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(-512i32..=512) as f64 / 64.0
}

/// Random max-plus stack with `depth` layers of width at most 8.
pub fn random_stack(depth: usize, rng: &mut ChaCha8Rng) -> Vec<MaxPlusLayer> {
    let widths: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=8)).collect();
    widths
        .windows(2)
        .map(|p| {
            let w = Tensor::new(vec![p[1], p[0]], (0..p[0] * p[1]).map(|_| dyadic(rng)).collect())
                .expect("shape matches data");
            let w0 = (0..p[1])
                .map(|_| if rng.random_bool(0.25) { f64::NEG_INFINITY } else { dyadic(rng) })
                .collect();
            MaxPlusLayer::new(w, w0).expect("bias matches rows")
        })
        .collect()
}

/// Stacks of depth 2 to 5, each compared with its collapse on 1000 inputs.
pub fn collapse_suite(seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc011);
    let mut worst = 0.0f64;
    let mut trials = 0;
    for depth in 2..=5 {
        let stack = random_stack(depth, &mut rng);
        let c = collapse_stack(&stack)?;
        for _ in 0..1000 {
            let x: Vec<f64> = (0..stack[0].n_in()).map(|_| dyadic(&mut rng)).collect();
            let (a, b) = (stack_forward(&stack, &x)?, c.eval(&x)?);
            for (p, q) in a.iter().zip(&b) {
                let d = if p == q { 0.0 } else { (p - q).abs() };
                worst = worst.max(if d.is_nan() { f64::INFINITY } else { d });
            }
            trials += 1;
        }
    }
    Ok(SuiteReport {
        name: "collapse".into(),
        passed: worst == 0.0,
        trials,
        worst,
        detail: "max |stack - collapsed| over depths 2..=5".into(),
    })
}

fn ball_batch(d: usize, r: f64, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data: Vec<f64> = (0..n).flat_map(|_| sample_l1_ball(d, r, rng)).collect();
    Tensor::new(vec![n, d], data).expect("shape matches data")
}

fn random_affine(d: usize, rng: &mut ChaCha8Rng) -> Affine {
    Affine {
        a: (0..d).map(|_| rng.random_range(-3.0..3.0)).collect(),
        b: rng.random_range(-2.0..2.0),
    }
}

/// Largest deviation of `net` from `oracle` over `x`.
fn max_deviation(net: &Network, x: &Tensor, oracle: impl Fn(&[f64]) -> Vec<f64>) -> Result<f64> {
    let y = net.predict(x)?;
    let mut worst = 0.0f64;
    for i in 0..x.rows() {
        for (p, q) in y.row(i).iter().zip(oracle(x.row(i))) {
            worst = worst.max((p - q).abs());
        }
    }
    Ok(if worst.is_nan() { f64::INFINITY } else { worst })
}

/// Affine worst error and max-plus-min worst error over 10 random targets
/// each.
pub fn affine_errors(seed: u64, targets: usize, samples: usize) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xaff1);
    let mut worst_affine = 0.0f64;
    for _ in 0..targets {
        let d = rng.random_range(1..=6);
        let f = random_affine(d, &mut rng);
        let r = rng.random_range(0.5..4.0);
        let c = build_affine_mpm(&AffineTarget {
            a: f.a.clone(),
            b: f.b,
            r,
        })?;
        let x = ball_batch(d, r, samples, &mut rng);
        worst_affine = worst_affine.max(max_deviation(&c.net, &x, |v| vec![f.eval(v)])?);
    }
    let mut worst_mpm = 0.0f64;
    for _ in 0..targets {
        let d = rng.random_range(1..=5);
        let maxes: Vec<Affine> = (0..rng.random_range(1..=3)).map(|_| random_affine(d, &mut rng)).collect();
        let mins: Vec<Affine> = (0..rng.random_range(1..=3)).map(|_| random_affine(d, &mut rng)).collect();
        let r = rng.random_range(0.5..4.0);
        let c = build_maxplusmin_mpm(&maxes, &mins, r)?;
        let x = ball_batch(d, r, samples, &mut rng);
        let oracle = |v: &[f64]| {
            let hi = maxes.iter().map(|f| f.eval(v)).fold(f64::NEG_INFINITY, f64::max);
            let lo = mins.iter().map(|f| f.eval(v)).fold(f64::INFINITY, f64::min);
            vec![hi + lo]
        };
        worst_mpm = worst_mpm.max(max_deviation(&c.net, &x, oracle)?);
    }
    Ok((worst_affine, worst_mpm))
}

fn affine_suite(seed: u64) -> Result<SuiteReport> {
    let (a, m) = affine_errors(seed, 10, BALL_SAMPLES)?;
    Ok(SuiteReport {
        name: "thm4".into(),
        passed: a <= BUILD_TOL && m <= BUILD_TOL,
        trials: 20 * BALL_SAMPLES,
        worst: a.max(m),
        detail: format!("affine={a:.3e} max-plus-min={m:.3e}"),
    })
}

/// Reference ReLU network `widths[0] -> ... -> widths[last]` with random
/// biases large enough to switch units inside the ball.
pub fn relu_reference(widths: &[usize], seed: u64) -> Result<Network> {
    let mut layers = Vec::new();
    for (i, p) in widths.windows(2).enumerate() {
        let l = LayerSpec::linear(p[0], p[1]);
        if i + 2 < widths.len() {
            layers.push(l);
            layers.push(LayerSpec::relu(p[1]));
        } else {
            layers.push(l.output());
        }
    }
    let mut net = init_network(&NetworkSpec::new(vec![widths[0]], layers), &InitScheme::default(), seed)?;
    randomize_biases(&mut net, seed);
    Ok(net)
}

/// Single maxout layer followed by a linear output.
pub fn maxout_reference(d: usize, width: usize, pieces: usize, outputs: usize, seed: u64) -> Result<Network> {
    let mut m = LayerSpec::new(LayerKind::Maxout, d, width);
    m.pieces = pieces;
    let spec = NetworkSpec::new(vec![d], vec![m, LayerSpec::linear(width, outputs).output()]);
    let mut net = init_network(&spec, &InitScheme::default(), seed)?;
    randomize_biases(&mut net, seed);
    Ok(net)
}

fn randomize_biases(net: &mut Network, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for p in net.params.iter_mut().filter(|p| p.id.ends_with(".b")) {
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
}

/// Worst ReLU and maxout embedding errors on in-ball samples.
pub fn embedding_errors(seed: u64, samples: usize) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe3b);
    let r = 2.0;
    let mut worst_relu = 0.0f64;
    for k in 0..3 {
        let reference = relu_reference(&[8, 8, 8, 8], seed.wrapping_add(k))?;
        let c = embed_relu_into_hybrid(&reference, r)?;
        let x = ball_batch(8, r, samples, &mut rng);
        let want = reference.predict(&x)?;
        let got = c.net.predict(&x)?;
        worst_relu = worst_relu.max(nan_aware_max_diff(&want, &got));
    }
    let mut worst_maxout = 0.0f64;
    for pieces in 1..=3 {
        let reference = maxout_reference(6, 8, pieces, 3, seed.wrapping_add(pieces as u64))?;
        let c = embed_maxout_into_hybrid(&reference, r)?;
        let x = ball_batch(6, r, samples, &mut rng);
        let want = reference.predict(&x)?;
        let got = c.net.predict(&x)?;
        worst_maxout = worst_maxout.max(nan_aware_max_diff(&want, &got));
    }
    Ok((worst_relu, worst_maxout))
}

fn nan_aware_max_diff(a: &Tensor, b: &Tensor) -> f64 {
    let d = a.max_abs_diff(b);
    if d.is_nan() {
        f64::INFINITY
    } else {
        d
    }
}

fn embedding_suite(seed: u64) -> Result<SuiteReport> {
    let (relu, maxout) = embedding_errors(seed, BALL_SAMPLES)?;
    Ok(SuiteReport {
        name: "thm5".into(),
        passed: relu <= BUILD_TOL && maxout <= BUILD_TOL,
        trials: 6 * BALL_SAMPLES,
        worst: relu.max(maxout),
        detail: format!("relu={relu:.3e} maxout={maxout:.3e}"),
    })
}

/// `(alphas, x, coarsest step)` cases for the sup-of-erosion identities.
pub const REPR_CASES: &[(&[f64], &[f64], f64)] = &[
    (&[0.5], &[4.0], 1e-3),
    (&[1.0, 0.0, 0.0], &[3.5, -1.0, 2.0], 1e-3),
    (&[0.3, 0.5], &[1.0, 2.0], 1e-3),
    (&[0.25, 0.75], &[-1.5, 2.5], 1e-3),
    (&[0.2, 0.3, 0.5], &[1.0, -2.0, 0.5], 1e-2),
];

/// One line per case: `(worst gap / step, passes)`. A case passes when
/// every gap is within two grid steps and each halving at least halves
/// the gap, up to `1e-12` of rounding.
pub fn repr_checks() -> Result<Vec<(String, f64, bool)>> {
    let mut out = Vec::new();
    for (alphas, x, step) in REPR_CASES {
        let levels = repr_refinement(alphas, x, *step, 2)?;
        let within = levels.iter().all(|e| e.gap >= -1e-12 && e.gap <= 2.0 * e.step);
        let halves = levels.windows(2).all(|w| w[1].gap <= w[0].gap / 2.0 + 1e-12);
        let ratio = levels.iter().map(|e| e.gap / e.step).fold(0.0, f64::max);
        let gaps: Vec<String> = levels.iter().map(|e| format!("{:.2e}", e.gap)).collect();
        out.push((format!("alpha={alphas:?} x={x:?} gaps=[{}]", gaps.join(", ")), ratio, within && halves));
    }
    Ok(out)
}

fn repr_suite() -> Result<SuiteReport> {
    let checks = repr_checks()?;
    let failed: Vec<&String> = checks.iter().filter(|c| !c.2).map(|c| &c.0).collect();
    Ok(SuiteReport {
        name: "reprthm".into(),
        passed: failed.is_empty(),
        trials: checks.len(),
        worst: checks.iter().map(|c| c.1).fold(0.0, f64::max),
        detail: if failed.is_empty() {
            "gap/step".into()
        } else {
            format!("failing: {failed:?}")
        },
    })
}

/// Small networks exercising every morphological block with a gradient.
pub fn gradcheck_networks(seed: u64) -> Result<Vec<(&'static str, Network)>> {
    let fc = |kind: LayerKind, act: Activation| -> Vec<LayerSpec> {
        let mut v = vec![
            LayerSpec::mpm(6, 5).with_activation(act),
            LayerSpec::mpm(5, 5).with_activation(act),
            LayerSpec::mpm(5, 3).output(),
        ];
        for l in &mut v {
            l.kind = kind;
            l.residual = kind == LayerKind::Rmpm && l.n_in == l.n_out && !l.is_output_layer;
        }
        v
    };
    let hybrid = vec![
        LayerSpec::new(LayerKind::HybridBlock, 6, 5),
        LayerSpec::new(LayerKind::HybridBlock, 5, 5),
        LayerSpec::linear(5, 3).output(),
    ];
    let specs = vec![
        ("mpm", NetworkSpec::new(vec![6], fc(LayerKind::Mpm, Activation::Scale))),
        ("rmpm", NetworkSpec::new(vec![6], fc(LayerKind::Rmpm, Activation::Scale))),
        ("mpm-svd", NetworkSpec::new(vec![6], fc(LayerKind::MpmSvd, Activation::Svd))),
        ("hybrid", NetworkSpec::new(vec![6], hybrid)),
        ("morph-conv-s1", preset("mpm-lenet5", &[1, 12, 12], 3)?),
        ("morph-conv-s2", preset("mpm-svd-lenet5", &[1, 12, 12], 3)?),
    ];
    specs
        .into_iter()
        .enumerate()
        .map(|(k, (name, spec))| Ok((name, init_network(&spec, &InitScheme::default(), seed.wrapping_add(k as u64))?)))
        .collect()
}

/// Worst relative gradient error per network.
pub fn gradcheck_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c);
    let mut out = Vec::new();
    for (name, net) in gradcheck_networks(seed)? {
        let n = net.spec.input_size();
        let x: Vec<f64> = (0..2 * n).map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        let x = Tensor::new(vec![2, n], x)?;
        // Rounding in the loss contributes about 1e-16 / eps to each
        // difference quotient; a wider step keeps small conv gradients
        // measurable while the curvature error stays near 1e-9.
        let opts = GradCheckOptions {
            eps: 1e-4,
            max_coords: Some(24),
            retries: 40,
            seed,
            ..GradCheckOptions::default()
        };
        let r = grad_check(&net, &x, Targets::Classes(&[0, 2]), &opts)
            .map_err(|e| Error::Parameter(format!("{name}: {e}")))?;
        out.push((name, r.max_rel_err));
    }
    Ok(out)
}

fn gradcheck_suite(seed: u64) -> Result<SuiteReport> {
    let errs = gradcheck_errors(seed)?;
    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    Ok(SuiteReport {
        name: "gradcheck".into(),
        passed: errs.iter().all(|e| e.1 <= GRAD_TOL),
        trials: errs.len(),
        worst,
        detail: errs.iter().map(|(n, e)| format!("{n}={e:.1e}")).collect::<Vec<_>>().join(" "),
    })
}
