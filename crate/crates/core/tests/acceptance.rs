//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! `MORPHNET_ACCEPTANCE_ONLY=1,4,13` restricts the run to the listed
//! criteria. MNIST is read from `MORPHNET_DATA_DIR` (default: `data/` at the
//! workspace root). The process exits nonzero on a failing criterion only when
//! `MORPHNET_ACCEPTANCE_STRICT=1`, so `cargo test` still reports the other
//! targets; the summary line always lists the failures.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use morphnet::config::{DatasetChoice, RunConfig};
use morphnet::data::RegressionTarget;
use morphnet::experiment::{
    init_from_config, load_classification, prune_l1, prune_snip, run_regression, run_train, ClassData, TrainOutcome,
    DATA_DIR_ENV,
};
use morphnet::presets::preset;
use morphnet::theory::{mean_shift_run, ShiftConfig, ShiftModel};
use morphnet::tropical::{tropical_conv2d_strided, tropical_matmul, tropical_vecmul, TropicalMode};
use morphnet::verify::{
    affine_errors, collapse_suite, embedding_errors, gradcheck_errors, repr_checks, run_suite, AUDIT_TRIALS,
    BALL_SAMPLES, BUILD_TOL, GRAD_TOL,
};
use morphnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

const SEED: u64 = 0;

// ---------------------------------------------------------------------------
// Exhaustive tropical oracles.

/// Candidate values with their selection index (0 = bias), in index order.
fn pick(cands: &[(f64, u32)], mode: TropicalMode) -> Option<(f64, u32)> {
    let mut best: Option<(f64, u32)> = None;
    for &(v, i) in cands {
        if v.is_nan() || !v.is_finite() {
            continue;
        }
        let take = match best {
            None => true,
            Some((b, _)) => match mode {
                TropicalMode::MaxPlus => v > b,
                TropicalMode::MinPlus => v < b,
            },
        };
        if take {
            best = Some((v, i));
        }
    }
    best
}

/// Grid values so that ties happen often, with occasional neutral weights.
fn entry(rng: &mut ChaCha8Rng, mode: TropicalMode, neutral_p: f64) -> f64 {
    if rng.random_bool(neutral_p) {
        return mode.neutral();
    }
    if rng.random_bool(0.5) {
        rng.random_range(-3i32..=3) as f64 * 0.5
    } else {
        rng.random_range(-4.0..4.0)
    }
}

fn mode_of(rng: &mut ChaCha8Rng) -> TropicalMode {
    if rng.random_bool(0.5) {
        TropicalMode::MaxPlus
    } else {
        TropicalMode::MinPlus
    }
}

fn same(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits()
}

fn vecmul_instance(rng: &mut ChaCha8Rng) -> Result<bool, Box<dyn std::error::Error>> {
    let mode = mode_of(rng);
    let (m, n) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let w: Vec<f64> = (0..m * n).map(|_| entry(rng, mode, 0.15)).collect();
    let x: Vec<f64> = (0..n).map(|_| entry(rng, mode, 0.0)).collect();
    let bias: Option<Vec<f64>> = rng
        .random_bool(0.7)
        .then(|| (0..m).map(|_| entry(rng, mode, 0.2)).collect());
    let got = tropical_vecmul(&Tensor::new(vec![m, n], w.clone())?, &x, bias.as_deref(), mode);
    let want: Vec<Option<(f64, u32)>> = (0..m)
        .map(|i| {
            let mut c: Vec<(f64, u32)> = bias.iter().map(|b| (b[i], 0)).collect();
            c.extend((0..n).map(|j| (x[j] + w[i * n + j], j as u32 + 1)));
            pick(&c, mode)
        })
        .collect();
    Ok(match got {
        Err(_) => want.iter().any(Option::is_none),
        Ok((y, arg)) => want
            .iter()
            .zip(y.iter().zip(&arg))
            .all(|(w, (v, a))| matches!(w, Some((wv, wa)) if same(*wv, *v) && wa == a)),
    })
}

fn matmul_instance(rng: &mut ChaCha8Rng) -> Result<bool, Box<dyn std::error::Error>> {
    let mode = mode_of(rng);
    let (m, k, n) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
    let a: Vec<f64> = (0..m * k).map(|_| entry(rng, mode, 0.2)).collect();
    let b: Vec<f64> = (0..k * n).map(|_| entry(rng, mode, 0.2)).collect();
    let got = tropical_matmul(&Tensor::new(vec![m, k], a.clone())?, &Tensor::new(vec![k, n], b.clone())?, mode)?;
    for i in 0..m {
        for j in 0..n {
            let c: Vec<(f64, u32)> = (0..k).map(|p| (a[i * k + p] + b[p * n + j], 0)).collect();
            let want = pick(&c, mode).map_or(mode.neutral(), |(v, _)| v);
            if !same(want, got.data()[i * n + j]) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn conv_instance(rng: &mut ChaCha8Rng) -> Result<bool, Box<dyn std::error::Error>> {
    let mode = mode_of(rng);
    let (ci, co) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let pad = rng.random_range(0..=1);
    let stride = rng.random_range(1..=2);
    let kh = rng.random_range(1..=(h + 2 * pad).min(4));
    let kw = rng.random_range(1..=(w + 2 * pad).min(4));
    let x: Vec<f64> = (0..ci * h * w).map(|_| entry(rng, mode, 0.0)).collect();
    let k: Vec<f64> = (0..co * ci * kh * kw).map(|_| entry(rng, mode, 0.1)).collect();
    let bias: Vec<f64> = (0..co).map(|_| entry(rng, mode, 0.3)).collect();
    let got = tropical_conv2d_strided(
        &Tensor::new(vec![ci, h, w], x.clone())?,
        &Tensor::new(vec![co, ci, kh, kw], k.clone())?,
        &bias,
        mode,
        pad,
        stride,
    );
    let (ho, wo) = ((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1);
    let mut want = Vec::new();
    for o in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut c = vec![(bias[o], 0u32)];
                for c_ in 0..ci {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let xv = x[(c_ * h + iy as usize) * w + ix as usize];
                            let t = (c_ * kh + ky) * kw + kx;
                            c.push((xv + k[((o * ci + c_) * kh + ky) * kw + kx], t as u32 + 1));
                        }
                    }
                }
                want.push(pick(&c, mode));
            }
        }
    }
    Ok(match got {
        Err(_) => want.iter().any(Option::is_none),
        Ok((y, arg)) => {
            y.shape() == [co, ho, wo]
                && want
                    .iter()
                    .zip(y.data().iter().zip(&arg))
                    .all(|(w, (v, a))| matches!(w, Some((wv, wa)) if same(*wv, *v) && wa == a))
        }
    })
}

fn c1_kernels() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0x7709);
    let mut bad = [0usize; 3];
    for _ in 0..1000 {
        bad[0] += !vecmul_instance(&mut rng)? as usize;
        bad[1] += !matmul_instance(&mut rng)? as usize;
        bad[2] += !conv_instance(&mut rng)? as usize;
    }
    Ok((
        bad == [0, 0, 0],
        format!("mismatches vecmul={} matmul={} conv={} of 1000 each", bad[0], bad[1], bad[2]),
    ))
}

// ---------------------------------------------------------------------------
// Property suites.

fn c2_collapse() -> Outcome {
    let r = collapse_suite(SEED)?;
    Ok((r.passed, format!("{} inputs, max |stack - collapsed| = {:e}", r.trials, r.worst)))
}

fn c3_audits() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["thm1", "thm2", "thm3"] {
        let r = run_suite(name, SEED)?;
        ok &= r.passed && r.trials >= AUDIT_TRIALS;
        parts.push(format!("{name}: {} trials, {}", r.trials, r.detail));
    }
    Ok((ok, parts.join("; ")))
}

fn c4_gradcheck() -> Outcome {
    let errs = gradcheck_errors(SEED)?;
    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let parts: Vec<String> = errs.iter().map(|(n, e)| format!("{n}={e:.1e}")).collect();
    Ok((worst <= GRAD_TOL, format!("worst {worst:.2e}: {}", parts.join(" "))))
}

fn c5_affine() -> Outcome {
    let (affine, mpm) = affine_errors(SEED, 10, BALL_SAMPLES)?;
    Ok((
        affine <= BUILD_TOL && mpm <= BUILD_TOL,
        format!("affine {affine:.2e}, max-plus-min {mpm:.2e} over 10 targets x {BALL_SAMPLES}"),
    ))
}

fn c6_embedding() -> Outcome {
    let (relu, maxout) = embedding_errors(SEED, BALL_SAMPLES)?;
    Ok((
        relu <= BUILD_TOL && maxout <= BUILD_TOL,
        format!("relu {relu:.2e}, maxout {maxout:.2e} over {BALL_SAMPLES} in-ball samples"),
    ))
}

fn c7_repr() -> Outcome {
    let checks = repr_checks()?;
    let ok = checks.iter().all(|c| c.2);
    let worst = checks.iter().map(|c| c.1).fold(0.0, f64::max);
    let failing: Vec<&str> = checks.iter().filter(|c| !c.2).map(|c| c.0.as_str()).collect();
    Ok((ok, format!("{} cases, worst gap/step {worst:.3}{}", checks.len(), fmt_failing(&failing))))
}

fn fmt_failing(f: &[&str]) -> String {
    if f.is_empty() {
        String::new()
    } else {
        format!("; failing {f:?}")
    }
}

const FC_COUNTS: &[(&str, usize)] = &[
    ("mlp", 466_698),
    ("mp", 466_698),
    ("dep", 932_106),
    ("dep-half", 930_816),
    ("act-mp", 467_978),
    ("act-dep", 933_386),
    ("act-dep-34", 932_096),
    ("act-dep-half", 932_096),
    ("mpm", 469_268),
    ("rmpm", 469_268),
    ("rmpm-drop", 469_268),
    ("mpm-svd", 469_268),
];

fn c8_counts() -> Outcome {
    let mut wrong = Vec::new();
    for &(name, n) in FC_COUNTS {
        let got = preset(name, &[1, 28, 28], 10)?.param_count();
        if got != n {
            wrong.push(format!("{name}: {got} != {n}"));
        }
    }
    Ok((
        wrong.is_empty(),
        if wrong.is_empty() {
            format!("{} fully connected presets exact", FC_COUNTS.len())
        } else {
            wrong.join(", ")
        },
    ))
}

// ---------------------------------------------------------------------------
// MNIST experiments.

fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

fn mnist_cfg(preset: &str, epochs: usize, batch: usize) -> RunConfig {
    let mut c = RunConfig::parse(&format!("dataset = mnist\npreset = {preset}\n")).expect("static config");
    c.epochs = epochs;
    c.batch_size = batch;
    c.lr = 1e-3;
    c.seed = SEED;
    c.data_dir = Some(data_dir());
    c
}

#[derive(Default)]
struct Shared {
    mnist: Option<ClassData>,
    mpm: Option<TrainOutcome>,
    mlp: Option<TrainOutcome>,
}

impl Shared {
    fn mnist(&mut self) -> Result<&ClassData, Box<dyn std::error::Error>> {
        if self.mnist.is_none() {
            self.mnist = Some(load_classification(&mnist_cfg("mpm", 0, 64))?);
        }
        Ok(self.mnist.as_ref().expect("just loaded"))
    }

    fn trained(&mut self, name: &str) -> Result<&TrainOutcome, Box<dyn std::error::Error>> {
        let cfg = mnist_cfg(name, 10, 64);
        let have = match name {
            "mpm" => self.mpm.is_some(),
            _ => self.mlp.is_some(),
        };
        if !have {
            let o = run_train(&cfg, self.mnist()?, None)?;
            match name {
                "mpm" => self.mpm = Some(o),
                _ => self.mlp = Some(o),
            }
        }
        Ok(match name {
            "mpm" => self.mpm.as_ref(),
            _ => self.mlp.as_ref(),
        }
        .expect("just trained"))
    }
}

fn last_val(o: &TrainOutcome) -> f64 {
    o.history.last().map_or(f64::NAN, |m| m.val_acc)
}

fn c9_training(s: &mut Shared) -> Outcome {
    let mpm = last_val(s.trained("mpm")?);
    let mlp = last_val(s.trained("mlp")?);
    Ok((
        mpm >= 0.92 && mlp >= 0.95,
        format!("epoch-10 val: mpm {mpm:.4} (>= 0.92), mlp {mlp:.4} (>= 0.95)"),
    ))
}

fn c10_negative(s: &mut Shared) -> Outcome {
    let mp = run_train(&mnist_cfg("mp", 10, 64), s.mnist()?, None)?.history.peak_train_acc();
    let dep = run_train(&mnist_cfg("dep", 10, 64), s.mnist()?, None)?.history.peak_train_acc();
    Ok((
        mp <= 0.80 && dep <= 0.85,
        format!("peak train: mp {mp:.4} (<= 0.80), dep {dep:.4} (<= 0.85)"),
    ))
}

fn c11_pruning(s: &mut Shared) -> Outcome {
    let test = s.mnist()?.test.clone();
    let mpm = prune_l1(&s.trained("mpm")?.net, 0.9, &test)?;
    let mlp = prune_l1(&s.trained("mlp")?.net, 0.9, &test)?;
    let drop = mpm.before_acc - mpm.after_acc;

    let snip = |s: &mut Shared, name: &str, keep: usize| -> Result<f64, Box<dyn std::error::Error>> {
        let cfg = mnist_cfg(name, 10, 64);
        let data = s.mnist()?;
        let init = init_from_config(&cfg, &data.input_shape, data.classes)?;
        Ok(prune_snip(&cfg, &init, data, keep)?.trained_acc.unwrap_or(f64::NAN))
    };
    let snip_mpm = snip(s, "mpm", 1173)?;
    let snip_mlp = snip(s, "mlp", 1166)?;
    Ok((
        drop <= 0.05 && mlp.after_acc <= 0.60 && snip_mpm >= 0.90 && snip_mlp <= 0.30,
        format!(
            "l1 0.9: mpm {:.4} -> {:.4} (drop {:.2} pts <= 5), mlp {:.4} -> {:.4} (<= 0.60); \
             snip: mpm keep=1173 test {snip_mpm:.4} (>= 0.90), mlp keep=1166 test {snip_mlp:.4} (<= 0.30)",
            mpm.before_acc,
            mpm.after_acc,
            100.0 * drop,
            mlp.before_acc,
            mlp.after_acc
        ),
    ))
}

fn c14_hybrid(s: &mut Shared) -> Outcome {
    let small = run_train(&mnist_cfg("hybrid-mlp", 25, 64), s.mnist()?, None)?.history.peak_train_acc();
    let large = run_train(&mnist_cfg("hybrid-mlp", 25, 640), s.mnist()?, None)?.history.peak_train_acc();
    Ok((
        large - small >= 0.30,
        format!(
            "peak train: batch 64 {small:.4}, batch 640 {large:.4}, gap {:.2} pts (>= 30)",
            100.0 * (large - small)
        ),
    ))
}

// ---------------------------------------------------------------------------
// Synthetic experiments.

fn reg_cfg(preset: &str) -> RunConfig {
    let mut c = RunConfig::parse(&format!("dataset = synth:sin6\npreset = {preset}\n")).expect("static config");
    c.epochs = 200;
    c.batch_size = 32;
    c.lr = 1e-3;
    c.seed = SEED;
    c
}

fn c12_regression() -> Outcome {
    assert_eq!(reg_cfg("reg-mpm").dataset, DatasetChoice::Synth(RegressionTarget::Sin6));
    let act = run_regression(&reg_cfg("reg-mpm"), None)?;
    let noact = run_regression(&reg_cfg("reg-mpm-noact"), None)?;
    let floor = act.noise_floor;
    Ok((
        act.test_mse <= 1.5 * floor && noact.test_mse >= 3.0 * act.test_mse,
        format!(
            "mpm MSE {:.4} (<= {:.4}), non-activated {:.4} ({:.1}x, >= 3x)",
            act.test_mse,
            1.5 * floor,
            noact.test_mse,
            noact.test_mse / act.test_mse
        ),
    ))
}

fn c13_mean_shift() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for batch in [1, 100] {
        let lin = mean_shift_run(&ShiftConfig::new(ShiftModel::Linear, batch))?;
        let mp = mean_shift_run(&ShiftConfig::new(ShiftModel::MaxPlus, batch))?;
        let (l, m) = (lin.last().expect("nonempty"), mp.last().expect("nonempty"));
        let pass = (l.mean - 10.0).abs() <= 0.5 && m.mean <= 6.0 && m.std >= 1.0;
        ok &= pass;
        parts.push(format!(
            "batch {batch}: linear mean {:.3}, mp mean {:.3} std {:.3}{}",
            l.mean,
            m.mean,
            m.std,
            if pass { "" } else { " [out of bounds]" }
        ));
    }
    Ok((ok, parts.join("; ")))
}

// ---------------------------------------------------------------------------

struct Criterion {
    id: usize,
    name: &'static str,
    limit: Option<Duration>,
}

const fn crit(id: usize, name: &'static str, secs: u64) -> Criterion {
    Criterion {
        id,
        name,
        limit: if secs == 0 { None } else { Some(Duration::from_secs(secs)) },
    }
}

const CRITERIA: &[Criterion] = &[
    crit(1, "tropical kernels vs enumeration", 10),
    crit(2, "collapse exactness", 10),
    crit(3, "gradient-sparsity audits", 60),
    crit(4, "gradient check", 60),
    crit(5, "affine and max-plus-min builders", 30),
    crit(6, "relu and maxout embeddings", 60),
    crit(7, "representation identity", 10),
    crit(8, "parameter counts", 0),
    crit(12, "sin regression", 0),
    crit(13, "mean shift", 300),
    crit(9, "mnist mpm / mlp training", 0),
    crit(10, "mp / dep negative controls", 0),
    crit(11, "l1 and snip pruning", 0),
    crit(14, "hybrid batch-size effect", 0),
];

fn run(id: usize, s: &mut Shared) -> Outcome {
    match id {
        1 => c1_kernels(),
        2 => c2_collapse(),
        3 => c3_audits(),
        4 => c4_gradcheck(),
        5 => c5_affine(),
        6 => c6_embedding(),
        7 => c7_repr(),
        8 => c8_counts(),
        9 => c9_training(s),
        10 => c10_negative(s),
        11 => c11_pruning(s),
        12 => c12_regression(),
        13 => c13_mean_shift(),
        14 => c14_hybrid(s),
        _ => unreachable!("criterion ids are static"),
    }
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("MORPHNET_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let strict = std::env::var("MORPHNET_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut shared = Shared::default();
    let mut failed = Vec::new();
    let mut ran = 0;
    println!("acceptance (seed {SEED}, data {})", data_dir().display());
    for c in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&c.id)) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let result = run(c.id, &mut shared);
        let dt = t.elapsed();
        let (mut pass, mut detail) = match result {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if let Some(limit) = c.limit {
            if dt > limit {
                pass = false;
                detail.push_str(&format!("; over the {}s budget", limit.as_secs()));
            }
        }
        println!(
            "[{}] {:>2}. {:<34} {:>8.1}s  {}",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            dt.as_secs_f64(),
            detail
        );
        if !pass {
            failed.push(c.id);
        }
    }
    println!("acceptance: {}/{ran} criteria passed; failing: {failed:?}", ran - failed.len());
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}
