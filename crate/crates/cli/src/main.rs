use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use morphnet::checkpoint;
use morphnet::config::{parse_pairs, RunConfig};
use morphnet::experiment::{
    accuracy_on, init_from_config, load_classification, prune_l1, prune_snip, run_regression, run_train,
};
use morphnet::theory::landscape::{hybrid_pair, hybrid_samples, linear_unit, mp_unit, perceptron_samples};
use morphnet::theory::{history_csv, landscape_grid, mean_shift_run, Axis, ShiftConfig, ShiftModel};
use morphnet::verify::run_suites;
use serde_json::json;

#[derive(Parser)]
#[command(name = "morphnet", version, about = "Train, prune and verify morphological networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// `key = value` run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier; writes metrics.csv, summary.json and a checkpoint.
    Train(Common),
    /// Accuracy of a checkpoint on the configured split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Magnitude (l1) pruning of a trained checkpoint, or SNIP at init followed by training.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// l1 or snip; defaults to the configured `prune_method`.
        #[arg(long)]
        method: Option<String>,
    },
    /// Run property suites: collapse, thm1..thm5, reprthm, gradcheck or all.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "all", value_parser = [
            "collapse", "thm1", "thm2", "thm3", "thm4", "thm5", "reprthm", "gradcheck", "all",
        ])]
        suite: String,
    },
    /// Loss surface over two weights of a tiny network, as CSV.
    Landscape(Common),
    /// Fit a synthetic 1-D regression target.
    Regress(Common),
    /// Online training of a unit whose optimal weights are all 10.
    MeanShift(Common),
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let path = c.config.as_ref().context("--config is required for this command")?;
    let mut cfg = RunConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?;
    apply_overrides(&mut cfg, c);
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfig, c: &Common) {
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(v)? + "\n"))
}

fn cmd_train(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let data = load_classification(&cfg)?;
    let o = run_train(&cfg, &data, Some(&cfg.out))?;
    let summary = json!({
        "epochs": cfg.epochs,
        "peak_train_acc": o.history.peak_train_acc(),
        "peak_val_acc": o.history.peak_val_acc(),
        "test_acc": o.test_acc,
        "test_loss": o.test_loss,
        "params": o.net.spec.param_count(),
    });
    write_json(&cfg.out.join("summary.json"), &summary)?;
    println!(
        "trained {} epochs: peak train {:.4}, test {:.4}",
        cfg.epochs,
        o.history.peak_train_acc(),
        o.test_acc
    );
    Ok(())
}

fn checkpoint_dir(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.checkpoint.clone())
        .context("no checkpoint: pass --checkpoint or set `checkpoint`")
}

fn cmd_eval(c: &Common, ckpt: &Option<PathBuf>) -> Result<()> {
    let cfg = load_config(c)?;
    let net = checkpoint::load(&checkpoint_dir(ckpt, &cfg)?)?;
    let data = load_classification(&cfg)?;
    let acc = accuracy_on(&net, data.split(&cfg.split)?)?;
    println!("{} accuracy {acc:.4}", cfg.split);
    write_json(&cfg.out.join("eval.json"), &json!({ "split": cfg.split, "accuracy": acc }))
}

fn cmd_prune(c: &Common, ckpt: &Option<PathBuf>, method: &Option<String>) -> Result<()> {
    let cfg = load_config(c)?;
    let method = method
        .clone()
        .or_else(|| cfg.prune_method.clone())
        .unwrap_or_else(|| "l1".into());
    let data = load_classification(&cfg)?;
    let outcome = match method.as_str() {
        "l1" => prune_l1(&checkpoint::load(&checkpoint_dir(ckpt, &cfg)?)?, cfg.prune_ratio, &data.test)?,
        "snip" => {
            // An init-state checkpoint if given, else a fresh init.
            let init = match ckpt.clone().or_else(|| cfg.checkpoint.clone()) {
                Some(dir) => checkpoint::load(&dir)?,
                None => init_from_config(&cfg, &data.input_shape, data.classes)?,
            };
            prune_snip(&cfg, &init, &data, cfg.prune_keep)?
        }
        other => bail!("unknown prune method `{other}` (expected l1 or snip)"),
    };
    checkpoint::save(&outcome.net, &cfg.out.join("checkpoint"))?;
    write(&cfg.out.join("sparsity.csv"), &outcome.report.to_csv())?;
    let summary = json!({
        "method": method,
        "ratio": cfg.prune_ratio,
        "keep": cfg.prune_keep,
        "kept": outcome.report.kept,
        "total": outcome.report.total,
        "acc_before": outcome.before_acc,
        "acc_after": outcome.after_acc,
        "acc_trained": outcome.trained_acc,
    });
    write_json(&cfg.out.join("prune.json"), &summary)?;
    println!(
        "{method}: kept {}/{}; test accuracy {:.4} -> {:.4}{}",
        outcome.report.kept,
        outcome.report.total,
        outcome.before_acc,
        outcome.after_acc,
        outcome.trained_acc.map(|a| format!(" -> {a:.4} after training")).unwrap_or_default()
    );
    Ok(())
}

/// Returns whether every suite passed.
fn cmd_verify(c: &Common, suite: &str) -> Result<bool> {
    let seed = match (&c.config, c.seed) {
        (_, Some(s)) => s,
        (Some(_), None) => load_config(c)?.seed,
        (None, None) => 0,
    };
    let reports = run_suites(suite, seed)?;
    for r in &reports {
        println!("{}", r.line());
    }
    Ok(reports.iter().all(|r| r.passed))
}

/// Landscape settings: `example` (mp, linear or hybrid), `lo`, `hi`,
/// `points`, `out`.
fn cmd_landscape(c: &Common) -> Result<()> {
    let kv = match &c.config {
        Some(p) => parse_pairs(&std::fs::read_to_string(p)?)?,
        None => Default::default(),
    };
    let get = |k: &str, d: &str| kv.get(k).cloned().unwrap_or_else(|| d.to_string());
    let example = get("example", "mp");
    let lo: f64 = get("lo", "-8").parse().context("`lo`")?;
    let hi: f64 = get("hi", "8").parse().context("`hi`")?;
    let points: usize = get("points", "161").parse().context("`points`")?;
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from(get("out", "runs/landscape")));
    let (net, free, (x, y)) = match example.as_str() {
        "mp" => (mp_unit()?, ["0.W[0]", "0.W[1]"], perceptron_samples()),
        "linear" => (linear_unit()?, ["0.A[0]", "0.A[1]"], perceptron_samples()),
        "hybrid" => (hybrid_pair()?, ["0.W[0]", "0.W[3]"], hybrid_samples()),
        other => bail!("unknown landscape example `{other}` (expected mp, linear or hybrid)"),
    };
    let axis = Axis { lo, hi, points };
    let l = landscape_grid(&net, &free, [axis, axis], &x, &y)?;
    let path = out.join(format!("landscape_{example}.csv"));
    write(&path, &l.to_csv())?;
    let (r, col, v) = l.global_min();
    println!(
        "{example}: {} local minima, global grid minimum {v:.4} at ({r}, {col}); wrote {}",
        l.local_minima(1e-12),
        path.display()
    );
    Ok(())
}

fn cmd_regress(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let o = run_regression(&cfg, Some(&cfg.out))?;
    write_json(
        &cfg.out.join("summary.json"),
        &json!({ "test_mse": o.test_mse, "noise_floor": o.noise_floor, "epochs": cfg.epochs }),
    )?;
    println!("test MSE {:.4} (noise floor {:.4})", o.test_mse, o.noise_floor);
    Ok(())
}

/// Mean-shift settings: `model` (linear or mp), `batch_size`, `epochs`,
/// `lr`, `dim`, `seed`, `out`.
fn cmd_mean_shift(c: &Common) -> Result<()> {
    let kv = match &c.config {
        Some(p) => parse_pairs(&std::fs::read_to_string(p)?)?,
        None => Default::default(),
    };
    let model = match kv.get("model").map(String::as_str).unwrap_or("mp") {
        "linear" => ShiftModel::Linear,
        "mp" => ShiftModel::MaxPlus,
        other => bail!("unknown model `{other}` (expected linear or mp)"),
    };
    let mut cfg = ShiftConfig::new(model, 1);
    for (k, v) in &kv {
        match k.as_str() {
            "model" => {}
            "batch_size" => cfg.batch_size = v.parse().context("`batch_size`")?,
            "epochs" => cfg.epochs = v.parse().context("`epochs`")?,
            "lr" => cfg.lr = v.parse().context("`lr`")?,
            "dim" => cfg.dim = v.parse().context("`dim`")?,
            "seed" => cfg.seed = v.parse().context("`seed`")?,
            "out" => {}
            other => bail!("unknown key `{other}`"),
        }
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let out = c
        .out
        .clone()
        .or_else(|| kv.get("out").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs/mean-shift"));
    let history = mean_shift_run(&cfg)?;
    write(&out.join("mean_shift.csv"), &history_csv(&history))?;
    let last = history.last().expect("history starts with epoch 0");
    println!("final weight mean {:.3}, std {:.3}", last.mean, last.std);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::Train(c) => cmd_train(c)?,
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint)?,
        Command::Prune {
            common,
            checkpoint,
            method,
        } => cmd_prune(common, checkpoint, method)?,
        Command::Verify { common, suite } => return cmd_verify(common, suite),
        Command::Landscape(c) => cmd_landscape(c)?,
        Command::Regress(c) => cmd_regress(c)?,
        Command::MeanShift(c) => cmd_mean_shift(c)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
