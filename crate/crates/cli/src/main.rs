//! `dial` command-line front end.
//!
//! Every task reads an optional config file, applies `--section.key value`
//! overrides (`--seed`, `--out`, `--restarts` and `--batch` are short for
//! the `run.*` keys), writes `run.lock` into the output directory and then runs.
//! Exit codes: 0 success, 1 usage/config/IO error, 2 numerical failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dial::attack::AttackSpec;
use dial::checkpoint::{load_checkpoint, save_checkpoint, write_atomic};
use dial::config::{parse_config, DataSpec, RunConfig, SplitName};
use dial::data::{gen_synthetic, load_mnist, DatasetHandle, Split, SyntheticKind};
use dial::eval::{
    black_box_eval, corrupt, craft, dump_representations, evaluate, model_feature_invariance, BoundInstance,
    Corruption, EvalReport, FeatureScaling,
};
use dial::report::{read_history, summary_text, write_history, write_report};
use dial::train::Trainer;
use dial::{ArchSpec, Error, ModelParams, Result};

#[derive(Parser, Debug)]
#[command(name = "dial", version, about = "Domain-invariant adversarial training lab")]
struct Cli {
    #[command(subcommand)]
    task: Task,
}

#[derive(Subcommand, Debug)]
enum Task {
    /// Train a model (optionally several restarts) and evaluate it on the test split.
    Train(TaskArgs),
    /// White-box or, with `model.surrogate`, black-box attack report.
    Attack(TaskArgs),
    /// Natural and robust accuracy with per-class breakdown.
    Eval(TaskArgs),
    /// Accuracy under synthetic corruptions.
    Corrupt(TaskArgs),
    /// Feature-invariance statistics and a representation dump.
    Diagnose(TaskArgs),
    /// Brute-force the adversarial risk bound on random toy instances.
    Bound(TaskArgs),
}

#[derive(Args, Debug)]
struct TaskArgs {
    /// Config file (`key = value` lines under `[section]` headers).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Overrides, e.g. `--dial.lambda 1 --train.epochs 5`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--section.key VALUE")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.task) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn run(task: Task) -> Result<()> {
    let (name, args) = match &task {
        Task::Train(a) => ("train", a),
        Task::Attack(a) => ("attack", a),
        Task::Eval(a) => ("eval", a),
        Task::Corrupt(a) => ("corrupt", a),
        Task::Diagnose(a) => ("diagnose", a),
        Task::Bound(a) => ("bound", a),
    };
    let (_, cfg) = parse_config(args.config.as_deref(), &args.overrides)?;
    cfg.check_paths()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Io {
        path: cfg.out_dir.clone(),
        source: e,
    })?;
    write_atomic(&cfg.out_dir.join("run.lock"), format!("# task = {name}\n{}", cfg.to_text()).as_bytes())?;
    match task {
        Task::Train(_) => train(&cfg),
        Task::Attack(_) => attack(&cfg),
        Task::Eval(_) => eval(&cfg),
        Task::Corrupt(_) => corrupt_task(&cfg),
        Task::Diagnose(_) => diagnose(&cfg),
        Task::Bound(_) => bound(&cfg),
    }
}

fn load_data(cfg: &RunConfig) -> Result<DatasetHandle> {
    match &cfg.data {
        DataSpec::Mnist { path } => load_mnist(path),
        DataSpec::Synthetic { kind, n, noise, classes, seed } => {
            gen_synthetic(SyntheticKind::parse(kind, *classes)?, *n, *noise, *seed)
        }
    }
}

fn eval_split(cfg: &RunConfig, data: &DatasetHandle) -> Result<Split> {
    let split = match cfg.split {
        SplitName::Train => &data.train,
        SplitName::Val => &data.val,
        SplitName::Test => &data.test,
    };
    match cfg.limit {
        Some(n) if n < split.len() => split.range(0, n),
        _ => Ok(split.clone()),
    }
}

fn arch(cfg: &RunConfig, data: &DatasetHandle) -> Result<ArchSpec> {
    let arch = ArchSpec::preset(&cfg.preset, data.num_classes).map_err(|e| Error::Config(e.to_string()))?;
    if arch.input_shape != data.input_shape {
        return Err(Error::Config(format!(
            "preset `{}` expects inputs {:?}, dataset has {:?}",
            cfg.preset, arch.input_shape, data.input_shape
        )));
    }
    Ok(arch)
}

fn load_model(cfg: &RunConfig, data: &DatasetHandle) -> Result<ModelParams> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("missing required key `model.checkpoint`".into()))?;
    Ok(load_checkpoint(path, &arch(cfg, data)?)?.0)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn save_eval(dir: &Path, report: &EvalReport) -> Result<()> {
    write_report(report, dir.join("report.csv"))?;
    let text = summary_text(report);
    write_text(&dir.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let arch = arch(cfg, &data)?;
    let test = eval_split(&RunConfig { split: SplitName::Test, ..cfg.clone() }, &data)?;
    let mut finals = Vec::new();
    for restart in 0..cfg.restarts {
        let dir = if cfg.restarts == 1 {
            cfg.out_dir.clone()
        } else {
            cfg.out_dir.join(format!("restart-{restart}"))
        };
        fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
        let seed = cfg.seed + restart as u64;
        let config = dial::train::TrainConfig { seed, ..cfg.train.clone() };
        let (mut trainer, mut history) = match &cfg.resume {
            Some(path) => {
                let (model, opt, epoch) = load_checkpoint(path, &arch)?;
                let opt = opt.ok_or_else(|| Error::format(path, "checkpoint has no optimizer state to resume from"))?;
                let lambda = match config.objective {
                    dial::loss::Objective::Dial(c) => c.lambda,
                    dial::loss::Objective::Trades { lambda } | dial::loss::Objective::Mart { lambda } => lambda,
                    _ => 1.0,
                };
                let prior = dir.join("history.csv");
                let history = if prior.exists() {
                    read_history(&prior, lambda)?.into_iter().filter(|r| r.epoch < epoch).collect()
                } else {
                    Vec::new()
                };
                (Trainer::resume(config, model, opt, epoch)?, history)
            }
            None => (Trainer::new(config, ModelParams::build(&arch, seed)?)?, Vec::new()),
        };
        while !trainer.is_done() {
            let record = trainer.run_epoch(&data.train, &data.val)?.clone();
            eprintln!(
                "restart {restart} epoch {:>3}  lr {:.4}  r_t {:.4}  loss {:.4}  train nat {:.4} rob {:.4}  domain {:.4}  val nat {:.4} rob {:.4}",
                record.epoch,
                record.lr,
                record.r_t,
                record.loss.total,
                record.train_nat_acc,
                record.train_rob_acc,
                record.domain_acc,
                record.val_nat_acc,
                record.val_rob_acc
            );
            history.push(record.clone());
            write_history(&history, dir.join("history.csv"))?;
            save_checkpoint(&trainer.model, Some(&trainer.optimizer), trainer.epoch, dir.join("last.ckpt"))?;
            if let Some((best_epoch, _, best)) = &trainer.best {
                if *best_epoch == record.epoch {
                    save_checkpoint(best, None, trainer.epoch, dir.join("best.ckpt"))?;
                }
            }
        }
        let report = evaluate(&trainer.model, &test, &cfg.attacks, seed, cfg.batch)?;
        save_eval(&dir, &report)?;
        finals.push(report);
    }
    if cfg.restarts > 1 {
        let text = restart_summary(&finals);
        write_text(&cfg.out_dir.join("summary.csv"), &text)?;
        print!("{text}");
    }
    Ok(())
}

/// One row per restart plus mean and sample-std rows.
fn restart_summary(reports: &[EvalReport]) -> String {
    let mut out = String::from("restart,natural_acc");
    for a in &reports[0].attacks {
        let _ = write!(out, ",{}", a.name);
    }
    out.push('\n');
    let rows: Vec<Vec<f64>> = reports
        .iter()
        .map(|r| std::iter::once(r.natural_acc).chain(r.attacks.iter().map(|a| a.robust_acc)).collect())
        .collect();
    for (i, row) in rows.iter().enumerate() {
        let _ = writeln!(out, "{i},{}", join(row));
    }
    let n = rows.len() as f64;
    let cols = rows[0].len();
    let mean: Vec<f64> = (0..cols).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..cols)
        .map(|j| (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
        .collect();
    let _ = writeln!(out, "mean,{}", join(&mean));
    let _ = writeln!(out, "std,{}", join(&std));
    out
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn attack(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let model = load_model(cfg, &data)?;
    let split = eval_split(cfg, &data)?;
    let report = match &cfg.surrogate {
        None => evaluate(&model, &split, &cfg.attacks, cfg.seed, cfg.batch)?,
        Some(path) => {
            let surrogate: ModelParams = load_checkpoint(path, &arch(cfg, &data)?)?.0;
            let mut report = evaluate(&model, &split, &[], cfg.seed, cfg.batch)?;
            for a in &cfg.attacks {
                report.attacks.push(black_box_eval(&surrogate, &model, &split, a, cfg.seed, cfg.batch)?);
            }
            report
        }
    };
    save_eval(&cfg.out_dir, &report)
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let model = load_model(cfg, &data)?;
    let report = evaluate(&model, &eval_split(cfg, &data)?, &cfg.attacks, cfg.seed, cfg.batch)?;
    if let Some(acc) = report.domain_head_acc() {
        println!("domain head acc {acc:.4}");
    }
    save_eval(&cfg.out_dir, &report)
}

fn corrupt_task(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let model = load_model(cfg, &data)?;
    let split = eval_split(cfg, &data)?;
    let kinds: Vec<Corruption> = cfg.corrupt_kind.map_or(Corruption::ALL.to_vec(), |k| vec![k]);
    let severities: Vec<usize> = cfg.corrupt_severity.map_or((1..=5).collect(), |s| vec![s]);
    let (lo, hi) = cfg.attacks.first().map_or((0.0, 1.0), |a| (a.spec.lo, a.spec.hi));
    let mut out = String::from("kind,severity,parameter,accuracy\n");
    for kind in kinds {
        for &s in &severities {
            let x = corrupt(&split.x, kind, s, cfg.seed, lo, hi)?;
            let acc = dial::train::natural_accuracy(&model, &Split::new(x, split.y.clone())?, cfg.batch)?;
            let _ = writeln!(out, "{},{s},{},{acc}", kind.name(), kind.parameter(s));
        }
    }
    write_text(&cfg.out_dir.join("corruption.csv"), &out)?;
    print!("{out}");
    Ok(())
}

fn diagnose(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let model = load_model(cfg, &data)?;
    let split = eval_split(cfg, &data)?;
    let spec: AttackSpec = cfg
        .attacks
        .first()
        .map(|a| a.spec)
        .ok_or_else(|| Error::Config("diagnose needs an attack".into()))?;
    let x_adv = craft(&model, &split, &spec, cfg.seed, cfg.batch)?;
    let scaling = if cfg.diagnose_max_scaling { FeatureScaling::MaxNormalized } else { FeatureScaling::Raw };
    let stats = model_feature_invariance(&model, &split.x, &x_adv, scaling)?;
    let mut out = String::from("feature,mean_diff,std_diff\n");
    for (j, (m, s)) in stats.mean_diff.iter().zip(&stats.std_diff).enumerate() {
        let _ = writeln!(out, "{j},{m},{s}");
    }
    write_text(&cfg.out_dir.join("features.csv"), &out)?;
    let adv = cfg.diagnose_adversarial.then_some(&spec);
    dump_representations(&model, &split, cfg.diagnose_which, adv, cfg.seed, cfg.out_dir.join("representations.csv"))?;
    let d = stats.mean_diff.len() as f64;
    println!(
        "features {}  mean |mean diff| {:.6}  mean |std diff| {:.6}",
        stats.mean_diff.len(),
        stats.mean_diff.iter().sum::<f64>() / d,
        stats.std_diff.iter().sum::<f64>() / d
    );
    Ok(())
}

fn bound(cfg: &RunConfig) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = String::from("instance,adv,natural,trade_off,discrepancy,bound,adv_risk,holds\n");
    let mut violations = 0;
    for i in 0..cfg.bound_instances {
        let inst = BoundInstance::random(&mut rng, cfg.bound_points, cfg.bound_grid, cfg.bound_shift)?;
        let t = inst.terms()?;
        let holds = t.holds();
        violations += usize::from(!holds);
        let _ = writeln!(
            out,
            "{i},{},{},{},{},{},{},{holds}",
            t.adv,
            t.natural,
            t.trade_off,
            t.discrepancy,
            t.bound(),
            t.adv_risk
        );
    }
    write_text(&cfg.out_dir.join("bound.csv"), &out)?;
    println!("{} instances, {violations} violations", cfg.bound_instances);
    Ok(())
}
