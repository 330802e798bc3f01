use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use apn_core::harness::gradcheck::{gradcheck, Scope};
use apn_core::harness::{self, ExperimentConfig, ReproRecord, Variant};
use apn_core::pyramid::ApnModel;
use apn_core::synthdg::{generate_benchmark, io::write_dataset};
use apn_core::{ApnError, Result};

#[derive(Parser)]
#[command(name = "apn", version, about = "Adversarial pyramid network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// erm, apn, apn+ada, apn+ada* or global-ada.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads; `APN_DETERMINISTIC=1` forces 1.
    #[arg(long)]
    parallel: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the benchmark to `<out>/dataset.vdg` plus its manifest.
    GenData(Common),
    /// Train an ensemble and write metrics, checkpoints and `run.json`.
    Train(Common),
    /// Re-evaluate the checkpoints recorded in `<out>/run.json`.
    Eval(Common),
    /// Finite-difference gradient checks; exits nonzero on any failure.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// kernels, attention, pyramid or ada; repeatable, default all.
        #[arg(long)]
        scope: Vec<String>,
        /// Also check the f32 path.
        #[arg(long)]
        f32: bool,
    },
    /// Train every variant over a list of seeds and write `ablation.csv`.
    Ablation {
        #[command(flatten)]
        common: Common,
        /// Number of consecutive seeds starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Comma-separated variants; default all.
        #[arg(long)]
        variants: Option<String>,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(v) = &c.variant {
        cfg.variant = v.parse()?;
    }
    if let Some(p) = c.parallel {
        cfg.parallel = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let mut spec = cfg.benchmark.clone();
    if let Some(s) = c.seed {
        spec.seed = s;
    }
    let b = generate_benchmark(&spec)?;
    std::fs::create_dir_all(&c.out)?;
    let path = c.out.join("dataset.vdg");
    write_dataset(&b, &path)?;
    println!(
        "wrote {} ({} train, {} val, {} target domains)",
        path.display(),
        b.source_train.len(),
        b.source_val.len(),
        b.targets.len()
    );
    Ok(())
}

fn train(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let r = harness::run_experiment(&cfg, Some(&c.out))?;
    for m in &r.members {
        println!(
            "member {} gamma={} best_epoch={} val={:.4}",
            m.index, m.gamma, m.best_epoch, m.best_val_accuracy
        );
    }
    for (d, a) in &r.ensemble_target {
        println!("ensemble target:{d} accuracy={a:.4}");
    }
    println!("ensemble mean target accuracy={:.4}", r.mean_target_accuracy());
    Ok(())
}

fn eval(c: &Common) -> Result<()> {
    let record: ReproRecord = serde_json::from_slice(&std::fs::read(c.out.join("run.json"))?)?;
    let cfg = match &c.config {
        Some(_) => load_config(c)?,
        None => record.config.clone(),
    };
    let paths: Vec<&Path> = record.checkpoints.iter().flatten().map(PathBuf::as_path).collect();
    if paths.is_empty() {
        return Err(ApnError::Input("run.json lists no checkpoints".into()));
    }
    let models = paths.iter().map(|p| harness::load_model(&cfg.model, p)).collect::<Result<Vec<ApnModel>>>()?;
    let b = match &cfg.dataset {
        Some(p) => apn_core::synthdg::io::read_dataset(p)?,
        None => generate_benchmark(&cfg.benchmark)?,
    };
    let (va, _) = harness::evaluate_ensemble(&models, &b.source_val)?;
    println!("val accuracy={va:.4}");
    let mut w = csv::Writer::from_path(c.out.join("eval.csv"))?;
    w.write_record(["split", "accuracy", "loss"])?;
    for (d, clips) in &b.targets {
        let (a, l) = harness::evaluate_ensemble(&models, clips)?;
        println!("target:{d} accuracy={a:.4}");
        w.write_record([format!("target:{d}"), a.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn run_gradcheck(scopes: &[String], f32: bool, seed: u64) -> Result<bool> {
    let scopes: Vec<Scope> = if scopes.is_empty() {
        Scope::ALL.to_vec()
    } else {
        scopes.iter().map(|s| s.parse()).collect::<Result<_>>()?
    };
    let report = gradcheck(&scopes, f32, seed)?;
    print!("{report}");
    Ok(report.passed())
}

fn run_ablation(c: &Common, seeds: u64, variants: Option<&str>) -> Result<()> {
    let cfg = load_config(c)?;
    let variants: Vec<Variant> = match variants {
        Some(v) => v.split(',').map(str::parse).collect::<Result<_>>()?,
        None => Variant::ALL.to_vec(),
    };
    let seed_list: Vec<u64> = (0..seeds.max(1)).map(|i| cfg.seed + i).collect();
    let b = match &cfg.dataset {
        Some(p) => apn_core::synthdg::io::read_dataset(p)?,
        None => generate_benchmark(&cfg.benchmark)?,
    };
    let rows = harness::ablation(&cfg, &b, &variants, &seed_list, Some(&c.out))?;
    for v in &variants {
        let accs: Vec<f64> = rows.iter().filter(|r| r.variant == v.name()).map(|r| r.mean_target_accuracy).collect();
        let mean = accs.iter().sum::<f64>() / accs.len().max(1) as f64;
        println!("{:<11} mean target accuracy={mean:.4} over {} seeds", v.name(), accs.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train(c) => train(c),
        Command::Eval(c) => eval(c),
        Command::Gradcheck { common, scope, f32 } => match run_gradcheck(scope, *f32, common.seed.unwrap_or(0)) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("gradient check failed");
                return ExitCode::FAILURE;
            }
            Err(e) => Err(e),
        },
        Command::Ablation { common, seeds, variants } => run_ablation(common, *seeds, variants.as_deref()),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
