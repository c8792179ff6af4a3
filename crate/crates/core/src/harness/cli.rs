use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use super::config::ExperimentConfig;
use super::pipeline::{attack_table, run_pipeline, Lab};
use crate::error::{Error, Result};

/// Desk-scale one-shot label-only membership inference lab.
#[derive(Debug, Parser)]
#[command(name = "oslo-lab", version)]
struct Cli {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; OSLO_LAB_JOBS takes precedence.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate (or load) the dataset and the split plan.
    GenData,
    /// Train the target, source and validation models.
    Train,
    /// Run an attack against the target.
    Attack {
        #[command(subcommand)]
        attack: AttackCommand,
    },
    /// Retrain the target under each defense and re-run OSLO against it.
    Defend,
    /// Compute metrics for finished attacks and write summary.json.
    Evaluate,
    /// Replay the archived examples at every configured tau.
    SweepTau,
    /// Comparative analyses, Markdown report and plot CSVs.
    Report,
    /// Every stage in order.
    Run,
}

#[derive(Debug, Subcommand)]
enum AttackCommand {
    Oslo,
    Baseline { name: BaselineName },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BaselineName {
    Gaussian,
    Augmentation,
    Shadow,
    GlobalThreshold,
}

impl BaselineName {
    fn as_str(self) -> &'static str {
        match self {
            BaselineName::Gaussian => "gaussian",
            BaselineName::Augmentation => "augmentation",
            BaselineName::Shadow => "shadow",
            BaselineName::GlobalThreshold => "global-threshold",
        }
    }
}

fn configure(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn jobs(cli: &Cli) -> Result<Option<usize>> {
    match std::env::var("OSLO_LAB_JOBS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::config("OSLO_LAB_JOBS", format!("`{v}` is not a thread count"))),
        Err(_) => Ok(cli.jobs),
    }
}

fn dispatch(cli: &Cli, cfg: ExperimentConfig) -> Result<()> {
    if let Command::Run = cli.command {
        let m = run_pipeline(cfg.clone())?;
        let lab = Lab::open(cfg)?;
        let summary = std::fs::read_to_string(lab.path("summary.json"))?;
        print!("{}", attack_table(&serde_json::from_str(&summary)?));
        println!("{} artifacts written to {}", m.artifacts.len(), lab.root.display());
        return Ok(());
    }
    let mut lab = Lab::open(cfg)?;
    match &cli.command {
        Command::GenData => {
            let (d, p) = lab.stage("gen-data", |l| l.gen_data())?;
            println!("{} samples, {} members / {} non-members in the panel", d.len(), p.eval_members.len(), p.eval_nonmembers.len());
        }
        Command::Train => {
            let (d, p) = lab.load_data()?;
            let m = lab.stage("train", |l| l.train_models(&d, &p))?;
            let test = d.subset(&p.holdout);
            let all: Vec<usize> = (0..test.len()).collect();
            println!("target test accuracy {:.3}", m.target.accuracy(&test, &all)?);
        }
        Command::Attack { attack } => {
            let (d, p) = lab.load_data()?;
            let m = lab.load_models()?;
            match attack {
                AttackCommand::Oslo => {
                    let r = lab.stage("attack-oslo", |l| l.attack_oslo(&d, &p, &m))?;
                    let flagged = r.single_shot.iter().filter(|x| x.member).count();
                    println!("{flagged} of {} panel samples flagged as members", r.single_shot.len());
                }
                AttackCommand::Baseline { name } => {
                    let n = name.as_str();
                    let s = lab.stage(&format!("baseline-{n}"), |l| l.attack_baseline(n, &d, &p, &m.target))?;
                    println!("{n}: scored {} samples", s.len());
                }
            }
        }
        Command::Defend => {
            let (d, p) = lab.load_data()?;
            let rows = lab.stage("defend", |l| l.defend(&d, &p))?;
            print!("{}", crate::defenses::defense_csv(&rows));
        }
        Command::SweepTau => {
            let m = lab.load_models()?;
            let curve = lab.stage("sweep-tau", |l| l.sweep_tau(&m.target))?;
            print!("{}", curve.to_csv("tau"));
        }
        Command::Evaluate => {
            if !lab.path("eval/oslo_sweep.json").exists() {
                let m = lab.load_models()?;
                lab.stage("sweep-tau", |l| l.sweep_tau(&m.target))?;
            }
            let s = lab.stage("evaluate", |l| l.evaluate())?;
            print!("{}", attack_table(&s));
        }
        Command::Report => {
            let (d, p) = lab.load_data()?;
            let m = lab.load_models()?;
            lab.stage("report", |l| l.report(&d, &p, &m))?;
            println!("{}", lab.path("analysis/report.md").display());
        }
        Command::Run => unreachable!("handled above"),
    }
    lab.save_manifest()
}

/// Entry point behind the binary. Returns the process exit code: 0 on
/// success, 2 for usage errors, 1 for configuration errors and 3 when a
/// stage fails.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    let cfg = match configure(&cli).and_then(|c| c.validate().map(|_| c)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return 1;
        }
    };
    match jobs(&cli) {
        Ok(Some(n)) if n > 0 => {
            // a second call in the same process keeps the first pool
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        Ok(_) => {}
        Err(e) => {
            eprintln!("config error: {e}");
            return 1;
        }
    }
    match dispatch(&cli, cfg) {
        Ok(()) => 0,
        Err(e @ Error::Config { .. }) => {
            eprintln!("config error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            3
        }
    }
}
