use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dine::config::{Ablation, ExperimentConfig, Manifest, PredictorSource};
use dine::harness;
use dine::{Error, Result};
use dine_core::predictor::{DisclosureMode, TeacherEncoding};

#[derive(Parser)]
#[command(name = "dine", version, about = "Black-box domain adaptation by distillation and fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one source model per source domain.
    TrainSource {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve a source checkpoint over the NDJSON protocol.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        disclosure: DisclosureArgs,
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
    },
    /// Query source predictors once per target sample and store the answers.
    CachePredictions {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        predictors: PredictorArgs,
        #[command(flatten)]
        disclosure: DisclosureArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distil and fine-tune a target model for every seed.
    Adapt {
        /// Config file; ignored when --manifest is given.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Rerun a previous adaptation exactly.
        #[arg(long, conflicts_with = "config")]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        predictors: PredictorArgs,
        #[command(flatten)]
        disclosure: DisclosureArgs,
        #[command(flatten)]
        ablation: AblationArgs,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a distilled target checkpoint with the MI objective only.
    FinetuneOnly {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare finished runs.
    Report {
        runs: Vec<PathBuf>,
        /// Write loss and accuracy curves as CSV.
        #[arg(long)]
        curves: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Full,
    TopR,
    Hard,
}

#[derive(Args)]
struct DisclosureArgs {
    /// What the source predictors reveal.
    #[arg(long, value_enum)]
    disclosure: Option<Mode>,
    /// Pairs disclosed in top-r mode.
    #[arg(long, default_value_t = 1)]
    top: usize,
}

impl DisclosureArgs {
    fn mode(&self) -> Option<DisclosureMode> {
        self.disclosure.map(|m| match m {
            Mode::Full => DisclosureMode::Full,
            Mode::TopR => DisclosureMode::TopR(self.top),
            Mode::Hard => DisclosureMode::Hard,
        })
    }
}

#[derive(Args)]
struct PredictorArgs {
    #[arg(long, num_args = 1.., group = "predictor_source")]
    checkpoints: Vec<PathBuf>,
    #[arg(long, num_args = 1.., group = "predictor_source")]
    caches: Vec<PathBuf>,
    #[arg(long, num_args = 1.., group = "predictor_source")]
    endpoints: Vec<String>,
}

impl PredictorArgs {
    fn source(&self) -> Option<PredictorSource> {
        if !self.checkpoints.is_empty() {
            Some(PredictorSource::Checkpoints(self.checkpoints.clone()))
        } else if !self.caches.is_empty() {
            Some(PredictorSource::Caches(self.caches.clone()))
        } else if !self.endpoints.is_empty() {
            Some(PredictorSource::Endpoints(self.endpoints.clone()))
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Teacher {
    Hard,
    Ls,
    Adals,
}

#[derive(Args)]
struct AblationArgs {
    #[arg(long)]
    drop_mi: bool,
    #[arg(long)]
    drop_mix: bool,
    #[arg(long)]
    drop_ft: bool,
    #[arg(long, value_enum)]
    teacher: Option<Teacher>,
    /// Truncation level for the adals teacher.
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
}

impl AblationArgs {
    fn ablation(&self) -> Ablation {
        let teacher = match (self.teacher, self.r) {
            (Some(Teacher::Hard), _) => Some(TeacherEncoding::Hard),
            (Some(Teacher::Ls), _) => Some(TeacherEncoding::Ls),
            (Some(Teacher::Adals), r) => Some(TeacherEncoding::AdaLs(r.unwrap_or(1))),
            (None, Some(r)) => Some(TeacherEncoding::AdaLs(r)),
            (None, None) => None,
        };
        Ablation {
            drop_mi: self.drop_mi,
            drop_mix: self.drop_mix,
            drop_ft: self.drop_ft,
            teacher,
            gamma: self.gamma,
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainSource { config, out } => {
            let cfg = load_config(&config)?;
            for (m, acc) in harness::cmd_train_source(&cfg, &out)?.iter().enumerate() {
                println!("source-{m} test accuracy {acc:.2}");
            }
        }
        Command::Serve { checkpoint, disclosure, addr } => {
            let mode = disclosure.mode().unwrap_or(DisclosureMode::TopR(1));
            let server = harness::cmd_serve(&checkpoint, mode, &addr)?;
            println!("serving on {}", server.local_addr());
            server.wait();
        }
        Command::CachePredictions { config, predictors, disclosure, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(mode) = disclosure.mode() {
                cfg.disclosure = mode;
            }
            let source = predictors
                .source()
                .ok_or_else(|| Error::Usage("give --checkpoints, --caches or --endpoints".into()))?;
            for p in harness::cmd_cache_predictions(&cfg, &source, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Adapt { config, manifest, predictors, disclosure, ablation, seeds, name, out } => {
            let manifest = match manifest {
                Some(path) => Manifest::load(&path)?,
                None => {
                    let mut cfg = load_config(&config)?;
                    if let Some(mode) = disclosure.mode() {
                        cfg.disclosure = mode;
                    }
                    cfg = cfg.with_ablation(&ablation.ablation());
                    if let Some(s) = seeds {
                        cfg.seeds = s;
                    }
                    if let Some(n) = name {
                        cfg.name = n;
                    }
                    let source = predictors
                        .source()
                        .ok_or_else(|| Error::Usage("give --checkpoints, --caches or --endpoints".into()))?;
                    Manifest::new("adapt", source, cfg)
                }
            };
            let report = harness::cmd_adapt(&manifest, &out)?;
            print!("{}", harness::render_table(&[(out.clone(), Some(report))]));
        }
        Command::FinetuneOnly { config, checkpoint, out } => {
            let cfg = load_config(&config)?;
            let (before, after) = harness::cmd_finetune_only(&cfg, &checkpoint, &out)?;
            println!("accuracy {before:.2} -> {after:.2}");
        }
        Command::Report { runs, curves } => {
            harness::cmd_report(&runs, curves.as_deref(), std::io::stdout())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
