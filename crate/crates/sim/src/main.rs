use std::path::PathBuf;
use std::process::ExitCode;

use biobackdoor::pipeline::{Arm, SurrogateKind};
use biobackdoor::stages::{self, DetectorChoice, ModeChoice, Run, Stage};
use biobackdoor::{ExperimentConfig, HarnessError, Result};
use biobackdoor_core::matchers::{MatcherKind, WeightScheme};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Template-poisoning simulator for self-updating biometric matchers.
#[derive(Debug, Parser)]
#[command(name = "biobackdoor", version)]
struct Cli {
    /// Run directory; every artifact and the manifest live under it.
    #[arg(long, global = true, default_value = "run", visible_alias = "data")]
    out: PathBuf,
    /// Master seed. `gen-data` stores it; later stages must match it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for pair sweeps (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic population (or ingest embeddings) into a new run.
    GenData {
        /// TOML configuration; defaults reproduce the frozen benchmark.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Embedding CSV to ingest instead of generating raw samples.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Calibrate a matcher's threshold at its equal error rate.
    Calibrate(ArmArgs),
    /// Fit the injection heuristic on the heuristic pairs.
    FitHeuristic {
        #[command(flatten)]
        arm: ArmArgs,
        /// Heuristic pairs (default from the configuration).
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Run the poisoning attack over the attack pairs.
    Attack {
        #[command(flatten)]
        arm: ArmArgs,
        #[arg(long, value_enum, default_value = "heuristic")]
        mode: ModeChoice,
        /// Surrogate extractor for `--mode transfer`.
        #[arg(long, value_enum)]
        surrogate: Option<SurrogateKind>,
        /// Attack pairs (default from the configuration).
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Evaluate a countermeasure on the runs of an earlier attack.
    Detect {
        #[arg(long, value_enum, default_value = "cosine")]
        detector: DetectorChoice,
        #[command(flatten)]
        arm: ArmArgs,
        /// Mode of the attack to evaluate.
        #[arg(long, value_enum, default_value = "oracle")]
        mode: ModeChoice,
        #[arg(long, value_enum)]
        surrogate: Option<SurrogateKind>,
    },
    /// Aggregate every attack of the run into success tables and trajectories.
    Report,
    /// Re-execute the stages of a manifest into the `--out` directory.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MatcherArg {
    Centroid,
    Maximum,
    Svm,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum WeightsArg {
    Flat,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, Args)]
struct ArmArgs {
    #[arg(long, value_enum, default_value = "centroid")]
    matcher: MatcherArg,
    #[arg(long, value_enum, default_value = "flat")]
    weights: WeightsArg,
    /// ν of the one-class SVM.
    #[arg(long, default_value_t = 0.5)]
    nu: f64,
}

impl ArmArgs {
    fn arm(&self) -> Result<Arm> {
        let kind = match self.matcher {
            MatcherArg::Centroid => MatcherKind::Centroid,
            MatcherArg::Maximum => MatcherKind::Maximum,
            MatcherArg::Svm => {
                if !(self.nu > 0.0 && self.nu <= 1.0) {
                    return Err(HarnessError::Config(format!(
                        "nu = {} outside (0, 1]",
                        self.nu
                    )));
                }
                MatcherKind::OcSvm { nu: self.nu }
            }
        };
        let scheme = match self.weights {
            WeightsArg::Flat => WeightScheme::Flat,
            WeightsArg::Sigmoid => WeightScheme::Sigmoid,
        };
        Ok(Arm { kind, scheme })
    }
}

fn check_seed(cli: &Cli) -> Result<()> {
    let Some(seed) = cli.seed else {
        return Ok(());
    };
    let m = Run::new(&cli.out).manifest()?;
    if m.seed != seed {
        return Err(HarnessError::Config(format!(
            "--seed {seed} differs from the run's seed {}",
            m.seed
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
    }
    let stage = match &cli.command {
        Command::GenData { config, embeddings } => {
            let mut cfg = match config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::default(),
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let files = stages::gen_data(&cli.out, &cfg, embeddings.as_deref())?;
            print_files(&cli, &files);
            return Ok(());
        }
        Command::Replay { manifest } => {
            let text = biobackdoor::io::read_artifact(manifest, "gen-data")?;
            let m = serde_json::from_str(&text).map_err(|e| HarnessError::Parse {
                path: manifest.clone(),
                line: e.line() as u64,
                message: e.to_string(),
            })?;
            return stages::replay(&m, &cli.out);
        }
        Command::Calibrate(a) => Stage::Calibrate { arm: a.arm()? },
        Command::FitHeuristic { arm, pairs } => Stage::FitHeuristic {
            arm: arm.arm()?,
            pairs: *pairs,
        },
        Command::Attack {
            arm,
            mode,
            surrogate,
            pairs,
        } => Stage::Attack {
            arm: arm.arm()?,
            mode: *mode,
            surrogate: *surrogate,
            pairs: *pairs,
        },
        Command::Detect {
            detector,
            arm,
            mode,
            surrogate,
        } => Stage::Detect {
            detector: *detector,
            arm: arm.arm()?,
            mode: *mode,
            surrogate: *surrogate,
        },
        Command::Report => Stage::Report,
    };
    check_seed(&cli)?;
    let files = stages::execute(&cli.out, &stage)?;
    print_files(&cli, &files);
    Ok(())
}

fn print_files(cli: &Cli, files: &[String]) {
    for f in files {
        println!("{}", cli.out.join(f).display());
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
