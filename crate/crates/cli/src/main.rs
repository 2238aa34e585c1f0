use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dpfrl_core::harness::{
    self, ablation_verdicts, sweep_verdicts, verdict_text, Arm, ExperimentSpec, ABLATION_NOISE_LEN, DEFAULT_SEEDS,
    SWEEP_NOISE_LENS,
};
use dpfrl_core::nets::{Checkpoint, Variant};
use dpfrl_core::trainer::{self, TrainConfig, GRADCHECK_TOLERANCE};
use dpfrl_core::Result;

#[derive(Parser)]
#[command(name = "dpfrl", version, about = "Particle-filter RL on Mountain Hike")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; writes config echo, metrics and checkpoints to --out.
    Train {
        /// TOML config; every key is optional.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[arg(long, required_unless_present = "random")]
        checkpoint: Option<PathBuf>,
        /// Config to rebuild the model from; defaults to the one stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Override the observation noise length.
        #[arg(long)]
        noise_len: Option<usize>,
        #[arg(long, default_value_t = 1000)]
        seed: u64,
        /// Evaluate a random Gaussian policy instead of a checkpoint.
        #[arg(long)]
        random: bool,
    },
    /// DPFRL and the GRU baseline over noise lengths and seeds.
    Sweep {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, value_delimiter = ',', default_values_t = SWEEP_NOISE_LENS)]
        noise_lens: Vec<usize>,
    },
    /// DPFRL against its ablations at one noise length.
    Ablate {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, default_value_t = ABLATION_NOISE_LEN)]
        noise_len: usize,
    },
    /// Finite-difference check of the whole training loss; prints the max relative error.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Learning-curve CSV and SVG for every run under a directory.
    Plot { dir: PathBuf },
}

#[derive(Args)]
struct ExperimentArgs {
    /// Base TOML config shared by every run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "experiments")]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SEEDS)]
    seeds: Vec<u64>,
    /// List the runs and their state without training.
    #[arg(long)]
    dry_run: bool,
    /// Summarize existing runs without training missing ones.
    #[arg(long)]
    summarize_only: bool,
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    let cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.with_env_overrides()
}

fn run_experiment(spec: &ExperimentSpec, args: &ExperimentArgs) -> Result<()> {
    if args.dry_run {
        for run in spec.runs()? {
            println!("{} {:?}", run.dir.display(), harness::run_state(&run)?);
        }
        return Ok(());
    }
    if !args.summarize_only {
        let report = harness::execute(spec)?;
        log::info!("trained {} runs, {} already complete", report.trained, report.skipped);
    }
    let summary = harness::summarize(spec)?;
    let verdicts = match spec.name.as_str() {
        "ablation" => ablation_verdicts(&summary, spec.base.k, spec.noise_lens[0]),
        _ => {
            let from = *spec.noise_lens.iter().min().expect("noise lengths");
            let to = *spec.noise_lens.iter().max().expect("noise lengths");
            sweep_verdicts(
                &summary,
                Arm::new(Variant::Dpfrl, spec.base.k),
                Arm::new(Variant::Gru, 1),
                from,
                to,
            )
        }
    };
    let table = harness::write_summary(spec, &summary, &verdict_text(&verdicts))?;
    print!("{table}");
    match harness::plot_experiment(spec) {
        Ok(out) => log::info!("wrote {}", out.files[1].display()),
        Err(e) => log::warn!("no figure: {e}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let s = trainer::train(&cfg, &out)?;
            println!(
                "{} updates, {} episodes, final mean return {}",
                s.updates,
                s.episodes,
                s.final_mean_return.map_or("n/a".into(), |r| format!("{r:.3}"))
            );
        }
        Command::Eval {
            checkpoint,
            config,
            episodes,
            noise_len,
            seed,
            random,
        } => {
            let mut cfg = match (&config, &checkpoint) {
                (Some(p), _) => load_config(Some(p))?,
                (None, Some(ck)) if !random => TrainConfig::from_checkpoint(&Checkpoint::load(ck)?)?,
                _ => load_config(None)?,
            };
            if let Some(l) = noise_len {
                cfg.noise_len = l;
            }
            let report = match (random, checkpoint) {
                (false, Some(ck)) => trainer::evaluate_checkpoint(&ck, &cfg, episodes, seed)?,
                _ => trainer::evaluate_random(&cfg.hike_config()?, episodes, seed)?,
            };
            println!("{} episodes: mean return {:.3} ± {:.3}", report.episodes, report.mean, report.std);
        }
        Command::Sweep { exp, noise_lens } => {
            let mut spec = ExperimentSpec::sweep(load_config(exp.config.as_deref())?, &exp.out);
            spec.noise_lens = noise_lens;
            spec.seeds = exp.seeds.clone();
            run_experiment(&spec, &exp)?;
        }
        Command::Ablate { exp, noise_len } => {
            let mut spec = ExperimentSpec::ablation(load_config(exp.config.as_deref())?, noise_len, &exp.out);
            spec.seeds = exp.seeds.clone();
            run_experiment(&spec, &exp)?;
        }
        Command::Gradcheck { step } => {
            let cfg = trainer::gradcheck_config();
            let r = trainer::full_pipeline_gradcheck(&cfg, step)?;
            println!("{:e}", r.max_rel_error);
            log::info!("{} coordinates, worst {:?}", r.coordinates, r.worst);
            if r.max_rel_error >= GRADCHECK_TOLERANCE {
                eprintln!("max relative error exceeds {GRADCHECK_TOLERANCE:e}");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Plot { dir } => {
            let out = harness::plot(&dir)?;
            println!("{} runs, {} records", out.runs, out.records);
            for f in out.files {
                println!("{}", f.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
