//! `bpo`: SFT, alignment, evaluation, sweeps, ablations and reports.
//!
//! Progress goes to stderr. Artifacts go to files. On failure the last stderr
//! line is `error: <kind>: <message>` and the exit code is 2 for usage and
//! configuration errors, 3 for aborted training, 4 for I/O and file-format
//! errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bpo_core::experiment::{
    ablation_arms, eval_head_to_head, eval_vs_references, golden_config, load_golden, load_sft_artifacts, plan_sweep,
    run_ablation, run_align_stage, run_report, run_sft_stage, write_sft_dir, Study, SFT_CKPT,
};
use bpo_core::losses::LossKind;
use bpo_core::store::{write_eval_csv, ExperimentConfig};
use bpo_core::trainer::RefMode;
use bpo_core::Error;
use clap::{ArgGroup, Args, Parser, Subcommand};
use log::info;

#[derive(Debug, Parser)]
#[command(
    name = "bpo",
    version,
    about = "Online preference optimization anchored to the behavior policy"
)]
struct Cli {
    /// Overrides the master seed of every command.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Validate and print the resolved plan without running anything.
    #[arg(long, global = true)]
    dry_run: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the task, fit the SFT policy and draw reference texts.
    Sft {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `<output root>/sft-s<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Align an SFT checkpoint with the annotation-frequency scheduler.
    Align(AlignArgs),
    /// Win rate of a checkpoint against reference texts or another checkpoint.
    Eval(EvalArgs),
    /// Alignment runs for every (frequency, seed) pair at a fixed budget.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        freqs: Vec<usize>,
        /// Defaults to the master seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reference-policy, ensemble-size or EMA ablation.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// One of ref, lora, ema.
        #[arg(long)]
        study: String,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate win rates of all runs under a directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Bootstrap resamples.
        #[arg(long, default_value_t = 2000)]
        resamples: usize,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
    },
}

#[derive(Debug, Args)]
struct AlignArgs {
    #[arg(long)]
    config: PathBuf,
    /// SFT checkpoint; its directory supplies the oracle and prompts.
    #[arg(long)]
    sft: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// behavior, sft, golden or ema.
    #[arg(long)]
    ref_mode: Option<String>,
    #[arg(long)]
    freq: Option<usize>,
    /// dpo, ipo or slic.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    ensemble: Option<usize>,
    #[arg(long)]
    golden: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("target").required(true).args(["references", "opponent"])))]
struct EvalArgs {
    #[arg(long)]
    policy: PathBuf,
    /// Run directory holding `references.jsonl` and `gold.json`.
    #[arg(long)]
    references: Option<PathBuf>,
    /// Opponent checkpoint for a head-to-head comparison.
    #[arg(long)]
    opponent: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Both sides sample from the same per-prompt streams.
    #[arg(long, requires = "opponent")]
    shared_transcript: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::Numerical(_) | Error::Underflow { .. } | Error::PromptsExhausted { .. } => 3,
        Error::Io { .. } | Error::Format { .. } | Error::Incompatible { .. } => 4,
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn print_plan(cfg: &ExperimentConfig, runs: &[PathBuf]) {
    print!("{}", cfg.to_toml_string());
    for r in runs {
        println!("# run {}", r.display());
    }
}

fn parse_flag<T: std::str::FromStr<Err = String>>(field: &str, v: &Option<String>) -> Result<Option<T>, Error> {
    v.as_deref()
        .map(|s| s.parse().map_err(|m: String| Error::config(field, m)))
        .transpose()
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Sft { config, out } => {
            let cfg = load(&config, cli.seed)?;
            let out = out.unwrap_or_else(|| cfg.output_root().join(format!("sft-s{}", cfg.seed)));
            if cli.dry_run {
                print_plan(&cfg, &[out]);
                return Ok(());
            }
            let art = run_sft_stage(&cfg)?;
            write_sft_dir(&out, &cfg, &art)?;
            info!("wrote {}", out.join(SFT_CKPT).display());
        }
        Command::Align(a) => {
            let mut cfg = load(&a.config, cli.seed)?;
            if let Some(m) = parse_flag::<RefMode>("train.ref_mode", &a.ref_mode)? {
                cfg.train.ref_mode = m;
            }
            if let Some(l) = parse_flag::<LossKind>("train.loss", &a.loss)? {
                cfg.train.loss = l;
            }
            if let Some(f) = a.freq {
                cfg.train.freq = f;
                cfg.train.pairs_per_phase = None;
            }
            if let Some(e) = a.ensemble {
                cfg.train.ensemble = e;
            }
            if let Some(g) = a.golden {
                cfg.train.golden = Some(g);
            }
            cfg.validate()?;
            let golden = load_golden(&cfg)?;
            let out = a.out.unwrap_or_else(|| {
                let tc = cfg.train_config();
                cfg.output_root().join(format!("align-F{}-s{}", tc.freq, cfg.seed))
            });
            if cli.dry_run {
                print_plan(&cfg, &[out]);
                return Ok(());
            }
            let sft = load_sft_artifacts(&a.sft)?;
            run_align_stage(&cfg, &sft, golden.as_ref(), &out)?;
        }
        Command::Eval(e) => {
            if !(e.temperature > 0.0 && e.temperature.is_finite()) {
                return Err(Error::config("temperature", "must be a positive finite number"));
            }
            if cli.dry_run {
                println!("# eval {} -> {}", e.policy.display(), e.out.display());
                return Ok(());
            }
            let seed = cli.seed.unwrap_or(0);
            let report = match (&e.references, &e.opponent) {
                (Some(dir), None) => eval_vs_references(&e.policy, dir, e.temperature, seed)?,
                (None, Some(opp)) => eval_head_to_head(&e.policy, opp, e.temperature, seed, e.shared_transcript)?,
                _ => unreachable!("clap enforces exactly one target"),
            };
            write_eval_csv(&e.out, &report)?;
            info!("win rate {:.4} over {} prompts", report.win_rate, report.n_prompts);
        }
        Command::Sweep {
            config,
            freqs,
            seeds,
            out,
        } => {
            let cfg = load(&config, cli.seed)?;
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            let out = out.unwrap_or_else(|| cfg.output_root().join("sweep"));
            let plan = plan_sweep(&cfg, &freqs, &seeds)?;
            if cli.dry_run {
                let dirs: Vec<PathBuf> = plan.iter().map(|(f, s, _)| out.join(format!("F{f}-s{s}"))).collect();
                print_plan(&cfg, &dirs);
                return Ok(());
            }
            bpo_core::experiment::run_sweep(&cfg, &freqs, &seeds, &out)?;
            info!("wrote {}", out.join("results.csv").display());
        }
        Command::Ablate {
            config,
            study,
            seeds,
            out,
        } => {
            let study: Study = study.parse().map_err(|m: String| Error::config("study", m))?;
            let cfg = load(&config, cli.seed)?;
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            let out = out.unwrap_or_else(|| cfg.output_root().join("ablate"));
            if cli.dry_run {
                let root = out.join(study.name());
                let mut dirs = Vec::new();
                for s in &seeds {
                    if study == Study::Ref {
                        golden_config(&cfg).validate()?;
                        dirs.push(root.join(format!("golden-s{s}")));
                    }
                    for (name, c) in ablation_arms(&cfg, study, Some(Path::new("golden.ckpt"))) {
                        c.validate()?;
                        dirs.push(root.join(format!("{name}-s{s}")));
                    }
                }
                print_plan(&cfg, &dirs);
                return Ok(());
            }
            run_ablation(&cfg, study, &seeds, &out)?;
        }
        Command::Report {
            runs,
            out,
            resamples,
            level,
        } => {
            if resamples == 0 {
                return Err(Error::config("resamples", "must be positive"));
            }
            if !(level > 0.0 && level < 1.0) {
                return Err(Error::config("level", "must lie strictly between 0 and 1"));
            }
            if cli.dry_run {
                println!("# report {} -> {}", runs.display(), out.display());
                return Ok(());
            }
            let rows = run_report(&runs, &out, resamples, level)?;
            info!("wrote {} aggregate rows to {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid usage");
            eprintln!("error: usage: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(exit_code(&e))
        }
    }
}
