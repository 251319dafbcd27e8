//! `cvmpc` command-line front end.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error,
//! 3 a requested threshold check failed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use cvmpc::conservative::{PessimismConfig, PessimismMode};
use cvmpc::dataset::Dataset;
use cvmpc::ensemble::{load_checkpoint, save_checkpoint, EnsembleCheckpoint};
use cvmpc::harness::{self, Arm, Check, ExperimentConfig, Manifest, Report, Table};
use cvmpc::sim::{replay, EpisodeLog};
use cvmpc::{exec, Error, Exec};

#[derive(Parser, Debug)]
#[command(name = "cvmpc", version, about = "Conservative value-ensemble MPC experiments")]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Record demonstrations with the friction-cost controller.
    Collect {
        /// Also write one replayable log per episode under `logs/`.
        #[arg(long)]
        logs: bool,
    },
    /// Train the value ensemble.
    Train {
        /// Demonstration dataset; collected first when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate one controller.
    Eval {
        #[arg(long, value_enum, default_value_t = ArmKind::CvMpc)]
        arm: ArmKind,
        /// Ensemble checkpoint for `cv-mpc`; trained first when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset used when a checkpoint has to be trained.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Use pointwise instead of initial-state pessimism.
        #[arg(long)]
        pointwise: bool,
        /// Exit with code 3 when the success rate (%) is below this.
        #[arg(long)]
        min_success: Option<f64>,
    },
    /// Run one of the ablation campaigns.
    Ablate {
        #[command(subcommand)]
        which: Ablation,
    },
    /// Re-step the simulator through a logged episode.
    Replay { log: PathBuf },
    /// Print dataset statistics as JSON.
    Inspect { dataset: PathBuf },
}

#[derive(Subcommand, Debug)]
enum Ablation {
    /// Ensemble size × λ grid, with one-step cost regressors alongside.
    Grid {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Over-confident demonstrator versus the learned controller.
    Biased {
        /// Exit with code 3 unless the learned controller leads by this many points.
        #[arg(long)]
        min_margin: Option<f64>,
    },
    /// Observation modes from the training and a shifted start pose.
    Obs {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Exit with code 3 unless rot beats vel_acc from the shifted start
        /// and reaches this success rate (%) from the training start.
        #[arg(long)]
        min_rot: Option<f64>,
    },
    /// Initial-state versus pointwise pessimism on one checkpoint.
    Pessimism {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Exit with code 3 when the expected ordering does not hold.
        #[arg(long)]
        check: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ArmKind {
    CvMpc,
    Demonstrator,
    Plain,
}

enum Failure {
    Config(String),
    Runtime(String),
    Threshold(Vec<Check>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, Failure>;

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    exec: Exec,
    manifest: Manifest,
}

impl Ctx {
    fn cache(&self) -> PathBuf {
        self.out.join("cache")
    }

    fn dataset(&mut self, data: Option<&Path>) -> CliResult<Dataset> {
        if let Some(path) = data {
            self.manifest.add_input(path)?;
            return Ok(Dataset::load(path)?);
        }
        log::info!("no dataset given, collecting {} demonstrations", self.cfg.demos);
        let collected = harness::collect_demos(&self.cfg, self.cfg.mu_true, self.cfg.mu_assumed, self.exec)?;
        let path = self.out.join("demos.jsonl");
        collected.dataset.save(&path)?;
        self.manifest.add_output(&path)?;
        Ok(collected.dataset)
    }

    fn checkpoint(&mut self, ckpt: Option<&Path>, data: Option<&Path>) -> CliResult<Arc<EnsembleCheckpoint>> {
        if let Some(path) = ckpt {
            self.manifest.add_input(path)?;
            return Ok(Arc::new(load_checkpoint(path)?));
        }
        let ds = self.dataset(data)?;
        let cfg = &self.cfg;
        let cache = self.cache();
        let (ens, summary) = harness::run_training(
            &ds,
            cfg.members,
            cfg.gamma,
            &cfg.train,
            cfg.seed,
            Some(&cache),
            "ensemble",
            self.exec,
        )?;
        self.manifest.training.push(summary);
        Ok(ens)
    }

    fn finish(&mut self, report: &Report) -> CliResult<()> {
        harness::write_report(report, &self.out, &mut self.manifest)?;
        for (name, table) in &report.tables {
            print_table(name, table);
        }
        let path = self.out.join(format!("manifest-{}.json", self.manifest.command.replace(' ', "-")));
        self.manifest.save(&path)?;
        Ok(())
    }
}

fn print_table(name: &str, table: &Table) {
    println!("{name}");
    for r in &table.rows {
        let fmt = |m: Option<f64>, se: Option<f64>| match (m, se) {
            (Some(m), Some(se)) => format!("{m:.3} ± {se:.3}"),
            _ => "n/a".to_string(),
        };
        println!(
            "  {:<28} success {:>5.1}% ({}/{})  tilt {} deg  v {} m/s  w {} rad/s",
            r.cell,
            r.success_rate,
            r.successes,
            r.trials,
            fmt(r.tilt_mean, r.tilt_se),
            fmt(r.lin_vel_mean, r.lin_vel_se),
            fmt(r.ang_vel_mean, r.ang_vel_se),
        );
    }
}

fn gate(checks: Vec<Check>) -> CliResult<()> {
    for c in &checks {
        println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if checks.iter().all(|c| c.passed) {
        Ok(())
    } else {
        Err(Failure::Threshold(checks))
    }
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Collect { .. } => "collect",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Ablate { which } => match which {
            Ablation::Grid { .. } => "ablate grid",
            Ablation::Biased { .. } => "ablate biased",
            Ablation::Obs { .. } => "ablate obs",
            Ablation::Pessimism { .. } => "ablate pessimism",
        },
        Command::Replay { .. } => "replay",
        Command::Inspect { .. } => "inspect",
    }
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    // Commands that only read a file need no config or output directory.
    match &cli.command {
        Command::Replay { log } => {
            let report = replay(&EpisodeLog::load(log)?)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
            let ok = report.max_divergence == 0.0 && report.metrics_match;
            let detail = match report.first_divergent_step {
                Some(step) => format!("diverges at step {step} by {:e}", report.max_divergence),
                None => "no divergence".to_string(),
            };
            return gate(vec![Check {
                name: "replay reproduces the log".into(),
                passed: ok,
                detail,
            }]);
        }
        Command::Inspect { dataset } => {
            let stats = harness::inspect(&Dataset::load(dataset)?);
            println!("{}", serde_json::to_string_pretty(&stats).map_err(Error::from)?);
            return Ok(());
        }
        _ => {}
    }

    let cfg = load_config(&cli)?;
    let exec = match cli.workers {
        Some(0) => return Err(Failure::Config("--workers must be at least 1".into())),
        Some(1) => Exec::Sequential,
        Some(n) => {
            exec::set_workers(n);
            Exec::Parallel
        }
        None => Exec::Parallel,
    };
    std::fs::create_dir_all(&cli.out).map_err(|e| Failure::Runtime(format!("{}: {e}", cli.out.display())))?;
    let mut manifest = Manifest::new(command_name(&cli.command), &cfg);
    if let Some(path) = &cli.config {
        manifest.add_input(path)?;
    }
    let mut ctx = Ctx {
        cfg,
        out: cli.out.clone(),
        exec,
        manifest,
    };

    match cli.command {
        Command::Collect { logs } => {
            let cfg = &ctx.cfg;
            let collected = harness::collect_demos(cfg, cfg.mu_true, cfg.mu_assumed, exec)?;
            let path = ctx.out.join("demos.jsonl");
            collected.dataset.save(&path)?;
            ctx.manifest.add_output(&path)?;
            if logs {
                let dir = ctx.out.join("logs");
                std::fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
                for (i, log) in collected.logs.iter().enumerate() {
                    let p = dir.join(format!("demo_{i:04}.jsonl"));
                    log.save(&p)?;
                    ctx.manifest.add_output(&p)?;
                }
            }
            let mut report = Report::default();
            report.tables.push(("demonstrator".into(), collected.table));
            ctx.finish(&report)
        }
        Command::Train { data } => {
            let ens = ctx.checkpoint(None, data.as_deref())?;
            let path = ctx.out.join("ensemble.ckpt");
            save_checkpoint(&ens, &path)?;
            ctx.manifest.add_output(&path)?;
            println!("wrote {} ({} members, digest {})", path.display(), ens.len(), ens.digest);
            ctx.finish(&Report::default())
        }
        Command::Eval {
            arm,
            checkpoint,
            data,
            pointwise,
            min_success,
        } => {
            let (cell, arm) = match arm {
                ArmKind::Plain => ("plain", Arm::Plain),
                ArmKind::Demonstrator => (
                    "demonstrator",
                    Arm::Demonstrator {
                        mu_assumed: ctx.cfg.mu_assumed,
                    },
                ),
                ArmKind::CvMpc => {
                    let ens = ctx.checkpoint(checkpoint.as_deref(), data.as_deref())?;
                    let mode = if pointwise {
                        PessimismMode::Pointwise
                    } else {
                        ctx.cfg.pessimism.mode
                    };
                    let pessimism = PessimismConfig { mode, ..ctx.cfg.pessimism };
                    ("cv_mpc", harness::value_arm(ens, pessimism))
                }
            };
            let table = harness::run_eval(&ctx.cfg, cell, &arm, exec)?;
            let row = table.rows[0].clone();
            let mut report = Report::default();
            report.tables.push(("eval".into(), table));
            ctx.finish(&report)?;
            match min_success {
                Some(min) => gate(vec![harness::success_check(&row, min)]),
                None => Ok(()),
            }
        }
        Command::Ablate { which } => match which {
            Ablation::Grid { data } => {
                let ds = ctx.dataset(data.as_deref())?;
                let report = harness::ablate_grid(&ctx.cfg, &ds, Some(&ctx.cache()), exec)?;
                ctx.finish(&report)
            }
            Ablation::Biased { min_margin } => {
                let report = harness::ablate_biased_expert(&ctx.cfg, Some(&ctx.cache()), exec)?;
                ctx.finish(&report)?;
                match min_margin {
                    Some(m) => {
                        let table = report.table("biased_expert").expect("biased table");
                        gate(harness::biased_checks(table, &ctx.cfg, m)?)
                    }
                    None => Ok(()),
                }
            }
            Ablation::Obs { data, min_rot } => {
                let ds = ctx.dataset(data.as_deref())?;
                let report = harness::ablate_observations(&ctx.cfg, &ds, Some(&ctx.cache()), exec)?;
                ctx.finish(&report)?;
                match min_rot {
                    Some(m) => gate(harness::observation_checks(
                        report.table("obs_same_start").expect("same-start table"),
                        report.table("obs_shifted_start").expect("shifted-start table"),
                        m,
                    )?),
                    None => Ok(()),
                }
            }
            Ablation::Pessimism { checkpoint, data, check } => {
                let ens = ctx.checkpoint(checkpoint.as_deref(), data.as_deref())?;
                let report = harness::ablate_pessimism_mode(&ctx.cfg, ens, exec)?;
                ctx.finish(&report)?;
                if check {
                    gate(harness::pessimism_checks(report.table("pessimism_mode").expect("pessimism table"))?)
                } else {
                    Ok(())
                }
            }
        },
        Command::Replay { .. } | Command::Inspect { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Threshold(checks)) => {
            let failed = checks.iter().filter(|c| !c.passed).count();
            eprintln!("{failed} threshold check(s) failed");
            ExitCode::from(3)
        }
    }
}
