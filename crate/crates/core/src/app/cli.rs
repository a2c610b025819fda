use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use super::config::{load_config, CommsSetting, InventorySource, ResourceSettings, RunConfig};
use super::run::{execute, metrics_summary, summarize};
use super::AppError;
use crate::gp_generator::read_metrics;

#[derive(Debug, Parser)]
#[command(name = "dynens", version, about = "Run and inspect dynamic ensembles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an ensemble from a config file.
    Run(RunArgs),
    /// Check a config file without running anything.
    Validate { config: PathBuf },
    /// Print the summary of a history dump, and of a metrics CSV if given.
    ReplayMetrics {
        history: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CommsArg {
    Local,
    GenOnManager,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub config: PathBuf,
    #[arg(long)]
    pub nworkers: Option<usize>,
    #[arg(long, value_enum)]
    pub comms: Option<CommsArg>,
    /// Known platform name, e.g. frontier.
    #[arg(long)]
    pub platform: Option<String>,
    /// Node inventory file (`name cores gpus` per line).
    #[arg(long)]
    pub inventory: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print stub-app launch lines instead of starting processes.
    #[arg(long)]
    pub dry_run: bool,
    /// Directory for the history dump, metrics and evaluation directories.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Continue from a history dump.
    #[arg(long)]
    pub restart: Option<PathBuf>,
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Folds command-line overrides into the loaded config and validates the
/// result.
pub fn apply_overrides(cfg: &mut RunConfig, a: &RunArgs) -> Result<(), AppError> {
    if let Some(n) = a.nworkers {
        cfg.nworkers = n;
    }
    if let Some(c) = a.comms {
        cfg.comms = match c {
            CommsArg::Local => CommsSetting::Local,
            CommsArg::GenOnManager => CommsSetting::GenOnManager,
        };
    }
    if let Some(p) = &a.platform {
        cfg.platform.name = Some(p.clone());
    }
    if let Some(inv) = &a.inventory {
        let mut r = cfg.resources.clone().unwrap_or(ResourceSettings {
            inventory: InventorySource::File,
            inventory_file: None,
            use_tiles: false,
            split2fit: true,
            match_slots: None,
        });
        r.inventory = InventorySource::File;
        r.inventory_file = Some(absolute(inv));
        cfg.resources = Some(r);
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.dry_run {
        if cfg.sim.function != "stub_app" {
            return Err(AppError::field(
                "sim.function",
                format!("--dry-run needs the stub_app simulator, not {:?}", cfg.sim.function),
            ));
        }
        cfg.sim.user.insert("dry_run".into(), toml::Value::Boolean(true));
    }
    cfg.validate()
}

fn run(a: &RunArgs) -> i32 {
    let mut cfg = match load_config(&a.config).and_then(|mut c| apply_overrides(&mut c, a).map(|()| c)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let h0 = match &a.restart {
        Some(p) => match crate::history::load(p) {
            Ok(h) => Some(h),
            Err(e) => {
                eprintln!("error: restart file {}: {e}", p.display());
                return 1;
            }
        },
        None => None,
    };
    if a.dry_run {
        log::info!("dry run: stub launch lines follow");
    }
    cfg.base_dir = absolute(&cfg.base_dir);
    match execute(&cfg, &a.out, h0) {
        Ok(r) => {
            println!("completed: {:?} in {:.3}s", r.flag, r.elapsed.as_secs_f64());
            println!("history: {}", r.history_path.display());
            println!("{}", r.summary);
            if let Some(p) = &r.metrics_path {
                println!("metrics: {}", p.display());
                println!("{}", metrics_summary(&r.metrics));
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                2
            } else {
                1
            }
        }
    }
}

fn replay(history: &Path, metrics: Option<&Path>) -> i32 {
    let h = match crate::history::load(history) {
        Ok(h) => h,
        Err(e) => {
            eprintln!("error: {}: {e}", history.display());
            return 1;
        }
    };
    println!("{}", summarize(&h));
    if let Some(m) = metrics {
        match read_metrics(m) {
            Ok(rows) => println!("{}", metrics_summary(&rows)),
            Err(e) => {
                eprintln!("error: {e}");
                return 1;
            }
        }
    }
    0
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 2 for a bad config or usage, 1 for a failed run.
pub fn cli_run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match &cli.command {
        Command::Run(a) => run(a),
        Command::Validate { config } => match load_config(config) {
            Ok(c) => {
                println!(
                    "{}: ok ({} workers, gen {}, sim {}, alloc {})",
                    config.display(),
                    c.nworkers,
                    c.gen.function,
                    c.sim.function,
                    c.alloc.function
                );
                0
            }
            Err(e) => {
                eprintln!("error: {e}");
                2
            }
        },
        Command::ReplayMetrics { history, metrics } => replay(history, metrics.as_deref()),
    }
}
