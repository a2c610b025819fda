use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{CommsSetting, InventorySource, RunConfig};
use super::gens;
use super::registry::{self, GenKind, GenParams, LauncherSetting, SimParams};
use super::sims::{self, StubParams, STUB_APP};
use super::AppError;
use crate::executor::{Executor, Launcher};
use crate::gp_generator::{
    gp_gen_fn, initial_sample, GpGenConfig, MetricsLog, MetricsRow, SyntheticObjective, TestSet,
};
use crate::history::{History, SimId};
use crate::resources::{
    detect_nodes, detect_platform, read_inventory_file, PlatformSpec, ResourcePool,
    ScheduleOptions, SetsOptions,
};
use crate::runtime::{
    run_ensemble, Allocator, CommsMode, CompletionFlag, EnsembleConfig, ExitCriteria, GenFn,
    GiveSimWorkFirst, OnlyPersistentGens, ResourceConfig, SimFn, StopVal,
};

/// Everything needed to call [`run_ensemble`].
pub struct Prepared {
    pub ensemble: EnsembleConfig,
    pub gen: GenFn,
    pub sim: SimFn,
    pub alloc: Box<dyn Allocator>,
    /// Rows logged by a `gp_online` generator and the CSV it writes.
    pub metrics: Option<(MetricsLog, PathBuf)>,
    pub platform: Option<PlatformSpec>,
}

/// The `forces_stub` binary installed next to the running executable.
fn default_stub_path() -> PathBuf {
    let name = format!("forces_stub{}", std::env::consts::EXE_SUFFIX);
    std::env::current_exe()
        .ok()
        .and_then(|p| p.parent().map(|d| d.join(&name)))
        .unwrap_or_else(|| PathBuf::from(name))
}

fn io_err(path: &Path, e: impl fmt::Display) -> AppError {
    AppError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Builds the runtime configuration and user functions for `cfg`. Outputs
/// without an explicit path go under `out_dir`. `env` is consulted for
/// platform and node detection.
pub fn prepare(
    cfg: &RunConfig,
    out_dir: &Path,
    env: &HashMap<String, String>,
) -> Result<Prepared, AppError> {
    cfg.validate()?;
    let gen_params = GenParams::parse(&cfg.gen)?;
    let sim_params = SimParams::parse(&cfg.sim)?;
    let (lb, ub) = gen_params.bounds();
    let (lb, ub) = (lb.to_vec(), ub.to_vec());
    let b = gen_params.batch_size();
    let persistent = registry::gen_entry(&cfg.gen.function)?.kind == GenKind::Persistent;
    let comms = match cfg.comms {
        CommsSetting::Local => CommsMode::Local,
        CommsSetting::GenOnManager => CommsMode::GenOnManager,
    };

    let needs_platform = cfg.resources.is_some() || matches!(sim_params, SimParams::StubApp(_));
    let platform = if needs_platform {
        Some(detect_platform(env, &cfg.platform_overrides(), cfg.platform.name.as_deref())?)
    } else {
        None
    };

    let mut resources = None;
    if let (Some(r), Some(platform)) = (&cfg.resources, &platform) {
        let inventory = match r.inventory {
            InventorySource::File => {
                let path = cfg.resolve(r.inventory_file.as_deref().expect("checked by validate"));
                read_inventory_file(&path)?
            }
            InventorySource::Detected => {
                let inv = detect_nodes(env, None)?;
                // a named platform or explicit core count describes the nodes
                // better than local probing does
                if cfg.platform.name.is_some() || cfg.platform.cores_per_node.is_some() {
                    inv.with_shape(platform.cores_per_node, platform.gpus_per_node)
                } else {
                    inv
                }
            }
        };
        let dedicated_gen = comms == CommsMode::Local && persistent;
        let pool = ResourcePool::build(
            &inventory,
            platform,
            cfg.nworkers,
            dedicated_gen,
            SetsOptions {
                use_tiles: r.use_tiles,
            },
        )?;
        let options = ScheduleOptions {
            split2fit: r.split2fit,
            match_slots: r.match_slots.unwrap_or(platform.scheduler_match_slots),
        };
        resources = Some(ResourceConfig { pool, options });
    }

    let mut executor = None;
    let sim: SimFn = match &sim_params {
        SimParams::Norm => sims::sim_norm(),
        SimParams::Synthetic(s) => {
            sims::sim_synthetic(SyntheticObjective::new(lb.len(), s.objective_seed), lb.clone(), ub.clone())
        }
        SimParams::StubApp(s) => {
            let path = s
                .app_path
                .as_deref()
                .map(|p| cfg.resolve(p))
                .unwrap_or_else(default_stub_path);
            if !s.dry_run && !path.is_file() {
                return Err(AppError::field(
                    "sim.user.app_path",
                    format!("stub app {} not found", path.display()),
                ));
            }
            let launcher = match s.launcher {
                LauncherSetting::Mpi => Launcher::Mpi,
                LauncherSetting::Direct => Launcher::Direct,
            };
            let mut exe = Executor::new(platform.clone().expect("platform detected for stub_app"))
                .with_launcher(launcher);
            exe.register_app(path, STUB_APP)?;
            executor = Some(Arc::new(exe));
            sims::sim_stub_app(StubParams {
                steps: s.steps,
                sleep: s.sleep,
                timeout: s.timeout.map(Duration::from_secs_f64),
                poll_interval: Duration::from_secs_f64(s.poll_interval),
                dry_run: s.dry_run,
            })
        }
    };

    let mut metrics = None;
    let gen = match &gen_params {
        GenParams::Uniform(_) if !persistent => {
            gens::uniform_sample(lb.clone(), ub.clone(), b)
        }
        GenParams::Uniform(_) => gens::persistent_uniform(lb.clone(), ub.clone(), b),
        GenParams::GpuCounts(g) => gens::persistent_with_gpu_counts(lb.clone(), ub.clone(), b, g.max_gpus),
        GenParams::Gp(g) => {
            let mut c = GpGenConfig::new(lb.clone(), ub.clone(), b);
            c.points_per_dim = g.points_per_dim;
            c.policy.allow_local = g.allow_local;
            c.mode = g.mode.into();
            c.max_batches = g.max_batches;
            let path = g
                .metrics_path
                .as_deref()
                .map(|p| cfg.resolve(p))
                .unwrap_or_else(|| out_dir.join("metrics.csv"));
            c.metrics_path = Some(path.clone());
            if let SimParams::Synthetic(s) = &sim_params {
                let obj = SyntheticObjective::new(lb.len(), s.objective_seed);
                let mut rng = ChaCha8Rng::seed_from_u64(s.objective_seed.wrapping_add(1));
                let x = initial_sample(&lb, &ub, g.test_points, &mut rng);
                c.test_set = Some(TestSet::from_fn(x, |p| obj.eval(&sims::to_unit(p, &lb, &ub))));
            }
            let (gen, log) = gp_gen_fn(c)?;
            metrics = Some((log, path));
            gen
        }
    };

    let alloc: Box<dyn Allocator> = match cfg.alloc.function.as_str() {
        "give_sim_work_first" => Box::new(GiveSimWorkFirst),
        _ => Box::new(OnlyPersistentGens {
            async_mode: cfg.alloc.async_mode,
        }),
    };

    let e = &cfg.exit;
    let exit = ExitCriteria {
        sim_max: e.sim_max,
        gen_max: e.gen_max,
        wallclock_max: e.wallclock_max.map(Duration::from_secs_f64),
        stop_val: e.stop_val.as_ref().map(|s| StopVal {
            field: s.field.clone(),
            threshold: s.threshold,
        }),
    };
    let mut ensemble = EnsembleConfig::new(lb.len(), cfg.nworkers, exit);
    ensemble.comms = comms;
    ensemble.seed = cfg.seed;
    ensemble.abort_on_exception = cfg.abort_on_exception;
    if let Some(k) = cfg.dump_every {
        ensemble.dump_every = k;
    }
    ensemble.history_path = Some(
        cfg.history_path
            .as_deref()
            .map(|p| cfg.resolve(p))
            .unwrap_or_else(|| out_dir.join("history.json")),
    );
    ensemble.ensemble_dir = match &cfg.ensemble_dir {
        Some(d) => Some(cfg.resolve(d)),
        // stub runs write forces.stat, which needs a directory per evaluation
        None if executor.is_some() => Some(out_dir.join("ensemble")),
        None => None,
    };
    ensemble.resources = resources;
    ensemble.executor = executor;

    Ok(Prepared {
        ensemble,
        gen,
        sim,
        alloc,
        metrics,
        platform,
    })
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub flag: CompletionFlag,
    pub history_path: PathBuf,
    pub metrics_path: Option<PathBuf>,
    pub metrics: Vec<MetricsRow>,
    pub summary: HistorySummary,
    pub elapsed: Duration,
}

/// Prepares and runs `cfg`, continuing from `h0` when given.
pub fn execute(cfg: &RunConfig, out_dir: &Path, h0: Option<History>) -> Result<RunReport, AppError> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let env: HashMap<String, String> = std::env::vars().collect();
    let p = prepare(cfg, out_dir, &env)?;
    let history_path = p.ensemble.history_path.clone().expect("set by prepare");
    let t = Instant::now();
    let (history, flag) = run_ensemble(p.ensemble, p.gen, p.sim, p.alloc, h0)?;
    let elapsed = t.elapsed();
    let (metrics_path, metrics) = match p.metrics {
        Some((log, path)) => {
            let rows = log.lock().map(|r| r.clone()).unwrap_or_default();
            (Some(path), rows)
        }
        None => (None, Vec::new()),
    };
    Ok(RunReport {
        flag,
        history_path,
        metrics_path,
        metrics,
        summary: summarize(&history),
        elapsed,
    })
}

/// Counts and timings recomputed from a history.
#[derive(Debug, Clone, PartialEq)]
pub struct HistorySummary {
    pub generated: usize,
    pub given: usize,
    pub returned: usize,
    /// Returned with a NaN objective: killed or failed.
    pub returned_nan: usize,
    pub kill_sent: usize,
    pub best: Option<(SimId, f64)>,
    /// First dispatch to last return, in seconds.
    pub span_seconds: f64,
    /// Per-evaluation seconds from dispatch to return.
    pub sim_seconds_mean: f64,
    pub sim_seconds_median: f64,
    pub sim_seconds_max: f64,
}

pub fn summarize(h: &History) -> HistorySummary {
    let recs = h.records();
    let returned: Vec<_> = recs.iter().filter(|r| r.returned).collect();
    let best = returned
        .iter()
        .filter(|r| r.f.is_finite())
        .min_by(|a, b| a.f.total_cmp(&b.f))
        .map(|r| (r.sim_id, r.f));
    let mut durations: Vec<f64> = returned
        .iter()
        .filter_map(|r| Some(r.returned_time? - r.given_time?))
        .collect();
    durations.sort_by(f64::total_cmp);
    let first = recs.iter().filter_map(|r| r.given_time).min_by(f64::total_cmp);
    let last = recs.iter().filter_map(|r| r.returned_time).max_by(f64::total_cmp);
    let n = durations.len();
    let median = match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => durations[n / 2],
        _ => 0.5 * (durations[n / 2 - 1] + durations[n / 2]),
    };
    HistorySummary {
        generated: recs.len(),
        given: h.given_count(),
        returned: returned.len(),
        returned_nan: returned.iter().filter(|r| r.f.is_nan()).count(),
        kill_sent: recs.iter().filter(|r| r.kill_sent).count(),
        best,
        span_seconds: match (first, last) {
            (Some(a), Some(b)) => (b - a).max(0.0),
            _ => 0.0,
        },
        sim_seconds_mean: if n == 0 { f64::NAN } else { durations.iter().sum::<f64>() / n as f64 },
        sim_seconds_median: median,
        sim_seconds_max: durations.last().copied().unwrap_or(f64::NAN),
    }
}

impl fmt::Display for HistorySummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "records: {} generated, {} given, {} returned ({} NaN), {} kills sent",
            self.generated, self.given, self.returned, self.returned_nan, self.kill_sent
        )?;
        match self.best {
            Some((id, v)) => writeln!(f, "best f: {v:.6e} (sim {id})")?,
            None => writeln!(f, "best f: none")?,
        }
        write!(
            f,
            "sim time: mean {:.3}s, median {:.3}s, max {:.3}s over a {:.3}s span",
            self.sim_seconds_mean, self.sim_seconds_median, self.sim_seconds_max, self.span_seconds
        )
    }
}

/// Totals over a metrics CSV, printed after a `gp_online` run.
pub fn metrics_summary(rows: &[MetricsRow]) -> String {
    let Some(last) = rows.last() else {
        return "metrics: no rows".to_string();
    };
    let total = |g: fn(&MetricsRow) -> f64| rows.iter().map(g).sum::<f64>();
    format!(
        "metrics: {} iterations, n_train {}, final mse_test {:.4e}, final max_var {:.4e}\n\
         time: train {:.3}s, select {:.3}s, sim {:.3}s",
        rows.len(),
        last.n_train,
        last.mse_test,
        last.max_var,
        total(|r| r.train_seconds),
        total(|r| r.select_seconds),
        total(|r| r.sim_seconds),
    )
}
