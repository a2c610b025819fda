//! Manager/worker engine.
//!
//! [`run_ensemble`] starts one thread per worker, each with a data channel
//! and a separate control channel, and runs the manager loop on the calling
//! thread. Every turn the manager takes in worker messages and updates the
//! history, checks the exit criteria, asks the allocator for work and sends
//! it out. Messages carry copies of records, never references.

mod alloc;
mod manager;
mod message;
mod persistent;
mod worker;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::executor::Executor;
use crate::history::{History, HistoryError, WorkerId};
use crate::resources::{ResourceError, ResourcePool, ScheduleOptions};

pub use alloc::{
    default_alloc, persistent_alloc, AllocContext, Allocator, GenView, GiveSimWorkFirst,
    OnlyPersistentGens, Work, WorkerState, WorkerStatus,
};
pub use manager::{run_ensemble, run_ensemble_traced, RunOutcome};
pub use message::{validate_trace, Direction, MessageTag, TraceEvent};
pub use persistent::{PersistentCtx, ProtocolError};
pub use worker::{
    GenFn, OneShotGenFn, PersistentGenFn, SimCtx, SimFn, SimOutput, UserError,
};

/// Random stream type handed to user functions.
pub type WorkerRng = rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum CommsMode {
    /// Every worker is its own thread; a persistent generator occupies one
    /// of them.
    #[default]
    Local,
    /// The generator runs in a context owned by the manager (worker 0) and
    /// all `nworkers` workers simulate.
    GenOnManager,
}

/// Fires when any returned record's `field` is at or below `threshold`.
/// `field` is `"f"` or `"x<i>"`.
#[derive(Debug, Clone, PartialEq)]
pub struct StopVal {
    pub field: String,
    pub threshold: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExitCriteria {
    /// Returned records, counting any supplied history.
    pub sim_max: Option<usize>,
    /// Generated records, counting any supplied history.
    pub gen_max: Option<usize>,
    pub wallclock_max: Option<Duration>,
    pub stop_val: Option<StopVal>,
}

impl ExitCriteria {
    pub fn sim_max(n: usize) -> Self {
        Self {
            sim_max: Some(n),
            ..Default::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.sim_max.is_none()
            && self.gen_max.is_none()
            && self.wallclock_max.is_none()
            && self.stop_val.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompletionFlag {
    SimMax,
    GenMax,
    Wallclock,
    StopVal,
    /// The persistent generator returned and no work was left.
    GenFinished,
    /// Nothing running and nothing the allocator could hand out.
    NoWork,
}

/// Evaluates the exit criteria. `elapsed` is this run's wall time.
pub fn check_exit(
    history: &History,
    elapsed: Duration,
    criteria: &ExitCriteria,
) -> Option<CompletionFlag> {
    if criteria.sim_max.is_some_and(|m| history.returned_count() >= m) {
        return Some(CompletionFlag::SimMax);
    }
    if criteria.gen_max.is_some_and(|m| history.len() >= m) {
        return Some(CompletionFlag::GenMax);
    }
    if criteria.wallclock_max.is_some_and(|w| elapsed >= w) {
        return Some(CompletionFlag::Wallclock);
    }
    if let Some(sv) = &criteria.stop_val {
        let value = |r: &crate::history::EnsembleRecord| -> Option<f64> {
            if sv.field == "f" {
                Some(r.f)
            } else {
                sv.field
                    .strip_prefix('x')
                    .and_then(|i| i.parse::<usize>().ok())
                    .and_then(|i| r.x.get(i).copied())
            }
        };
        let hit = history
            .records()
            .iter()
            .filter(|r| r.returned)
            .filter_map(value)
            .any(|v| v <= sv.threshold);
        if hit {
            return Some(CompletionFlag::StopVal);
        }
    }
    None
}

/// Resource pool and scheduler options used to place simulations.
#[derive(Debug, Clone)]
pub struct ResourceConfig {
    pub pool: ResourcePool,
    pub options: ScheduleOptions,
}

#[derive(Debug, Clone)]
pub struct EnsembleConfig {
    pub dim: usize,
    pub nworkers: usize,
    pub comms: CommsMode,
    pub exit: ExitCriteria,
    /// Simulation workers draw from `seed + worker_id`; the generator from
    /// `seed`.
    pub seed: u64,
    pub ensemble_dir: Option<PathBuf>,
    pub history_path: Option<PathBuf>,
    /// Dump the history after this many newly returned records.
    pub dump_every: usize,
    pub abort_on_exception: bool,
    pub resources: Option<ResourceConfig>,
    pub executor: Option<Arc<Executor>>,
}

impl EnsembleConfig {
    pub fn new(dim: usize, nworkers: usize, exit: ExitCriteria) -> Self {
        Self {
            dim,
            nworkers,
            comms: CommsMode::Local,
            exit,
            seed: 0,
            ensemble_dir: None,
            history_path: None,
            dump_every: 50,
            abort_on_exception: true,
            resources: None,
            executor: None,
        }
    }

    fn validate(&self) -> Result<(), EnsembleError> {
        let bad = |m: &str| Err(EnsembleError::Config(m.to_string()));
        if self.nworkers == 0 {
            return bad("nworkers must be at least 1");
        }
        if self.exit.is_empty() {
            return bad("at least one exit criterion is required");
        }
        if self.dump_every == 0 {
            return bad("dump_every must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("invalid ensemble configuration: {0}")]
    Config(String),
    #[error("user function failed on worker {worker}: {message}")]
    UserFunction { worker: WorkerId, message: String },
    #[error("history error: {0}")]
    History(#[from] HistoryError),
    #[error("resource error: {0}")]
    Resources(#[from] ResourceError),
    #[error("worker {0} disconnected")]
    WorkerLost(WorkerId),
}
