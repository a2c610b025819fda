use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{Receiver, Sender};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::message::{FromWorker, ToWorker};
use super::persistent::PersistentCtx;
use crate::executor::{Executor, WorkerControl};
use crate::history::{CalcStatus, EnsembleRecord, NewPoint, WorkerId};
use crate::resources::Assignment;

pub type UserError = Box<dyn std::error::Error + Send + Sync>;

/// What a simulator reports for its batch: one `f` per input record.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub f: Vec<f64>,
    pub status: CalcStatus,
}

impl SimOutput {
    pub fn completed(f: Vec<f64>) -> Self {
        Self {
            f,
            status: CalcStatus::Completed,
        }
    }

    /// NaN outputs for `n` records whose evaluation was killed.
    pub fn killed(n: usize) -> Self {
        Self {
            f: vec![f64::NAN; n],
            status: CalcStatus::Killed,
        }
    }

    pub fn failed(n: usize) -> Self {
        Self {
            f: vec![f64::NAN; n],
            status: CalcStatus::Failed,
        }
    }
}

/// Everything a simulator call can reach besides its input records.
pub struct SimCtx<'a> {
    pub worker_id: WorkerId,
    pub assignment: Option<&'a Assignment>,
    pub executor: Option<&'a Executor>,
    /// Per-evaluation directory, when the ensemble has one.
    pub workdir: Option<&'a Path>,
    pub control: &'a mut WorkerControl,
    pub rng: &'a mut ChaCha8Rng,
}

impl SimCtx<'_> {
    /// The evaluation directory, or the process's current directory.
    pub fn workdir_or_cwd(&self) -> PathBuf {
        self.workdir
            .map(Path::to_path_buf)
            .unwrap_or_else(|| std::env::current_dir().unwrap_or_else(|_| PathBuf::from(".")))
    }
}

pub type SimFn =
    Arc<dyn Fn(&[EnsembleRecord], &mut SimCtx<'_>) -> Result<SimOutput, UserError> + Send + Sync>;

/// Called once per generation request with a copy of the history.
pub type OneShotGenFn = Arc<
    dyn Fn(&[EnsembleRecord], &mut ChaCha8Rng) -> Result<Vec<NewPoint>, UserError> + Send + Sync,
>;

/// Runs for the life of the ensemble, exchanging batches with the manager.
pub type PersistentGenFn =
    Arc<dyn Fn(&mut PersistentCtx<'_>) -> Result<(), UserError> + Send + Sync>;

#[derive(Clone)]
pub enum GenFn {
    OneShot(OneShotGenFn),
    Persistent(PersistentGenFn),
}

impl GenFn {
    pub fn one_shot<F>(f: F) -> Self
    where
        F: Fn(&[EnsembleRecord], &mut ChaCha8Rng) -> Result<Vec<NewPoint>, UserError>
            + Send
            + Sync
            + 'static,
    {
        Self::OneShot(Arc::new(f))
    }

    pub fn persistent<F>(f: F) -> Self
    where
        F: Fn(&mut PersistentCtx<'_>) -> Result<(), UserError> + Send + Sync + 'static,
    {
        Self::Persistent(Arc::new(f))
    }

    pub fn is_persistent(&self) -> bool {
        matches!(self, Self::Persistent(_))
    }
}

impl std::fmt::Debug for GenFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(if self.is_persistent() {
            "GenFn::Persistent"
        } else {
            "GenFn::OneShot"
        })
    }
}

pub(crate) struct WorkerSetup {
    pub worker_id: WorkerId,
    pub seed: u64,
    pub gen: GenFn,
    pub sim: SimFn,
    pub executor: Option<Arc<Executor>>,
    pub ensemble_dir: Option<PathBuf>,
    pub to_manager: Sender<FromWorker>,
    pub rx: Receiver<ToWorker>,
    pub control: WorkerControl,
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        format!("panic: {s}")
    } else if let Some(s) = p.downcast_ref::<String>() {
        format!("panic: {s}")
    } else {
        "panic".to_string()
    }
}

fn call<T>(f: impl FnOnce() -> Result<T, UserError>) -> Result<T, String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(v)) => Ok(v),
        Ok(Err(e)) => Err(e.to_string()),
        Err(p) => Err(panic_message(p)),
    }
}

/// Receives work until told to stop. Evaluations run in
/// `ensemble_dir/worker<k>/sim<id>` when an ensemble directory is set.
pub(crate) fn worker_loop(mut s: WorkerSetup) {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed.wrapping_add(s.worker_id as u64));
    let id = s.worker_id;
    loop {
        let Ok(msg) = s.rx.recv() else { return };
        match msg {
            ToWorker::Sim {
                sim_ids,
                records,
                assignment,
            } => {
                s.control.set_active(&sim_ids);
                let dir = s.ensemble_dir.as_ref().map(|d| {
                    d.join(format!("worker{id}"))
                        .join(format!("sim{}", sim_ids.first().copied().unwrap_or(0)))
                });
                let outcome = match dir.as_ref().map(fs::create_dir_all) {
                    Some(Err(e)) => Err(format!("cannot create sim directory: {e}")),
                    _ => call(|| {
                        let mut ctx = SimCtx {
                            worker_id: id,
                            assignment: assignment.as_ref(),
                            executor: s.executor.as_deref(),
                            workdir: dir.as_deref(),
                            control: &mut s.control,
                            rng: &mut rng,
                        };
                        (s.sim)(&records, &mut ctx)
                    }),
                };
                s.control.set_active(&[]);
                let _ = s.to_manager.send(FromWorker::SimDone {
                    worker: id,
                    sim_ids,
                    outcome,
                });
            }
            ToWorker::Gen { snapshot, mut rng } => {
                let GenFn::OneShot(gen) = &s.gen else {
                    let _ = s.to_manager.send(FromWorker::GenError {
                        worker: id,
                        message: "one-shot generation requested from a persistent generator".into(),
                        rng: Some(rng),
                    });
                    continue;
                };
                let msg = match call(|| gen(&snapshot, &mut rng)) {
                    Ok(points) => FromWorker::GenPoints {
                        worker: id,
                        points,
                        done: Some(rng),
                    },
                    Err(message) => FromWorker::GenError {
                        worker: id,
                        message,
                        rng: Some(rng),
                    },
                };
                let _ = s.to_manager.send(msg);
            }
            ToWorker::PersistentGen { h_in, rng } => {
                let GenFn::Persistent(gen) = &s.gen else {
                    let _ = s.to_manager.send(FromWorker::GenFinished {
                        worker: id,
                        result: Err("persistent generation requested from a one-shot generator".into()),
                    });
                    continue;
                };
                let mut ctx = PersistentCtx::new(id, &s.to_manager, &s.rx, rng, h_in);
                let result = call(|| gen(&mut ctx));
                let stopped = ctx.stopped().is_some();
                let _ = s.to_manager.send(FromWorker::GenFinished { worker: id, result });
                if stopped {
                    return;
                }
            }
            ToWorker::Results(_) => {
                log::warn!("worker {id}: result batch arrived with no persistent generator");
            }
            ToWorker::Stop | ToWorker::PersisStop => return,
        }
    }
}
