use std::collections::HashSet;
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::alloc::{AllocContext, Allocator, GenView, Work, WorkerState, WorkerStatus};
use super::message::{Direction, FromWorker, MessageTag, ToWorker, TraceEvent};
use super::worker::{worker_loop, GenFn, SimFn, SimOutput, WorkerSetup};
use super::{check_exit, CommsMode, CompletionFlag, EnsembleConfig, EnsembleError};
use crate::executor::{ControlSignal, WorkerControl};
use crate::history::{CalcStatus, EnsembleRecord, History, SimId, SimReturn, WorkerId};
use crate::resources::{ResourcePool, ScheduleOptions};

/// Longest the manager blocks waiting for a message before rechecking the
/// wall clock.
const MAX_WAIT: Duration = Duration::from_millis(200);

#[derive(Debug)]
pub struct RunOutcome {
    pub history: History,
    pub flag: CompletionFlag,
    /// Every protocol message in the order the manager saw it.
    pub trace: Vec<TraceEvent>,
}

struct Link {
    data: Sender<ToWorker>,
    control: Sender<ControlSignal>,
}

struct Manager {
    cfg: EnsembleConfig,
    history: History,
    h_in: Vec<EnsembleRecord>,
    workers: Vec<WorkerState>,
    links: Vec<Link>,
    handles: Vec<JoinHandle<()>>,
    rx: Receiver<FromWorker>,
    gen: GenView,
    gen_blocked: bool,
    /// Result batches sent to the persistent generator.
    gen_results_sent: usize,
    gen_rng: Option<ChaCha8Rng>,
    pool: Option<(ResourcePool, ScheduleOptions)>,
    warned: HashSet<SimId>,
    trace: Vec<TraceEvent>,
    start: Instant,
    dumped_at: usize,
    shutting_down: bool,
}

/// Runs an ensemble to completion and returns the final history and which
/// criterion ended it. `h0` is the history of an earlier run to extend.
pub fn run_ensemble(
    config: EnsembleConfig,
    gen: GenFn,
    sim: SimFn,
    alloc: Box<dyn Allocator>,
    h0: Option<History>,
) -> Result<(History, CompletionFlag), EnsembleError> {
    let out = run_ensemble_traced(config, gen, sim, alloc, h0)?;
    Ok((out.history, out.flag))
}

/// [`run_ensemble`] that also returns the manager's message trace.
pub fn run_ensemble_traced(
    mut config: EnsembleConfig,
    gen: GenFn,
    sim: SimFn,
    mut alloc: Box<dyn Allocator>,
    h0: Option<History>,
) -> Result<RunOutcome, EnsembleError> {
    config.validate()?;
    let history = match h0 {
        Some(h) if h.dim() != config.dim => {
            return Err(EnsembleError::Config(format!(
                "supplied history has dimension {}, ensemble uses {}",
                h.dim(),
                config.dim
            )))
        }
        Some(h) => h,
        None => History::new(config.dim),
    };
    let h_in = history.records().to_vec();
    let (to_manager, rx) = channel();

    let ids: Vec<(WorkerId, bool, bool)> = match config.comms {
        CommsMode::Local => (1..=config.nworkers).map(|i| (i, true, true)).collect(),
        CommsMode::GenOnManager => std::iter::once((0, false, true))
            .chain((1..=config.nworkers).map(|i| (i, true, false)))
            .collect(),
    };
    let mut workers = Vec::new();
    let mut links = Vec::new();
    let mut handles = Vec::new();
    for (worker_id, can_sim, can_gen) in ids {
        let (data_tx, data_rx) = channel();
        let (ctl_tx, ctl_rx) = channel();
        let setup = WorkerSetup {
            worker_id,
            seed: config.seed,
            gen: gen.clone(),
            sim: SimFn::clone(&sim),
            executor: config.executor.clone(),
            ensemble_dir: config.ensemble_dir.clone(),
            to_manager: to_manager.clone(),
            rx: data_rx,
            control: WorkerControl::new(ctl_rx),
        };
        let handle = thread::Builder::new()
            .name(format!("worker{worker_id}"))
            .spawn(move || worker_loop(setup))
            .map_err(|e| EnsembleError::Config(format!("cannot start worker thread: {e}")))?;
        workers.push(WorkerState {
            worker_id,
            status: WorkerStatus::Idle,
            active_ids: Vec::new(),
            assignment: None,
            can_sim,
            can_gen,
        });
        links.push(Link {
            data: data_tx,
            control: ctl_tx,
        });
        handles.push(handle);
    }
    drop(to_manager);

    let outstanding: Vec<SimId> = history
        .records()
        .iter()
        .filter(|r| !r.returned && !(r.cancel_requested && !r.given))
        .map(|r| r.sim_id)
        .collect();
    let pool = config.resources.take().map(|r| (r.pool, r.options));
    let dumped_at = history.returned_count();
    let mut m = Manager {
        gen: GenView {
            persistent: gen.is_persistent(),
            outstanding,
            ..Default::default()
        },
        gen_rng: Some(ChaCha8Rng::seed_from_u64(config.seed)),
        cfg: config,
        history,
        h_in,
        workers,
        links,
        handles,
        rx,
        gen_blocked: false,
        gen_results_sent: 0,
        pool,
        warned: HashSet::new(),
        trace: Vec::new(),
        start: Instant::now(),
        dumped_at,
        shutting_down: false,
    };
    let result = m.run(alloc.as_mut());
    m.shutdown();
    match result {
        Ok(flag) => {
            log::info!(
                "ensemble finished ({flag:?}): {} points, {} returned",
                m.history.len(),
                m.history.returned_count()
            );
            m.dump()?;
            Ok(RunOutcome {
                history: m.history,
                flag,
                trace: m.trace,
            })
        }
        Err(e) => {
            log::error!("ensemble aborted: {e}");
            if let Err(d) = m.dump() {
                log::error!("history dump after abort failed: {d}");
            }
            Err(e)
        }
    }
}

impl Manager {
    fn index(&self, worker: WorkerId) -> usize {
        self.workers
            .iter()
            .position(|w| w.worker_id == worker)
            .expect("message from a known worker")
    }

    fn log_event(&mut self, direction: Direction, tag: MessageTag, worker: WorkerId, ids: &[SimId]) {
        self.trace.push(TraceEvent {
            direction,
            tag,
            worker,
            sim_ids: ids.to_vec(),
        });
    }

    fn send(&self, worker: WorkerId, msg: ToWorker) -> Result<(), EnsembleError> {
        self.links[self.index(worker)]
            .data
            .send(msg)
            .map_err(|_| EnsembleError::WorkerLost(worker))
    }

    fn quiescent(&self) -> bool {
        let busy = self
            .workers
            .iter()
            .any(|w| matches!(w.status, WorkerStatus::BusySim | WorkerStatus::BusyGen));
        let gen_working = self.gen.host.is_some() && !self.gen_blocked;
        !busy && !gen_working
    }

    fn run(&mut self, alloc: &mut dyn Allocator) -> Result<CompletionFlag, EnsembleError> {
        loop {
            if let Some(flag) = check_exit(&self.history, self.start.elapsed(), &self.cfg.exit) {
                return Ok(flag);
            }
            self.gen.exhausted = self
                .cfg
                .exit
                .gen_max
                .is_some_and(|g| self.history.len() >= g);
            let budget = self
                .cfg
                .exit
                .sim_max
                .map_or(usize::MAX, |m| m.saturating_sub(self.history.given_count()));
            let works = {
                let mut ctx = AllocContext::new(
                    &self.history,
                    &self.workers,
                    &self.gen,
                    budget,
                    self.pool.as_mut().map(|(p, o)| (p, *o)),
                    &mut self.warned,
                );
                alloc.allocate(&mut ctx)?
            };
            let dispatched = !works.is_empty();
            for w in works {
                self.dispatch(w)?;
            }
            if !dispatched && self.quiescent() {
                return Ok(if self.gen.finished {
                    CompletionFlag::GenFinished
                } else {
                    CompletionFlag::NoWork
                });
            }
            let wait = match self.cfg.exit.wallclock_max {
                Some(w) => w.saturating_sub(self.start.elapsed()).min(MAX_WAIT),
                None => MAX_WAIT,
            };
            match self.rx.recv_timeout(wait) {
                Ok(msg) => {
                    self.handle(msg)?;
                    while let Ok(msg) = self.rx.try_recv() {
                        self.handle(msg)?;
                    }
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return Err(EnsembleError::WorkerLost(0)),
            }
        }
    }

    fn dispatch(&mut self, work: Work) -> Result<(), EnsembleError> {
        match work {
            Work::Sim {
                worker,
                sim_ids,
                assignment,
            } => {
                let i = self.index(worker);
                if !self.workers[i].idle() || !self.workers[i].can_sim {
                    return Err(EnsembleError::Config(format!(
                        "allocator gave simulation work to unavailable worker {worker}"
                    )));
                }
                let now = self.history.elapsed();
                self.history.mark_given(&sim_ids, worker, now)?;
                let records: Vec<EnsembleRecord> = sim_ids
                    .iter()
                    .map(|&id| self.history.records()[id].clone())
                    .collect();
                self.log_event(Direction::ToWorker, MessageTag::EvalSim, worker, &sim_ids);
                let w = &mut self.workers[i];
                w.status = WorkerStatus::BusySim;
                w.active_ids = sim_ids.clone();
                w.assignment = assignment.clone();
                self.send(
                    worker,
                    ToWorker::Sim {
                        sim_ids,
                        records,
                        assignment,
                    },
                )
            }
            Work::Gen { worker, persistent } => {
                let i = self.index(worker);
                if !self.workers[i].idle() || !self.workers[i].can_gen {
                    return Err(EnsembleError::Config(format!(
                        "allocator gave generation work to unavailable worker {worker}"
                    )));
                }
                self.log_event(Direction::ToWorker, MessageTag::EvalGen, worker, &[]);
                if persistent {
                    self.workers[i].status = WorkerStatus::PersistentGen;
                    self.gen.host = Some(worker);
                    self.gen_blocked = false;
                    self.gen_results_sent = 0;
                    let msg = ToWorker::PersistentGen {
                        h_in: self.h_in.clone(),
                        rng: ChaCha8Rng::seed_from_u64(self.cfg.seed),
                    };
                    self.send(worker, msg)
                } else {
                    let Some(rng) = self.gen_rng.take() else {
                        return Err(EnsembleError::Config(
                            "second generation request while one is running".into(),
                        ));
                    };
                    self.workers[i].status = WorkerStatus::BusyGen;
                    self.gen.in_flight = true;
                    let snapshot = self.history.records().to_vec();
                    self.send(worker, ToWorker::Gen { snapshot, rng })
                }
            }
            Work::GenResults { worker, sim_ids } => {
                let records: Vec<EnsembleRecord> = sim_ids
                    .iter()
                    .map(|&id| self.history.records()[id].clone())
                    .collect();
                self.log_event(Direction::ToWorker, MessageTag::Result, worker, &sim_ids);
                let done: HashSet<SimId> = sim_ids.into_iter().collect();
                self.gen.outstanding.retain(|id| !done.contains(id));
                self.gen_blocked = false;
                self.gen_results_sent += 1;
                self.send(worker, ToWorker::Results(records))
            }
        }
    }

    fn user_error(&self, worker: WorkerId, message: String) -> Result<(), EnsembleError> {
        if self.cfg.abort_on_exception && !self.shutting_down {
            Err(EnsembleError::UserFunction { worker, message })
        } else {
            log::error!("worker {worker}: {message}");
            Ok(())
        }
    }

    fn handle(&mut self, msg: FromWorker) -> Result<(), EnsembleError> {
        match msg {
            FromWorker::SimDone {
                worker,
                sim_ids,
                outcome,
            } => {
                self.log_event(Direction::FromWorker, MessageTag::Result, worker, &sim_ids);
                let i = self.index(worker);
                let w = &mut self.workers[i];
                w.status = WorkerStatus::Idle;
                w.active_ids.clear();
                if let (Some(a), Some((pool, _))) = (w.assignment.take(), self.pool.as_mut()) {
                    pool.release(&a)?;
                }
                let out = match outcome {
                    Ok(out) if out.f.len() == sim_ids.len() => out,
                    Ok(out) => {
                        self.user_error(
                            worker,
                            format!("simulator returned {} values for {} points", out.f.len(), sim_ids.len()),
                        )?;
                        SimOutput::failed(sim_ids.len())
                    }
                    Err(message) => {
                        self.user_error(worker, message)?;
                        SimOutput::failed(sim_ids.len())
                    }
                };
                let t = self.history.elapsed();
                let returns: Vec<SimReturn> = sim_ids
                    .iter()
                    .zip(&out.f)
                    .map(|(&sim_id, &f)| SimReturn {
                        sim_id,
                        f,
                        sim_worker: worker,
                        returned_time: t,
                        status: out.status,
                    })
                    .collect();
                self.history.update_with_results(&returns)?;
                if out.status == CalcStatus::Killed {
                    log::info!("sims {sim_ids:?} killed on worker {worker}");
                }
                if self.history.returned_count() >= self.dumped_at + self.cfg.dump_every {
                    self.dump()?;
                }
            }
            FromWorker::GenPoints {
                worker,
                points,
                done,
            } => {
                if let Some(rng) = done {
                    self.gen_rng = Some(rng);
                    self.gen.in_flight = false;
                    let i = self.index(worker);
                    self.workers[i].status = WorkerStatus::Idle;
                    if points.is_empty() {
                        self.gen.finished = true;
                    }
                }
                if self.shutting_down {
                    if !points.is_empty() {
                        log::debug!("dropping {} points generated during shutdown", points.len());
                    }
                    return Ok(());
                }
                let ids = match self.history.submit_points(&points, worker) {
                    Ok(ids) => ids,
                    Err(e) => return self.user_error(worker, format!("bad generator output: {e}")),
                };
                self.log_event(Direction::FromWorker, MessageTag::EvalGen, worker, &ids);
                if self.gen.persistent {
                    self.gen.outstanding.extend(ids);
                }
            }
            FromWorker::GenError {
                worker,
                message,
                rng,
            } => {
                if let Some(rng) = rng {
                    self.gen_rng = Some(rng);
                }
                self.gen.in_flight = false;
                self.gen.finished = true;
                let i = self.index(worker);
                self.workers[i].status = WorkerStatus::Idle;
                self.user_error(worker, message)?;
            }
            FromWorker::GenBlocked { worker, received } => {
                // A notice sent before the generator saw the latest batch
                // is stale: it is already computing again.
                if self.gen.host == Some(worker) && received == self.gen_results_sent {
                    self.gen_blocked = true;
                }
            }
            FromWorker::GenCancel { worker, sim_ids } => {
                if self.shutting_down {
                    return Ok(());
                }
                let kills = match self.history.mark_cancel(&sim_ids) {
                    Ok(k) => k,
                    Err(e) => return self.user_error(worker, format!("bad cancel request: {e}")),
                };
                for id in kills {
                    let Some(holder) = self
                        .workers
                        .iter()
                        .position(|w| w.active_ids.contains(&id))
                    else {
                        continue;
                    };
                    let target = self.workers[holder].worker_id;
                    let _ = self.links[holder].control.send(ControlSignal::Kill(id));
                    self.log_event(Direction::ToWorker, MessageTag::Kill, target, &[id]);
                    self.history.set_kill_sent(&[id])?;
                }
            }
            FromWorker::GenFinished { worker, result } => {
                self.log_event(
                    Direction::FromWorker,
                    MessageTag::FinishedPersistentGen,
                    worker,
                    &[],
                );
                self.gen.host = None;
                self.gen.finished = true;
                self.gen_blocked = false;
                let i = self.index(worker);
                self.workers[i].status = WorkerStatus::Idle;
                if let Err(message) = result {
                    // A crashed persistent generator leaves nothing to drive
                    // the ensemble, so this aborts whatever the config says.
                    if !self.shutting_down {
                        return Err(EnsembleError::UserFunction { worker, message });
                    }
                    log::error!("worker {worker}: {message}");
                }
            }
        }
        Ok(())
    }

    /// Stops every worker, takes in results still arriving, joins the
    /// threads and frees all resources.
    fn shutdown(&mut self) {
        self.shutting_down = true;
        for i in 0..self.workers.len() {
            let id = self.workers[i].worker_id;
            let persistent = self.workers[i].status == WorkerStatus::PersistentGen;
            let (tag, msg) = if persistent {
                (MessageTag::PersisStop, ToWorker::PersisStop)
            } else {
                (MessageTag::Stop, ToWorker::Stop)
            };
            let _ = self.links[i].control.send(ControlSignal::Stop);
            let _ = self.links[i].data.send(msg);
            self.log_event(Direction::ToWorker, tag, id, &[]);
        }
        while self.handles.iter().any(|h| !h.is_finished()) {
            match self.rx.recv_timeout(Duration::from_millis(10)) {
                Ok(msg) => {
                    if let Err(e) = self.handle(msg) {
                        log::warn!("during shutdown: {e}");
                    }
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
        }
        while let Ok(msg) = self.rx.try_recv() {
            if let Err(e) = self.handle(msg) {
                log::warn!("during shutdown: {e}");
            }
        }
        for h in self.handles.drain(..) {
            if h.join().is_err() {
                log::error!("a worker thread panicked outside a user function");
            }
        }
        for w in &mut self.workers {
            w.status = WorkerStatus::Idle;
            w.active_ids.clear();
            if let (Some(a), Some((pool, _))) = (w.assignment.take(), self.pool.as_mut()) {
                let _ = pool.release(&a);
            }
        }
    }

    fn dump(&mut self) -> Result<(), EnsembleError> {
        self.dumped_at = self.history.returned_count();
        if let Some(path) = &self.cfg.history_path {
            self.history.dump(path)?;
        }
        Ok(())
    }
}
