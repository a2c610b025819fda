use std::collections::{HashMap, HashSet};

use rand_chacha::ChaCha8Rng;

use super::worker::SimOutput;
use crate::history::{EnsembleRecord, NewPoint, SimId, WorkerId};
use crate::resources::Assignment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageTag {
    EvalGen,
    EvalSim,
    Stop,
    PersisStop,
    FinishedPersistentGen,
    Result,
    Kill,
}

/// Manager to worker, on the data channel.
#[derive(Debug)]
pub(crate) enum ToWorker {
    Sim {
        sim_ids: Vec<SimId>,
        records: Vec<EnsembleRecord>,
        assignment: Option<Assignment>,
    },
    Gen {
        snapshot: Vec<EnsembleRecord>,
        rng: ChaCha8Rng,
    },
    PersistentGen {
        h_in: Vec<EnsembleRecord>,
        rng: ChaCha8Rng,
    },
    Results(Vec<EnsembleRecord>),
    Stop,
    PersisStop,
}

/// Worker to manager.
#[derive(Debug)]
pub(crate) enum FromWorker {
    SimDone {
        worker: WorkerId,
        sim_ids: Vec<SimId>,
        outcome: Result<SimOutput, String>,
    },
    /// Points from a generator. A one-shot generator's call ends with
    /// `done`, which hands its random stream back.
    GenPoints {
        worker: WorkerId,
        points: Vec<NewPoint>,
        done: Option<ChaCha8Rng>,
    },
    GenError {
        worker: WorkerId,
        message: String,
        rng: Option<ChaCha8Rng>,
    },
    /// The persistent generator is about to block on a receive, having
    /// taken in `received` result batches so far.
    GenBlocked { worker: WorkerId, received: usize },
    GenCancel {
        worker: WorkerId,
        sim_ids: Vec<SimId>,
    },
    GenFinished {
        worker: WorkerId,
        result: Result<(), String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ToWorker,
    FromWorker,
}

/// One protocol message as seen by the manager.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub direction: Direction,
    pub tag: MessageTag,
    pub worker: WorkerId,
    pub sim_ids: Vec<SimId>,
}

/// Checks protocol soundness of a manager trace: each sim id is sent out
/// for evaluation at most once, and every simulation result answers an
/// outstanding dispatch to the same worker.
pub fn validate_trace(trace: &[TraceEvent]) -> Result<(), String> {
    let mut dispatched: HashSet<SimId> = HashSet::new();
    let mut running: HashMap<SimId, WorkerId> = HashMap::new();
    for (i, e) in trace.iter().enumerate() {
        match (e.direction, e.tag) {
            (Direction::ToWorker, MessageTag::EvalSim) => {
                for &id in &e.sim_ids {
                    if !dispatched.insert(id) {
                        return Err(format!("event {i}: sim {id} dispatched twice"));
                    }
                    running.insert(id, e.worker);
                }
            }
            (Direction::FromWorker, MessageTag::Result) => {
                for &id in &e.sim_ids {
                    match running.remove(&id) {
                        Some(w) if w == e.worker => {}
                        Some(w) => {
                            return Err(format!(
                                "event {i}: sim {id} returned by worker {} but ran on {w}",
                                e.worker
                            ))
                        }
                        None => {
                            return Err(format!("event {i}: result for sim {id} without dispatch"))
                        }
                    }
                }
            }
            _ => {}
        }
    }
    Ok(())
}
