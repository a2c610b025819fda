use std::collections::HashSet;

use crate::history::{History, SimId, WorkerId};
use crate::resources::{Assignment, ResourceError, ResourcePool, ResourceRequest, ScheduleOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkerStatus {
    Idle,
    BusySim,
    BusyGen,
    PersistentGen,
}

#[derive(Debug, Clone)]
pub struct WorkerState {
    pub worker_id: WorkerId,
    pub status: WorkerStatus,
    pub active_ids: Vec<SimId>,
    pub assignment: Option<Assignment>,
    pub can_sim: bool,
    pub can_gen: bool,
}

impl WorkerState {
    pub fn idle(&self) -> bool {
        self.status == WorkerStatus::Idle
    }
}

/// One allocation decision.
#[derive(Debug, Clone, PartialEq)]
pub enum Work {
    Sim {
        worker: WorkerId,
        sim_ids: Vec<SimId>,
        assignment: Option<Assignment>,
    },
    Gen {
        worker: WorkerId,
        persistent: bool,
    },
    /// Hand evaluated records back to the running persistent generator.
    GenResults {
        worker: WorkerId,
        sim_ids: Vec<SimId>,
    },
}

/// What the allocator knows about the generator.
#[derive(Debug, Clone, Default)]
pub struct GenView {
    pub persistent: bool,
    /// Worker hosting the running persistent generator.
    pub host: Option<WorkerId>,
    pub finished: bool,
    /// A one-shot generation is running.
    pub in_flight: bool,
    /// Points the persistent generator has issued and not yet seen results
    /// for, in issue order.
    pub outstanding: Vec<SimId>,
    /// gen_max reached: no more generation requests.
    pub exhausted: bool,
}

/// The allocator's view of the ensemble. History and workers are
/// read-only; resources can be scheduled through [`AllocContext::schedule`].
pub struct AllocContext<'a> {
    pub history: &'a History,
    pub workers: &'a [WorkerState],
    pub gen: &'a GenView,
    /// How many more simulations may be handed out.
    pub sim_budget: usize,
    resources: Option<(&'a mut ResourcePool, ScheduleOptions)>,
    warned: &'a mut HashSet<SimId>,
}

impl<'a> AllocContext<'a> {
    pub(crate) fn new(
        history: &'a History,
        workers: &'a [WorkerState],
        gen: &'a GenView,
        sim_budget: usize,
        resources: Option<(&'a mut ResourcePool, ScheduleOptions)>,
        warned: &'a mut HashSet<SimId>,
    ) -> Self {
        Self {
            history,
            workers,
            gen,
            sim_budget,
            resources,
            warned,
        }
    }

    pub fn has_resources(&self) -> bool {
        self.resources.is_some()
    }

    /// Reserves resources for a record. `Ok(None)` means not now; a request
    /// that could never fit is logged once and also deferred.
    pub fn schedule(&mut self, sim_id: SimId) -> Result<Option<Option<Assignment>>, ResourceError> {
        let Some((pool, opts)) = self.resources.as_mut() else {
            return Ok(Some(None));
        };
        let rec = &self.history.records()[sim_id];
        let req = ResourceRequest::from_record(rec.num_procs, rec.num_gpus);
        match pool.schedule(&req, *opts) {
            Ok(a) => Ok(Some(Some(a))),
            Err(ResourceError::Insufficient { ever }) => {
                if !ever && self.warned.insert(sim_id) {
                    log::warn!(
                        "sim {sim_id} requests {req:?}, more than the whole machine offers; deferred"
                    );
                }
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    /// Returns a reservation made during this allocation pass.
    pub fn unschedule(&mut self, assignment: &Assignment) {
        if let Some((pool, _)) = self.resources.as_mut() {
            let _ = pool.release(assignment);
        }
    }
}

pub trait Allocator: Send {
    fn allocate(&mut self, ctx: &mut AllocContext<'_>) -> Result<Vec<Work>, ResourceError>;
}

/// Gives the highest-priority schedulable pending point to an idle
/// simulation worker, if there is one. `taken` collects ids handed out in
/// this pass.
fn give_sim(
    ctx: &mut AllocContext<'_>,
    worker: WorkerId,
    pending: &[SimId],
    taken: &mut HashSet<SimId>,
) -> Result<Option<Work>, ResourceError> {
    if ctx.sim_budget == 0 {
        return Ok(None);
    }
    for &id in pending {
        if taken.contains(&id) {
            continue;
        }
        if let Some(assignment) = ctx.schedule(id)? {
            taken.insert(id);
            ctx.sim_budget -= 1;
            return Ok(Some(Work::Sim {
                worker,
                sim_ids: vec![id],
                assignment,
            }));
        }
    }
    Ok(None)
}

/// For each idle worker in id order: the best pending point if one can be
/// placed, else a generation request when none is running.
pub fn default_alloc(ctx: &mut AllocContext<'_>) -> Result<Vec<Work>, ResourceError> {
    let pending = ctx.history.pending_sims();
    let mut taken = HashSet::new();
    let mut gen_running = ctx.gen.in_flight || ctx.gen.host.is_some();
    let mut out = Vec::new();
    let workers = ctx.workers;
    for w in workers.iter().filter(|w| w.idle()) {
        if w.can_sim {
            if let Some(work) = give_sim(ctx, w.worker_id, &pending, &mut taken)? {
                out.push(work);
                continue;
            }
        }
        if w.can_gen && !gen_running && !ctx.gen.finished && !ctx.gen.exhausted {
            out.push(Work::Gen {
                worker: w.worker_id,
                persistent: ctx.gen.persistent,
            });
            gen_running = true;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GiveSimWorkFirst;

impl Allocator for GiveSimWorkFirst {
    fn allocate(&mut self, ctx: &mut AllocContext<'_>) -> Result<Vec<Work>, ResourceError> {
        default_alloc(ctx)
    }
}

/// True once a record needs nothing more: evaluated, or cancelled before
/// it was ever handed out.
fn settled(history: &History, id: SimId) -> bool {
    let r = &history.records()[id];
    r.returned || (r.cancel_requested && !r.given)
}

/// Starts the single persistent generator on the first idle worker able to
/// host it, routes evaluated points back to it and hands pending points to
/// the other workers.
///
/// In batch mode the generator gets its whole outstanding batch back once
/// every point in it is settled; in async mode each returned point goes back
/// as soon as it arrives.
pub fn persistent_alloc(
    ctx: &mut AllocContext<'_>,
    async_mode: bool,
) -> Result<Vec<Work>, ResourceError> {
    let mut out = Vec::new();
    let mut starting = None;
    if ctx.gen.host.is_none() && !ctx.gen.finished && !ctx.gen.exhausted {
        if let Some(w) = ctx.workers.iter().find(|w| w.idle() && w.can_gen) {
            out.push(Work::Gen {
                worker: w.worker_id,
                persistent: true,
            });
            starting = Some(w.worker_id);
        }
    }
    if let Some(host) = ctx.gen.host {
        let ready: Vec<SimId> = if async_mode {
            ctx.gen
                .outstanding
                .iter()
                .copied()
                .filter(|&id| settled(ctx.history, id))
                .collect()
        } else if !ctx.gen.outstanding.is_empty()
            && ctx.gen.outstanding.iter().all(|&id| settled(ctx.history, id))
        {
            ctx.gen.outstanding.clone()
        } else {
            Vec::new()
        };
        if !ready.is_empty() {
            out.push(Work::GenResults {
                worker: host,
                sim_ids: ready,
            });
        }
    }
    let pending = ctx.history.pending_sims();
    let mut taken = HashSet::new();
    let workers = ctx.workers;
    for w in workers.iter().filter(|w| w.idle() && w.can_sim) {
        if Some(w.worker_id) == starting {
            continue;
        }
        if let Some(work) = give_sim(ctx, w.worker_id, &pending, &mut taken)? {
            out.push(work);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OnlyPersistentGens {
    pub async_mode: bool,
}

impl Allocator for OnlyPersistentGens {
    fn allocate(&mut self, ctx: &mut AllocContext<'_>) -> Result<Vec<Work>, ResourceError> {
        persistent_alloc(ctx, self.async_mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::history::NewPoint;
    use crate::resources::{detect_platform, NodeInventory};

    fn workers(n: usize) -> Vec<WorkerState> {
        (1..=n)
            .map(|i| WorkerState {
                worker_id: i,
                status: WorkerStatus::Idle,
                active_ids: vec![],
                assignment: None,
                can_sim: true,
                can_gen: true,
            })
            .collect()
    }

    fn run(
        h: &History,
        ws: &[WorkerState],
        gen: &GenView,
        pool: Option<&mut ResourcePool>,
        persistent: bool,
    ) -> Vec<Work> {
        let mut warned = HashSet::new();
        let opts = ScheduleOptions {
            split2fit: true,
            match_slots: false,
        };
        let mut ctx = AllocContext::new(h, ws, gen, usize::MAX, pool.map(|p| (p, opts)), &mut warned);
        if persistent {
            persistent_alloc(&mut ctx, false).unwrap()
        } else {
            default_alloc(&mut ctx).unwrap()
        }
    }

    #[test]
    fn idle_no_pending_gives_one_gen() {
        let h = History::new(1);
        let w = run(&h, &workers(3), &GenView::default(), None, false);
        assert_eq!(w, vec![Work::Gen { worker: 1, persistent: false }]);
    }

    #[test]
    fn top_priorities_first() {
        let mut h = History::new(1);
        h.submit_points(
            &[
                NewPoint::new(vec![0.0]).with_priority(0.1),
                NewPoint::new(vec![1.0]).with_priority(0.9),
                NewPoint::new(vec![2.0]).with_priority(0.5),
            ],
            0,
        )
        .unwrap();
        let gen = GenView {
            in_flight: true,
            ..Default::default()
        };
        let w = run(&h, &workers(2), &gen, None, false);
        let mut oracle = h.pending_sims();
        oracle.truncate(2);
        let got: Vec<SimId> = w
            .iter()
            .map(|w| match w {
                Work::Sim { sim_ids, .. } => sim_ids[0],
                other => panic!("{other:?}"),
            })
            .collect();
        assert_eq!(got, oracle);
        assert_eq!(got, vec![1, 2]);
    }

    #[test]
    fn oversized_request_deferred() {
        let mut h = History::new(1);
        h.submit_points(
            &[NewPoint::new(vec![0.0]).with_gpus(16), NewPoint::new(vec![1.0]).with_gpus(1)],
            0,
        )
        .unwrap();
        let inv = NodeInventory::uniform(&["n0"], 8, 2).unwrap();
        let p = detect_platform(&Default::default(), &Default::default(), None).unwrap();
        let mut pool = ResourcePool::build(&inv, &p, 2, false, Default::default()).unwrap();
        let gen = GenView {
            in_flight: true,
            ..Default::default()
        };
        let w = run(&h, &workers(2), &gen, Some(&mut pool), false);
        assert_eq!(w.len(), 1);
        match &w[0] {
            Work::Sim { sim_ids, assignment, .. } => {
                assert_eq!(sim_ids, &vec![1]);
                assert_eq!(assignment.as_ref().unwrap().total_gpus, 1);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn persistent_start_and_batch_return() {
        let mut h = History::new(1);
        let w = run(&h, &workers(3), &GenView { persistent: true, ..Default::default() }, None, true);
        assert_eq!(w, vec![Work::Gen { worker: 1, persistent: true }]);

        let ids = h
            .submit_points(&[NewPoint::new(vec![0.0]), NewPoint::new(vec![1.0])], 1)
            .unwrap();
        let mut ws = workers(3);
        ws[0].status = WorkerStatus::PersistentGen;
        let gen = GenView {
            persistent: true,
            host: Some(1),
            outstanding: ids.clone(),
            ..Default::default()
        };
        let w = run(&h, &ws, &gen, None, true);
        assert_eq!(w.len(), 2);
        assert!(w.iter().all(|w| matches!(w, Work::Sim { .. })));

        h.mark_given(&[0, 1], 2, 0.0).unwrap();
        h.update_with_results(&[crate::history::SimReturn {
            sim_id: 0,
            f: 1.0,
            sim_worker: 2,
            returned_time: 0.1,
            status: crate::history::CalcStatus::Completed,
        }])
        .unwrap();
        assert!(run(&h, &ws, &gen, None, true).is_empty());
        h.update_with_results(&[crate::history::SimReturn {
            sim_id: 1,
            f: 2.0,
            sim_worker: 3,
            returned_time: 0.2,
            status: crate::history::CalcStatus::Completed,
        }])
        .unwrap();
        assert_eq!(
            run(&h, &ws, &gen, None, true),
            vec![Work::GenResults { worker: 1, sim_ids: vec![0, 1] }]
        );
    }
}
