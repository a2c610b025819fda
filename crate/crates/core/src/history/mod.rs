//! The ensemble history: an append-only table holding every generated point,
//! its evaluation result and its dispatch/cancellation status.
//!
//! Only the manager mutates a [`History`]. Allocators and generators see
//! read-only views or copies.

mod persist;

use std::time::{SystemTime, UNIX_EPOCH};

use thiserror::Error;

pub use persist::{load, meta_path, FORMAT_VERSION};

pub type SimId = usize;
pub type WorkerId = usize;

#[derive(Debug, Error)]
pub enum HistoryError {
    #[error("point {index}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("point {index}: explicit sim_id {got} is not the next free id {expected}")]
    SimIdOutOfOrder {
        index: usize,
        expected: SimId,
        got: SimId,
    },
    #[error("unknown sim_id {0}")]
    UnknownSimId(SimId),
    #[error("sim_id {0} was never given to a simulator")]
    NotGiven(SimId),
    #[error("sim_id {0} was already given")]
    AlreadyGiven(SimId),
    #[error("sim_id {0} already returned")]
    AlreadyReturned(SimId),
    #[error("sim_id {0} is cancelled and cannot be given")]
    Cancelled(SimId),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One row of the history.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleRecord {
    pub sim_id: SimId,
    pub x: Vec<f64>,
    /// Objective value. NaN while missing, or when the evaluation was killed
    /// or failed.
    pub f: f64,
    /// Higher values are dispatched first.
    pub priority: f64,
    pub num_procs: u32,
    pub num_gpus: u32,
    pub gen_worker: WorkerId,
    pub sim_worker: Option<WorkerId>,
    pub given: bool,
    pub returned: bool,
    pub cancel_requested: bool,
    pub kill_sent: bool,
    pub given_time: Option<f64>,
    pub returned_time: Option<f64>,
}

impl EnsembleRecord {
    /// Field-wise equality that treats NaN as equal to NaN.
    pub fn same_as(&self, other: &Self) -> bool {
        self.same_outcome(other)
            && self.gen_worker == other.gen_worker
            && self.sim_worker == other.sim_worker
            && opt_f64_eq(self.given_time, other.given_time)
            && opt_f64_eq(self.returned_time, other.returned_time)
    }

    /// Equality on everything except worker placement and wall-clock times.
    pub fn same_outcome(&self, other: &Self) -> bool {
        self.sim_id == other.sim_id
            && self.x.len() == other.x.len()
            && self.x.iter().zip(&other.x).all(|(a, b)| f64_eq(*a, *b))
            && f64_eq(self.f, other.f)
            && f64_eq(self.priority, other.priority)
            && self.num_procs == other.num_procs
            && self.num_gpus == other.num_gpus
            && self.given == other.given
            && self.returned == other.returned
            && self.cancel_requested == other.cancel_requested
            && self.kill_sent == other.kill_sent
    }
}

fn f64_eq(a: f64, b: f64) -> bool {
    (a.is_nan() && b.is_nan()) || a.to_bits() == b.to_bits()
}

fn opt_f64_eq(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(a), Some(b)) => f64_eq(a, b),
        _ => false,
    }
}

/// A point produced by a generator, before it gets a sim_id.
#[derive(Debug, Clone, PartialEq)]
pub struct NewPoint {
    pub x: Vec<f64>,
    pub priority: f64,
    pub num_procs: u32,
    pub num_gpus: u32,
    pub sim_id: Option<SimId>,
}

impl NewPoint {
    pub fn new(x: Vec<f64>) -> Self {
        Self {
            x,
            priority: 0.0,
            num_procs: 0,
            num_gpus: 0,
            sim_id: None,
        }
    }

    pub fn with_priority(mut self, priority: f64) -> Self {
        self.priority = priority;
        self
    }

    pub fn with_gpus(mut self, num_gpus: u32) -> Self {
        self.num_gpus = num_gpus;
        self
    }

    pub fn with_procs(mut self, num_procs: u32) -> Self {
        self.num_procs = num_procs;
        self
    }
}

/// How an evaluation ended, as reported by the worker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalcStatus {
    Completed,
    Failed,
    /// Terminated mid-run, by a manager kill signal or by the worker's own
    /// timeout.
    Killed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReturn {
    pub sim_id: SimId,
    pub f: f64,
    pub sim_worker: WorkerId,
    pub returned_time: f64,
    pub status: CalcStatus,
}

#[derive(Debug, Clone)]
pub struct History {
    records: Vec<EnsembleRecord>,
    dim: usize,
    start_time: f64,
}

pub fn now_epoch() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl History {
    pub fn new(dim: usize) -> Self {
        Self::with_start_time(dim, now_epoch())
    }

    pub fn with_start_time(dim: usize, start_time: f64) -> Self {
        Self {
            records: Vec::new(),
            dim,
            start_time,
        }
    }

    pub(crate) fn from_parts(dim: usize, start_time: f64, records: Vec<EnsembleRecord>) -> Self {
        Self {
            records,
            dim,
            start_time,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn start_time(&self) -> f64 {
        self.start_time
    }

    /// Seconds elapsed since `start_time`.
    pub fn elapsed(&self) -> f64 {
        (now_epoch() - self.start_time).max(0.0)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn next_id(&self) -> SimId {
        self.records.len()
    }

    pub fn records(&self) -> &[EnsembleRecord] {
        &self.records
    }

    pub fn get(&self, sim_id: SimId) -> Option<&EnsembleRecord> {
        self.records.get(sim_id)
    }

    fn get_mut(&mut self, sim_id: SimId) -> Result<&mut EnsembleRecord, HistoryError> {
        self.records
            .get_mut(sim_id)
            .ok_or(HistoryError::UnknownSimId(sim_id))
    }

    pub fn returned_count(&self) -> usize {
        self.records.iter().filter(|r| r.returned).count()
    }

    pub fn given_count(&self) -> usize {
        self.records.iter().filter(|r| r.given).count()
    }

    /// Appends one record per point and returns the assigned ids in input
    /// order. The whole batch is validated before anything is appended.
    pub fn submit_points(
        &mut self,
        points: &[NewPoint],
        gen_worker: WorkerId,
    ) -> Result<Vec<SimId>, HistoryError> {
        let base = self.next_id();
        for (index, p) in points.iter().enumerate() {
            if p.x.len() != self.dim {
                return Err(HistoryError::DimensionMismatch {
                    index,
                    expected: self.dim,
                    got: p.x.len(),
                });
            }
            if let Some(id) = p.sim_id {
                if id != base + index {
                    return Err(HistoryError::SimIdOutOfOrder {
                        index,
                        expected: base + index,
                        got: id,
                    });
                }
            }
        }
        let ids: Vec<SimId> = (base..base + points.len()).collect();
        self.records
            .extend(points.iter().zip(&ids).map(|(p, &sim_id)| EnsembleRecord {
                sim_id,
                x: p.x.clone(),
                f: f64::NAN,
                priority: p.priority,
                num_procs: p.num_procs,
                num_gpus: p.num_gpus,
                gen_worker,
                sim_worker: None,
                given: false,
                returned: false,
                cancel_requested: false,
                kill_sent: false,
                given_time: None,
                returned_time: None,
            }));
        Ok(ids)
    }

    /// Records that `sim_ids` were dispatched to `worker` at `time`.
    pub fn mark_given(
        &mut self,
        sim_ids: &[SimId],
        worker: WorkerId,
        time: f64,
    ) -> Result<(), HistoryError> {
        for &id in sim_ids {
            let r = self.get(id).ok_or(HistoryError::UnknownSimId(id))?;
            if r.given {
                return Err(HistoryError::AlreadyGiven(id));
            }
            if r.cancel_requested {
                return Err(HistoryError::Cancelled(id));
            }
        }
        for &id in sim_ids {
            let r = self.get_mut(id)?;
            r.given = true;
            r.sim_worker = Some(worker);
            r.given_time = Some(time);
        }
        Ok(())
    }

    /// Slots simulator output into the table. All results are validated
    /// before any record changes.
    pub fn update_with_results(&mut self, results: &[SimReturn]) -> Result<(), HistoryError> {
        let mut seen = std::collections::HashSet::new();
        for res in results {
            let r = self
                .get(res.sim_id)
                .ok_or(HistoryError::UnknownSimId(res.sim_id))?;
            if !r.given {
                return Err(HistoryError::NotGiven(res.sim_id));
            }
            if r.returned || !seen.insert(res.sim_id) {
                return Err(HistoryError::AlreadyReturned(res.sim_id));
            }
        }
        for res in results {
            let r = self.get_mut(res.sim_id)?;
            r.returned = true;
            r.sim_worker = Some(res.sim_worker);
            let t = match r.given_time {
                Some(g) => res.returned_time.max(g),
                None => res.returned_time,
            };
            r.returned_time = Some(t);
            match res.status {
                CalcStatus::Completed => r.f = res.f,
                CalcStatus::Failed => r.f = f64::NAN,
                CalcStatus::Killed => {
                    r.f = f64::NAN;
                    r.cancel_requested = true;
                    r.kill_sent = true;
                }
            }
        }
        Ok(())
    }

    /// Undispatched, uncancelled ids ordered by priority (descending) then
    /// sim_id (ascending).
    pub fn pending_sims(&self) -> Vec<SimId> {
        let mut pending: Vec<&EnsembleRecord> = self
            .records
            .iter()
            .filter(|r| !r.given && !r.cancel_requested)
            .collect();
        pending.sort_by(|a, b| {
            b.priority
                .total_cmp(&a.priority)
                .then(a.sim_id.cmp(&b.sim_id))
        });
        pending.into_iter().map(|r| r.sim_id).collect()
    }

    /// Sets `cancel_requested` on every id and returns those that are
    /// running (given, not returned) and therefore need a kill signal.
    pub fn mark_cancel(&mut self, sim_ids: &[SimId]) -> Result<Vec<SimId>, HistoryError> {
        for &id in sim_ids {
            self.get(id).ok_or(HistoryError::UnknownSimId(id))?;
        }
        let mut to_kill = Vec::new();
        for &id in sim_ids {
            let r = self.get_mut(id)?;
            r.cancel_requested = true;
            if r.given && !r.returned && !r.kill_sent && !to_kill.contains(&id) {
                to_kill.push(id);
            }
        }
        Ok(to_kill)
    }

    /// Called after kill signals for `sim_ids` have been dispatched.
    pub fn set_kill_sent(&mut self, sim_ids: &[SimId]) -> Result<(), HistoryError> {
        for &id in sim_ids {
            let r = self.get_mut(id)?;
            r.cancel_requested = true;
            r.kill_sent = true;
        }
        Ok(())
    }

    /// Writes the table and its metadata sidecar.
    pub fn dump(&self, path: impl AsRef<std::path::Path>) -> Result<(), HistoryError> {
        persist::dump(self, path.as_ref())
    }

    /// Record-by-record [`EnsembleRecord::same_as`].
    pub fn same_as(&self, other: &History) -> bool {
        self.dim == other.dim
            && f64_eq(self.start_time, other.start_time)
            && self.records.len() == other.records.len()
            && self
                .records
                .iter()
                .zip(&other.records)
                .all(|(a, b)| a.same_as(b))
    }

    /// Record-by-record [`EnsembleRecord::same_outcome`]: ignores which
    /// worker did what and when.
    pub fn same_outcome(&self, other: &History) -> bool {
        self.dim == other.dim
            && self.records.len() == other.records.len()
            && self
                .records
                .iter()
                .zip(&other.records)
                .all(|(a, b)| a.same_outcome(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pts(n: usize, dim: usize) -> Vec<NewPoint> {
        (0..n).map(|i| NewPoint::new(vec![i as f64; dim])).collect()
    }

    fn give_all(h: &mut History, ids: &[SimId]) {
        h.mark_given(ids, 1, 0.0).unwrap();
    }

    fn ret(id: SimId, f: f64) -> SimReturn {
        SimReturn {
            sim_id: id,
            f,
            sim_worker: 2,
            returned_time: 1.0,
            status: CalcStatus::Completed,
        }
    }

    #[test]
    fn empty_submit_is_identity() {
        let mut h = History::new(2);
        assert_eq!(h.submit_points(&[], 0).unwrap(), Vec::<SimId>::new());
        assert!(h.is_empty());
    }

    #[test]
    fn dense_ids() {
        let mut h = History::new(2);
        assert_eq!(h.submit_points(&pts(3, 2), 1).unwrap(), vec![0, 1, 2]);
        assert_eq!(h.submit_points(&pts(2, 2), 1).unwrap(), vec![3, 4]);
    }

    #[test]
    fn dimension_mismatch_names_index() {
        let mut h = History::new(2);
        let mut p = pts(3, 2);
        p[1].x.push(9.0);
        match h.submit_points(&p, 0) {
            Err(HistoryError::DimensionMismatch { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(h.is_empty());
    }

    #[test]
    fn explicit_ids_must_be_next_dense() {
        let mut h = History::new(1);
        let mut p = pts(2, 1);
        p[0].sim_id = Some(0);
        p[1].sim_id = Some(1);
        assert_eq!(h.submit_points(&p, 0).unwrap(), vec![0, 1]);
        let mut dup = pts(1, 1);
        dup[0].sim_id = Some(1);
        assert!(matches!(
            h.submit_points(&dup, 0),
            Err(HistoryError::SimIdOutOfOrder { expected: 2, got: 1, .. })
        ));
    }

    #[test]
    fn priority_orders_pending() {
        let mut h = History::new(1);
        let p = vec![
            NewPoint::new(vec![0.0]).with_priority(0.1),
            NewPoint::new(vec![1.0]).with_priority(0.9),
        ];
        h.submit_points(&p, 0).unwrap();
        assert_eq!(h.pending_sims(), vec![1, 0]);
    }

    #[test]
    fn pending_empty_history() {
        assert!(History::new(3).pending_sims().is_empty());
    }

    #[test]
    fn results_update() {
        let mut h = History::new(1);
        h.submit_points(&pts(2, 1), 0).unwrap();
        give_all(&mut h, &[0, 1]);
        h.update_with_results(&[ret(0, 4.0)]).unwrap();
        assert!(h.get(0).unwrap().returned);
        assert_eq!(h.get(0).unwrap().f, 4.0);
        h.update_with_results(&[ret(1, f64::NAN)]).unwrap();
        assert!(h.get(1).unwrap().returned && h.get(1).unwrap().f.is_nan());
    }

    #[test]
    fn result_errors() {
        let mut h = History::new(1);
        h.submit_points(&pts(2, 1), 0).unwrap();
        assert!(matches!(
            h.update_with_results(&[ret(0, 1.0)]),
            Err(HistoryError::NotGiven(0))
        ));
        assert!(matches!(
            h.update_with_results(&[ret(7, 1.0)]),
            Err(HistoryError::UnknownSimId(7))
        ));
        give_all(&mut h, &[0]);
        h.update_with_results(&[ret(0, 1.0)]).unwrap();
        assert!(matches!(
            h.update_with_results(&[ret(0, 1.0)]),
            Err(HistoryError::AlreadyReturned(0))
        ));
    }

    #[test]
    fn killed_result_sets_flags() {
        let mut h = History::new(1);
        h.submit_points(&pts(1, 1), 0).unwrap();
        give_all(&mut h, &[0]);
        h.update_with_results(&[SimReturn {
            status: CalcStatus::Killed,
            ..ret(0, 3.0)
        }])
        .unwrap();
        let r = h.get(0).unwrap();
        assert!(r.f.is_nan() && r.kill_sent && r.cancel_requested);
    }

    #[test]
    fn cancel_state_machine() {
        let mut h = History::new(1);
        h.submit_points(&pts(3, 1), 0).unwrap();
        // unissued
        assert!(h.mark_cancel(&[0]).unwrap().is_empty());
        assert!(!h.pending_sims().contains(&0));
        // running
        give_all(&mut h, &[1, 2]);
        assert_eq!(h.mark_cancel(&[1]).unwrap(), vec![1]);
        // returned
        h.update_with_results(&[ret(2, 1.0)]).unwrap();
        assert!(h.mark_cancel(&[2]).unwrap().is_empty());
        assert!(h.get(2).unwrap().cancel_requested);
        assert!(matches!(
            h.mark_cancel(&[99]),
            Err(HistoryError::UnknownSimId(99))
        ));
        // cancelled unissued points cannot be given
        assert!(matches!(
            h.mark_given(&[0], 1, 0.0),
            Err(HistoryError::Cancelled(0))
        ));
    }

    #[derive(Debug, Clone)]
    enum Op {
        Submit(Vec<f64>),
        Give(usize),
        Return(usize, f64),
        Cancel(usize),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            proptest::collection::vec(-1.0..1.0f64, 1..4).prop_map(Op::Submit),
            (0usize..40).prop_map(Op::Give),
            (0usize..40, -5.0..5.0f64).prop_map(|(i, f)| Op::Return(i, f)),
            (0usize..40).prop_map(Op::Cancel),
        ]
    }

    proptest! {
        #[test]
        fn invariants_hold_under_random_ops(ops in proptest::collection::vec(op(), 0..80)) {
            let mut h = History::new(1);
            for op in ops {
                let before = h.records().to_vec();
                match op {
                    Op::Submit(prios) => {
                        let p: Vec<NewPoint> = prios.iter()
                            .map(|&pr| NewPoint::new(vec![pr]).with_priority(pr)).collect();
                        h.submit_points(&p, 0).unwrap();
                    }
                    Op::Give(i) => { let _ = h.mark_given(&[i], 1, 0.5); }
                    Op::Return(i, f) => { let _ = h.update_with_results(&[ret(i, f)]); }
                    Op::Cancel(i) => {
                        if let Ok(k) = h.mark_cancel(&[i]) { h.set_kill_sent(&k).unwrap(); }
                    }
                }
                // dense ids
                for (i, r) in h.records().iter().enumerate() {
                    prop_assert_eq!(r.sim_id, i);
                    prop_assert!(!r.returned || r.given);
                    prop_assert!(!r.kill_sent || r.cancel_requested);
                }
                // monotone flags
                for (a, b) in before.iter().zip(h.records()) {
                    prop_assert!(!a.given || b.given);
                    prop_assert!(!a.returned || b.returned);
                    prop_assert!(!a.cancel_requested || b.cancel_requested);
                    prop_assert!(!a.kill_sent || b.kill_sent);
                }
                // pending is exactly the undispatched, uncancelled set, sorted
                let pending = h.pending_sims();
                let mut expect: Vec<SimId> = h.records().iter()
                    .filter(|r| !r.given && !r.cancel_requested).map(|r| r.sim_id).collect();
                let mut sorted = pending.clone();
                sorted.sort();
                expect.sort();
                prop_assert_eq!(sorted, expect);
                for w in pending.windows(2) {
                    let (a, b) = (h.get(w[0]).unwrap(), h.get(w[1]).unwrap());
                    prop_assert!(a.priority > b.priority || (a.priority == b.priority && a.sim_id < b.sim_id));
                }
            }
        }
    }

    #[test]
    fn equal_priorities_ascending_ids() {
        // stable-sort oracle over all records
        let mut h = History::new(1);
        let prios = [0.5, 0.2, 0.5, 0.9, 0.2, 0.5];
        let p: Vec<NewPoint> = prios
            .iter()
            .map(|&pr| NewPoint::new(vec![0.0]).with_priority(pr))
            .collect();
        h.submit_points(&p, 0).unwrap();
        let mut oracle: Vec<(usize, f64)> = prios.iter().copied().enumerate().collect();
        // stable sort keeps index order among equal keys
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let oracle: Vec<usize> = oracle.into_iter().map(|(i, _)| i).collect();
        assert_eq!(h.pending_sims(), oracle);
        assert_eq!(oracle, vec![3, 0, 2, 5, 1, 4]);
    }
}
