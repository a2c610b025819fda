use std::sync::mpsc::{Receiver, TryRecvError};
use std::thread;
use std::time::{Duration, Instant};

use super::{ExecutorError, Task, TaskState, DEFAULT_KILL_GRACE};
use crate::history::SimId;

/// Manager-to-worker control message, delivered on a channel separate from
/// work so it can arrive while the worker is busy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlSignal {
    Stop,
    Kill(SimId),
}

/// The worker end of the control channel plus the ids the worker is
/// currently evaluating.
#[derive(Debug)]
pub struct WorkerControl {
    rx: Receiver<ControlSignal>,
    active: Vec<SimId>,
    stopped: bool,
}

impl WorkerControl {
    pub fn new(rx: Receiver<ControlSignal>) -> Self {
        Self {
            rx,
            active: Vec::new(),
            stopped: false,
        }
    }

    /// A control end whose sender is dropped; never yields signals.
    pub fn detached() -> Self {
        Self::new(std::sync::mpsc::channel().1)
    }

    pub fn set_active(&mut self, ids: &[SimId]) {
        self.active.clear();
        self.active.extend_from_slice(ids);
    }

    pub fn active(&self) -> &[SimId] {
        &self.active
    }

    /// True once a STOP has been drained.
    pub fn stop_seen(&self) -> bool {
        self.stopped
    }

    /// Kill requests aimed at work this worker no longer holds are dropped.
    fn drain(&mut self) -> Vec<ControlSignal> {
        let mut out = Vec::new();
        loop {
            match self.rx.try_recv() {
                Ok(ControlSignal::Stop) => {
                    self.stopped = true;
                    out.push(ControlSignal::Stop);
                }
                Ok(ControlSignal::Kill(id)) if self.active.contains(&id) => {
                    out.push(ControlSignal::Kill(id))
                }
                Ok(ControlSignal::Kill(id)) => log::debug!("ignoring stale kill for sim {id}"),
                Err(TryRecvError::Empty | TryRecvError::Disconnected) => return out,
            }
        }
    }
}

/// Drains pending manager signals without blocking.
pub fn manager_poll(ctl: &mut WorkerControl) -> Vec<ControlSignal> {
    ctl.drain()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PollOutcome {
    Finished,
    Failed,
    KilledOnSignal,
    KilledOnTimeout,
}

impl PollOutcome {
    pub fn killed(self) -> bool {
        matches!(self, Self::KilledOnSignal | Self::KilledOnTimeout)
    }
}

/// Watches a running task, checking the task and the manager's signals
/// every `poll_interval`. The task is killed on a STOP, on a KILL for
/// work this worker holds, or once `timeout` has elapsed since the call.
pub fn polling_loop(
    task: &mut Task,
    ctl: &mut WorkerControl,
    poll_interval: Duration,
    timeout: Option<Duration>,
) -> Result<PollOutcome, ExecutorError> {
    if task.state() == TaskState::Created {
        return Err(ExecutorError::NotStarted(task.task_id));
    }
    let start = Instant::now();
    loop {
        match task.poll() {
            TaskState::Finished => return Ok(PollOutcome::Finished),
            TaskState::Failed => return Ok(PollOutcome::Failed),
            TaskState::UserKilled => return Ok(PollOutcome::KilledOnSignal),
            TaskState::Running | TaskState::Created => {}
        }
        if !manager_poll(ctl).is_empty() {
            task.kill(DEFAULT_KILL_GRACE)?;
            return Ok(PollOutcome::KilledOnSignal);
        }
        let elapsed = start.elapsed();
        if let Some(t) = timeout {
            if elapsed >= t {
                task.kill(DEFAULT_KILL_GRACE)?;
                return Ok(PollOutcome::KilledOnTimeout);
            }
        }
        // never sleep past the timeout
        let nap = match timeout {
            Some(t) => poll_interval.min(t.saturating_sub(elapsed)),
            None => poll_interval,
        };
        thread::sleep(nap.max(Duration::from_millis(1)));
    }
}
