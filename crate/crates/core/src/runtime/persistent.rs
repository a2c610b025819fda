use std::sync::mpsc::{Receiver, Sender};

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::message::{FromWorker, MessageTag, ToWorker};
use crate::history::{EnsembleRecord, NewPoint, SimId, WorkerId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("receive after {0:?}: the generator must return once stopped")]
    AfterStop(MessageTag),
    #[error("generator received unexpected {0} message")]
    Unexpected(&'static str),
}

/// Handle a persistent generator uses to talk to the manager.
pub struct PersistentCtx<'a> {
    worker_id: WorkerId,
    to_manager: &'a Sender<FromWorker>,
    rx: &'a Receiver<ToWorker>,
    rng: ChaCha8Rng,
    h_in: Vec<EnsembleRecord>,
    stopped: Option<MessageTag>,
    received: usize,
}

impl<'a> PersistentCtx<'a> {
    pub(crate) fn new(
        worker_id: WorkerId,
        to_manager: &'a Sender<FromWorker>,
        rx: &'a Receiver<ToWorker>,
        rng: ChaCha8Rng,
        h_in: Vec<EnsembleRecord>,
    ) -> Self {
        Self {
            worker_id,
            to_manager,
            rx,
            rng,
            h_in,
            stopped: None,
            received: 0,
        }
    }

    pub fn worker_id(&self) -> WorkerId {
        self.worker_id
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Records from a previous run the ensemble was started with.
    pub fn h_in(&self) -> &[EnsembleRecord] {
        &self.h_in
    }

    /// True when the restart history holds points this generator issued
    /// earlier whose results are still to come. The manager delivers them
    /// as one result batch, so the generator should start with
    /// [`recv`](Self::recv).
    pub fn h_in_outstanding(&self) -> bool {
        self.h_in
            .iter()
            .any(|r| !r.returned && !(r.cancel_requested && !r.given))
    }

    /// The stop tag received, if any.
    pub fn stopped(&self) -> Option<MessageTag> {
        self.stopped
    }

    /// Hands points to the manager without waiting.
    pub fn send(&mut self, points: Vec<NewPoint>) -> Result<(), ProtocolError> {
        if let Some(tag) = self.stopped {
            return Err(ProtocolError::AfterStop(tag));
        }
        let _ = self.to_manager.send(FromWorker::GenPoints {
            worker: self.worker_id,
            points,
            done: None,
        });
        Ok(())
    }

    /// Blocks until a result batch or a stop arrives. A stop comes back as
    /// `(Stop | PersisStop, [])`.
    pub fn recv(&mut self) -> Result<(MessageTag, Vec<EnsembleRecord>), ProtocolError> {
        if let Some(tag) = self.stopped {
            return Err(ProtocolError::AfterStop(tag));
        }
        let _ = self.to_manager.send(FromWorker::GenBlocked {
            worker: self.worker_id,
            received: self.received,
        });
        let (tag, batch) = match self.rx.recv() {
            Ok(ToWorker::Results(records)) => {
                self.received += 1;
                return Ok((MessageTag::Result, records));
            }
            Ok(ToWorker::Stop) | Err(_) => (MessageTag::Stop, Vec::new()),
            Ok(ToWorker::PersisStop) => (MessageTag::PersisStop, Vec::new()),
            Ok(ToWorker::Sim { .. }) => return Err(ProtocolError::Unexpected("simulation")),
            Ok(ToWorker::Gen { .. } | ToWorker::PersistentGen { .. }) => {
                return Err(ProtocolError::Unexpected("generation"))
            }
        };
        self.stopped = Some(tag);
        Ok((tag, batch))
    }

    pub fn send_recv(
        &mut self,
        points: Vec<NewPoint>,
    ) -> Result<(MessageTag, Vec<EnsembleRecord>), ProtocolError> {
        self.send(points)?;
        self.recv()
    }

    /// Asks the manager to cancel points; running ones are killed.
    pub fn request_cancel(&mut self, sim_ids: &[SimId]) {
        let _ = self.to_manager.send(FromWorker::GenCancel {
            worker: self.worker_id,
            sim_ids: sim_ids.to_vec(),
        });
    }
}
