//! Producer, orchestrator and hybrid node state machines.

mod metrics;
mod node;
mod receiver;
mod sender;
mod status;
mod storage;

pub use metrics::{MetricsCounters, ReceiveRecord, SendRecord, TransferOutcome};
pub use node::{NodeConfig, NodeRole, ProtocolNode, RecoveryPolicy, RequestState, TimerConfig};
pub use receiver::{ReceiverRole, RestoredImage};
pub use sender::{
    sender_step, ImageSource, OutgoingItem, OutgoingTransfer, SendTrace, SendTraceKind,
    SenderEvent, SenderRole, SenderStep,
};
pub use status::{replay as replay_journal, StatusError, StatusManager, TransferStatus};
pub use storage::{validate_name, Storage, StorageEntry, StorageError};

use std::collections::BTreeMap;
use std::io;
use std::time::Duration;

use thiserror::Error;

use crate::codec::{HashId, SenderId};
use crate::fragmentation::FragmentError;
use crate::transport::{NodeContext, TimerId, TransportError};

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("image is empty")]
    EmptyInput,
    #[error("transfer {0} is already in flight from this node")]
    DuplicateActiveTransfer(HashId),
    #[error("this node has no receiver role")]
    NotAReceiver,
    #[error("no answer to the request before its deadline")]
    Timeout,
    #[error(transparent)]
    Fragment(#[from] FragmentError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Status(#[from] StatusError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("node i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum TimerPurpose {
    HeaderRetry(HashId),
    QueueStart(SenderId),
    Watchdog(SenderId, HashId),
    RequestDeadline(usize),
}

/// Maps timer tokens to what they are for.
#[derive(Debug, Default)]
pub(crate) struct TimerBook {
    next: u64,
    armed: BTreeMap<u64, (TimerId, TimerPurpose)>,
}

impl TimerBook {
    pub fn arm(&mut self, ctx: &mut dyn NodeContext, after: Duration, purpose: TimerPurpose) -> u64 {
        self.next += 1;
        let token = self.next;
        let id = ctx.set_timer(after, token);
        self.armed.insert(token, (id, purpose));
        token
    }

    pub fn cancel(&mut self, ctx: &mut dyn NodeContext, token: u64) {
        if let Some((id, _)) = self.armed.remove(&token) {
            ctx.cancel_timer(id);
        }
    }

    pub fn fire(&mut self, token: u64) -> Option<TimerPurpose> {
        self.armed.remove(&token).map(|(_, p)| p)
    }
}

/// What a role handler may touch besides its own state.
pub(crate) struct Env<'a> {
    pub ctx: &'a mut dyn NodeContext,
    pub timers: &'a mut TimerBook,
    pub metrics: &'a mut MetricsCounters,
}
