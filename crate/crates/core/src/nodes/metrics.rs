use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::codec::{HashId, SenderId};
use crate::transport::SimTime;

/// Per-node counters. All of them only grow during a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsCounters {
    /// Transfers begun by this node as sender.
    pub files_sent: u64,
    /// Headers and fragments this node handed to the transport.
    pub messages_sent: u64,
    /// Headers and fragments that reached this node as receiver.
    pub messages_received: u64,
    /// Distinct transfers this node accepted as receiver.
    pub files_received: u64,
    /// Headers and fragments that arrived again after the first copy.
    pub duplicates_received: u64,
    pub images_restored: u64,
    /// Missing-parts requests published.
    pub retransmission_requests: u64,
    pub header_retries: u64,
    pub fragments_sent: u64,
    pub fragments_resent: u64,
    pub fragments_received: u64,
    /// Payload bytes handed to the transport.
    pub bytes_on_wire: u64,
    pub transfers_completed: u64,
    pub transfers_failed: u64,
    pub rejections_sent: u64,
    pub unknown_acks: u64,
    pub protocol_violations: u64,
    pub unknown_fragments: u64,
    pub mismatched_fragments: u64,
    pub decode_errors: u64,
}

impl AddAssign for MetricsCounters {
    fn add_assign(&mut self, o: Self) {
        self.files_sent += o.files_sent;
        self.messages_sent += o.messages_sent;
        self.messages_received += o.messages_received;
        self.files_received += o.files_received;
        self.duplicates_received += o.duplicates_received;
        self.images_restored += o.images_restored;
        self.retransmission_requests += o.retransmission_requests;
        self.header_retries += o.header_retries;
        self.fragments_sent += o.fragments_sent;
        self.fragments_resent += o.fragments_resent;
        self.fragments_received += o.fragments_received;
        self.bytes_on_wire += o.bytes_on_wire;
        self.transfers_completed += o.transfers_completed;
        self.transfers_failed += o.transfers_failed;
        self.rejections_sent += o.rejections_sent;
        self.unknown_acks += o.unknown_acks;
        self.protocol_violations += o.protocol_violations;
        self.unknown_fragments += o.unknown_fragments;
        self.mismatched_fragments += o.mismatched_fragments;
        self.decode_errors += o.decode_errors;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferOutcome {
    InProgress,
    Completed,
    Rejected,
    /// Header retries exhausted without an answer.
    TimedOut,
    /// Receiver gave up after its watchdog rounds.
    Abandoned,
}

/// Sender-side view of one transfer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SendRecord {
    pub hash_file: HashId,
    pub receiver: SenderId,
    pub package_name: String,
    pub file_name: String,
    pub start: SimTime,
    pub end: Option<SimTime>,
    pub retries: u32,
    pub outcome: TransferOutcome,
}

/// Receiver-side view of one transfer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceiveRecord {
    pub hash_file: HashId,
    pub sender: SenderId,
    pub start: SimTime,
    pub end: Option<SimTime>,
    pub missing_rounds: u32,
    pub outcome: TransferOutcome,
}
