//! Publish/subscribe transport: topic matching, the node-facing context
//! trait, and a deterministic discrete-event broker simulator.

mod fault;
mod link;
#[cfg(feature = "mqtt")]
pub mod mqtt;
mod sim;
mod topic;

pub use fault::{FaultAction, FaultEvent, FaultSchedule};
pub use link::{transmission_finish, LinkState, TrafficProfile};
pub use sim::{DeliveryRecord, SimConfig, Simulator, TransportStats};
pub use topic::{matches, scheme, SubscriptionTrie, TopicFilter, TopicName};

use std::any::Any;
use std::fmt;
use std::ops::{Add, Sub};
use std::time::Duration;

use bytes::Bytes;
use chrono::{DateTime, Utc};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::SenderId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("client is not connected")]
    Disconnected,
    #[error("invalid topic: {0}")]
    InvalidTopic(String),
    #[error("invalid transport configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("node {0} already exists")]
    DuplicateNode(String),
    #[error("cannot schedule at {at}, clock is already at {now}")]
    TimeTravel { at: SimTime, now: SimTime },
    #[error("broker connection failed: {0}")]
    Connection(String),
}

/// Simulated instant, nanoseconds since the start of the run.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_nanos(n: u64) -> Self {
        Self(n)
    }

    pub const fn from_millis(ms: u64) -> Self {
        Self(ms * 1_000_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        Self(s * 1_000_000_000)
    }

    pub fn from_secs_f64(s: f64) -> Self {
        Self((s * 1e9).round().max(0.0) as u64)
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e9
    }

    pub fn since(self, earlier: SimTime) -> Duration {
        Duration::from_nanos(self.0.saturating_sub(earlier.0))
    }
}

impl Add<Duration> for SimTime {
    type Output = SimTime;

    fn add(self, d: Duration) -> SimTime {
        SimTime(self.0.saturating_add(d.as_nanos().min(u64::MAX as u128) as u64))
    }
}

impl Sub for SimTime {
    type Output = Duration;

    fn sub(self, rhs: SimTime) -> Duration {
        self.since(rhs)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}s", self.as_secs_f64())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QoS {
    AtMostOnce,
    AtLeastOnce,
}

/// Whether the broker keeps a client's subscriptions and QoS 1 backlog
/// across a disconnect.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum SessionMode {
    #[default]
    Clean,
    Persistent,
}

impl fmt::Display for SessionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SessionMode::Clean => "clean",
            SessionMode::Persistent => "persistent",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PublishTicket(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubscriptionId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimerId(pub u64);

/// What a node handler can do while it runs.
pub trait NodeContext {
    fn node_id(&self) -> &SenderId;
    fn now(&self) -> SimTime;
    /// Calendar time corresponding to `now`, for journals and logs.
    fn wall_time(&self) -> DateTime<Utc>;
    fn is_connected(&self) -> bool;
    fn publish(
        &mut self,
        topic: &TopicName,
        payload: Bytes,
        qos: QoS,
    ) -> Result<PublishTicket, TransportError>;
    fn subscribe(&mut self, filter: &TopicFilter) -> Result<SubscriptionId, TransportError>;
    fn unsubscribe(&mut self, id: SubscriptionId);
    fn set_timer(&mut self, after: Duration, token: u64) -> TimerId;
    fn cancel_timer(&mut self, id: TimerId);
    /// Per-node deterministic random stream.
    fn rng(&mut self) -> &mut ChaCha8Rng;
}

/// A node process. All callbacks for one node run serially.
pub trait Actor: Any {
    fn on_connect(&mut self, ctx: &mut dyn NodeContext, session_present: bool);
    fn on_disconnect(&mut self, _ctx: &mut dyn NodeContext) {}
    fn on_message(&mut self, ctx: &mut dyn NodeContext, topic: &TopicName, payload: &Bytes);
    fn on_timer(&mut self, ctx: &mut dyn NodeContext, token: u64);
}

/// Seeds a node's random stream from the run seed and a label.
pub fn derive_rng(seed: u64, label: &str) -> ChaCha8Rng {
    use rand::SeedableRng;
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update(label.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}
