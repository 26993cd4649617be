use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{SimTime, TransportError};
use crate::codec::SenderId;

const NANOS_PER_SEC: u128 = 1_000_000_000;
const MILLI: u64 = 1_000_000;

/// Configuration and current state of one node's access link.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkState {
    pub node: SenderId,
    pub up: bool,
    pub capacity_bps: u64,
    pub latency: Duration,
}

impl LinkState {
    pub fn new(node: SenderId, capacity_bps: u64, latency: Duration) -> Result<Self, TransportError> {
        if capacity_bps == 0 {
            return Err(TransportError::InvalidConfig(format!(
                "link of {node} has zero capacity"
            )));
        }
        Ok(Self {
            node,
            up: true,
            capacity_bps,
            latency,
        })
    }
}

/// Background load on the broker link, iperf-style.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficProfile {
    pub start: SimTime,
    pub duration: Duration,
    /// Aggregate rate across all streams.
    pub rate_bps: u64,
    pub parallel_streams: u32,
    pub packet_size: u32,
}

impl TrafficProfile {
    pub fn validate(&self) -> Result<(), TransportError> {
        if self.duration.is_zero() {
            return Err(TransportError::InvalidConfig("traffic duration is zero".into()));
        }
        if self.rate_bps == 0 {
            return Err(TransportError::InvalidConfig("traffic rate is zero".into()));
        }
        if self.parallel_streams == 0 {
            return Err(TransportError::InvalidConfig("traffic needs at least one stream".into()));
        }
        if self.packet_size == 0 {
            return Err(TransportError::InvalidConfig("traffic packet size is zero".into()));
        }
        Ok(())
    }

    pub fn end(&self) -> SimTime {
        self.start + self.duration
    }

    /// Refill boundaries are whole milliseconds; the profile counts against
    /// every millisecond slot whose start lies inside `[start, end)`.
    fn slot_bounds(&self) -> (u64, u64) {
        (
            self.start.as_nanos().div_ceil(MILLI) * MILLI,
            self.end().as_nanos().div_ceil(MILLI) * MILLI,
        )
    }
}

/// Capacity left for protocol traffic at instant `t` (nanoseconds).
fn residual_rate(capacity_bps: u64, background: &[TrafficProfile], t: u64) -> u64 {
    let used: u64 = background
        .iter()
        .filter(|p| {
            let (s, e) = p.slot_bounds();
            s <= t && t < e
        })
        .map(|p| p.rate_bps)
        .sum();
    capacity_bps.saturating_sub(used)
}

/// Next millisecond boundary after `t` at which the background set changes.
fn next_change(background: &[TrafficProfile], t: u64) -> Option<u64> {
    background
        .iter()
        .flat_map(|p| {
            let (s, e) = p.slot_bounds();
            [s, e]
        })
        .filter(|&b| b > t)
        .min()
}

/// When `bits` starting at `start` have fully left a link of `capacity_bps`.
///
/// The link is a token bucket refilled every millisecond with whatever the
/// background profiles leave over; within a millisecond tokens drain at that
/// residual rate. Integer arithmetic throughout, so results are exact and
/// reproducible.
pub fn transmission_finish(
    capacity_bps: u64,
    background: &[TrafficProfile],
    start: SimTime,
    bits: u64,
) -> SimTime {
    let mut t = start.as_nanos();
    // bit-nanoseconds-per-second still owed; a rate of r bps pays r per ns.
    let mut owed = u128::from(bits) * NANOS_PER_SEC;
    loop {
        if owed == 0 {
            return SimTime::from_nanos(t);
        }
        let rate = u128::from(residual_rate(capacity_bps, background, t));
        let boundary = next_change(background, t);
        if rate == 0 {
            t = boundary.expect("a saturated link always has a later boundary");
            continue;
        }
        let need = owed.div_ceil(rate) as u64;
        match boundary {
            Some(b) if t + need > b => {
                owed -= rate * u128::from(b - t);
                t = b;
            }
            _ => return SimTime::from_nanos(t + need),
        }
    }
}

/// One FIFO serialization point (a NIC direction or the broker port).
#[derive(Debug, Clone)]
pub(crate) struct Pipe {
    pub capacity_bps: u64,
    pub busy_until: SimTime,
}

impl Pipe {
    pub fn new(capacity_bps: u64) -> Self {
        Self {
            capacity_bps,
            busy_until: SimTime::ZERO,
        }
    }

    /// Queues `bytes` behind whatever is already on the pipe and returns the
    /// instant the last bit leaves.
    pub fn transmit(&mut self, at: SimTime, bytes: u64, background: &[TrafficProfile]) -> SimTime {
        let start = at.max(self.busy_until);
        let finish = transmission_finish(self.capacity_bps, background, start, bytes * 8);
        self.busy_until = finish;
        finish
    }

    /// Drops whatever was queued (link went down).
    pub fn flush(&mut self, now: SimTime) {
        self.busy_until = self.busy_until.min(now);
    }
}
