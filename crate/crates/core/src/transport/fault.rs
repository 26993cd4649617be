use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{SimTime, TransportError};
use crate::codec::SenderId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaultAction {
    Down,
    Up,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub at: SimTime,
    pub node: SenderId,
    pub action: FaultAction,
}

/// Link up/down script. Each node starts up, and its events must alternate
/// Down, Up, Down, ...
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSchedule {
    events: Vec<FaultEvent>,
}

impl FaultSchedule {
    pub fn new(events: Vec<FaultEvent>) -> Result<Self, TransportError> {
        if events.windows(2).any(|w| w[0].at > w[1].at) {
            return Err(TransportError::InvalidConfig(
                "fault times must be non-decreasing".into(),
            ));
        }
        let mut last: BTreeMap<&SenderId, FaultAction> = BTreeMap::new();
        for e in &events {
            let expected = match last.get(&e.node) {
                None | Some(FaultAction::Up) => FaultAction::Down,
                Some(FaultAction::Down) => FaultAction::Up,
            };
            if e.action != expected {
                return Err(TransportError::InvalidConfig(format!(
                    "{} at {}: expected {:?}, got {:?}",
                    e.node, e.at, expected, e.action
                )));
            }
            last.insert(&e.node, e.action);
        }
        Ok(Self { events })
    }

    pub fn events(&self) -> &[FaultEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Total time spent down across all nodes, counting an unmatched Down
    /// as lasting until `horizon`.
    pub fn downtime(&self, horizon: SimTime) -> Duration {
        let mut down_since: BTreeMap<&SenderId, SimTime> = BTreeMap::new();
        let mut total = Duration::ZERO;
        for e in &self.events {
            match e.action {
                FaultAction::Down => {
                    down_since.insert(&e.node, e.at);
                }
                FaultAction::Up => {
                    if let Some(since) = down_since.remove(&e.node) {
                        total += e.at - since;
                    }
                }
            }
        }
        for since in down_since.values() {
            total += horizon - *since;
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(at: u64, node: &str, action: FaultAction) -> FaultEvent {
        FaultEvent {
            at: SimTime::from_secs(at),
            node: SenderId::new(node).unwrap(),
            action,
        }
    }

    #[test]
    fn alternating_schedule_is_valid() {
        let s = FaultSchedule::new(vec![
            ev(10, "a", FaultAction::Down),
            ev(10, "b", FaultAction::Down),
            ev(20, "a", FaultAction::Up),
            ev(30, "a", FaultAction::Down),
        ])
        .unwrap();
        assert_eq!(s.downtime(SimTime::from_secs(40)), Duration::from_secs(10 + 30 + 10));
    }

    #[test]
    fn up_first_is_rejected() {
        assert!(FaultSchedule::new(vec![ev(1, "a", FaultAction::Up)]).is_err());
    }

    #[test]
    fn double_down_is_rejected() {
        assert!(FaultSchedule::new(vec![
            ev(1, "a", FaultAction::Down),
            ev(2, "a", FaultAction::Down)
        ])
        .is_err());
    }

    #[test]
    fn decreasing_times_are_rejected() {
        assert!(FaultSchedule::new(vec![
            ev(5, "a", FaultAction::Down),
            ev(4, "b", FaultAction::Down)
        ])
        .is_err());
    }
}
