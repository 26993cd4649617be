use serde::{Deserialize, Serialize};

use super::{json_error, CodecError, HashId, SenderId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AckKind {
    Accepted,
    Rejected,
    #[serde(rename = "missing")]
    MissingParts,
    Completed,
}

impl AckKind {
    pub const ALL: [AckKind; 4] = [
        AckKind::Accepted,
        AckKind::Rejected,
        AckKind::MissingParts,
        AckKind::Completed,
    ];
}

/// Receiver-to-sender control message on the `hash_sender` topic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AckMessage {
    pub hash_file: HashId,
    pub kind: AckKind,
    /// Sorted, unique; non-empty exactly when `kind` is `MissingParts`.
    pub missing: Vec<u32>,
}

impl AckMessage {
    pub fn new(hash_file: HashId, kind: AckKind) -> Self {
        debug_assert!(kind != AckKind::MissingParts);
        Self {
            hash_file,
            kind,
            missing: Vec::new(),
        }
    }

    pub fn accepted(hash_file: HashId) -> Self {
        Self::new(hash_file, AckKind::Accepted)
    }

    pub fn rejected(hash_file: HashId) -> Self {
        Self::new(hash_file, AckKind::Rejected)
    }

    pub fn completed(hash_file: HashId) -> Self {
        Self::new(hash_file, AckKind::Completed)
    }

    /// Builds a missing-parts request; `missing` is sorted and deduplicated.
    pub fn missing_parts(hash_file: HashId, mut missing: Vec<u32>) -> Result<Self, CodecError> {
        missing.sort_unstable();
        missing.dedup();
        let ack = Self {
            hash_file,
            kind: AckKind::MissingParts,
            missing,
        };
        ack.validate()?;
        Ok(ack)
    }

    fn validate(&self) -> Result<(), CodecError> {
        match (self.kind, self.missing.is_empty()) {
            (AckKind::MissingParts, true) => {
                return Err(CodecError::invariant("missing-parts ack with empty list"))
            }
            (AckKind::MissingParts, false) => {}
            (kind, false) => {
                return Err(CodecError::invariant(format!(
                    "{kind:?} ack carries a missing list"
                )))
            }
            (_, true) => {}
        }
        if self.missing.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CodecError::invariant("missing list is not sorted and unique"));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AckWire {
    hash_file: HashId,
    kind: AckKind,
    missing: Vec<u32>,
}

pub fn encode_ack(a: &AckMessage) -> Vec<u8> {
    let wire = AckWire {
        hash_file: a.hash_file,
        kind: a.kind,
        missing: a.missing.clone(),
    };
    serde_json::to_vec(&wire).expect("ack serialization is infallible")
}

pub fn decode_ack(bytes: &[u8]) -> Result<AckMessage, CodecError> {
    let wire: AckWire = serde_json::from_slice(bytes).map_err(json_error)?;
    let ack = AckMessage {
        hash_file: wire.hash_file,
        kind: wire.kind,
        missing: wire.missing,
    };
    ack.validate()?;
    Ok(ack)
}

/// Step-0 on-demand request on the `type_request` topic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryRequest {
    pub requester: SenderId,
    /// Exact package name, or `*` for everything.
    pub selector: String,
}

impl CategoryRequest {
    pub fn new(requester: SenderId, selector: impl Into<String>) -> Result<Self, CodecError> {
        let selector = selector.into();
        if selector.is_empty() {
            return Err(CodecError::invariant("request selector is empty"));
        }
        Ok(Self {
            requester,
            selector,
        })
    }

    pub fn matches(&self, package_name: &str) -> bool {
        self.selector == "*" || self.selector == package_name
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RequestWire {
    requester: String,
    selector: String,
}

pub fn encode_request(r: &CategoryRequest) -> Vec<u8> {
    let wire = RequestWire {
        requester: r.requester.to_string(),
        selector: r.selector.clone(),
    };
    serde_json::to_vec(&wire).expect("request serialization is infallible")
}

pub fn decode_request(bytes: &[u8]) -> Result<CategoryRequest, CodecError> {
    let wire: RequestWire = serde_json::from_slice(bytes).map_err(json_error)?;
    CategoryRequest::new(SenderId::new(wire.requester)?, wire.selector)
}

/// Orchestrator's answer to a category request, sent on the requester's
/// `hash_sender` topic before any transfer starts. `matches == 0` is the
/// empty-result notice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestNotice {
    pub selector: String,
    pub matches: u32,
}

pub fn encode_notice(n: &RequestNotice) -> Vec<u8> {
    serde_json::to_vec(n).expect("notice serialization is infallible")
}

pub fn decode_notice(bytes: &[u8]) -> Result<RequestNotice, CodecError> {
    serde_json::from_slice(bytes).map_err(json_error)
}

/// Anything a sender can receive on its `hash_sender` topic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SenderInbound {
    Ack(AckMessage),
    Notice(RequestNotice),
}

pub fn decode_sender_inbound(bytes: &[u8]) -> Result<SenderInbound, CodecError> {
    match decode_ack(bytes) {
        Ok(ack) => Ok(SenderInbound::Ack(ack)),
        Err(e @ CodecError::InvariantViolation(_)) => Err(e),
        Err(ack_err) => decode_notice(bytes)
            .map(SenderInbound::Notice)
            .map_err(|_| ack_err),
    }
}
