use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use bytes::Bytes;
use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::receiver::{ReceiverRole, ReceiverSettings};
use super::sender::{ImageSource, OutgoingItem, SenderRole, SenderSettings};
use super::status::StatusManager;
use super::storage::Storage;
use super::{Env, MetricsCounters, NodeError, TimerBook, TimerPurpose};
use crate::codec::{
    decode_header, decode_request, decode_sender_inbound, encode_notice, encode_request,
    CategoryRequest, HashId, RequestNotice, SenderId, SenderInbound,
};
use crate::fragmentation::DEFAULT_CHUNK_SIZE;
use crate::transport::scheme::{self, TopicKind};
use crate::transport::{
    Actor, NodeContext, QoS, SimTime, SubscriptionId, TopicFilter, TopicName,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeRole {
    Producer,
    Orchestrator,
    Hybrid,
}

impl NodeRole {
    pub fn receives(self) -> bool {
        self != NodeRole::Producer
    }
}

impl FromStr for NodeRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "producer" => Ok(NodeRole::Producer),
            "orchestrator" => Ok(NodeRole::Orchestrator),
            "hybrid" => Ok(NodeRole::Hybrid),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

impl fmt::Display for NodeRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NodeRole::Producer => "producer",
            NodeRole::Orchestrator => "orchestrator",
            NodeRole::Hybrid => "hybrid",
        })
    }
}

/// How hard a node tries to recover from a broken connection.
///
/// `Basic`: producers and hybrids do not resubscribe after losing
/// their session and start with an empty status journal.
/// `Resilient`: every node resubscribes, and unfinished transfers recorded
/// in the journal are restarted.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "kebab-case")]
pub enum RecoveryPolicy {
    #[default]
    Basic,
    Resilient,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimerConfig {
    #[serde(with = "secs")]
    pub header_retry: Duration,
    pub max_header_retries: u32,
    #[serde(with = "secs")]
    pub watchdog: Duration,
    pub max_assembly_rounds: u32,
    #[serde(with = "secs")]
    pub gap_min: Duration,
    #[serde(with = "secs")]
    pub gap_max: Duration,
    #[serde(with = "secs")]
    pub request_deadline: Duration,
}

impl Default for TimerConfig {
    fn default() -> Self {
        Self {
            header_retry: Duration::from_secs(5),
            max_header_retries: 10,
            watchdog: Duration::from_secs(10),
            max_assembly_rounds: 20,
            gap_min: Duration::from_millis(100),
            gap_max: Duration::from_secs(2),
            request_deadline: Duration::from_secs(30),
        }
    }
}

/// Durations as fractional seconds.
mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub id: SenderId,
    pub role: NodeRole,
    pub orchestrator: SenderId,
    pub policy: RecoveryPolicy,
    /// Holds `tmp/`, `storage/`, `spill/` and `status.journal`.
    pub work_dir: PathBuf,
    pub chunk_size: u32,
    pub timers: TimerConfig,
    pub storage_capacity: Option<u64>,
    /// Receiver buffers spill to disk above this many bytes.
    pub spill_threshold: u64,
    /// Write fragments to `tmp/` before sending.
    pub persist_temp: bool,
    pub qos: QoS,
}

impl NodeConfig {
    pub fn new(id: SenderId, role: NodeRole, orchestrator: SenderId, work_dir: PathBuf) -> Self {
        Self {
            id,
            role,
            orchestrator,
            policy: RecoveryPolicy::default(),
            work_dir,
            chunk_size: DEFAULT_CHUNK_SIZE,
            timers: TimerConfig::default(),
            storage_capacity: None,
            spill_threshold: 64 * 1024 * 1024,
            persist_temp: true,
            qos: QoS::AtLeastOnce,
        }
    }
}

/// A hybrid's category request and how far it got.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestState {
    pub selector: String,
    pub issued: SimTime,
    /// From the orchestrator's notice; `Some(0)` is an empty result.
    pub matches: Option<u32>,
    pub restored: u32,
    pub first_restore: Option<SimTime>,
    pub done_at: Option<SimTime>,
    pub timed_out: bool,
    #[serde(skip)]
    deadline: Option<u64>,
}

impl RequestState {
    pub fn is_done(&self) -> bool {
        self.done_at.is_some()
    }
}

/// One protocol participant. Every node can send; orchestrators and hybrids
/// also receive.
#[derive(Debug)]
pub struct ProtocolNode {
    cfg: NodeConfig,
    sender: SenderRole,
    receiver: Option<ReceiverRole>,
    timers: TimerBook,
    metrics: MetricsCounters,
    subscriptions: Vec<SubscriptionId>,
    connected_once: bool,
    requests: Vec<RequestState>,
}

impl ProtocolNode {
    pub fn new(cfg: NodeConfig) -> Result<Self, NodeError> {
        std::fs::create_dir_all(&cfg.work_dir)?;
        let journal = cfg.work_dir.join("status.journal");
        let status = match cfg.policy {
            RecoveryPolicy::Resilient => StatusManager::open(&journal)?,
            RecoveryPolicy::Basic => StatusManager::create(&journal)?,
        };
        let t = &cfg.timers;
        let sender = SenderRole::new(
            cfg.id.clone(),
            SenderSettings {
                chunk_size: cfg.chunk_size,
                header_retry: t.header_retry,
                max_header_retries: t.max_header_retries,
                gap_min: t.gap_min,
                gap_max: t.gap_max,
                temp_root: cfg.work_dir.join("tmp"),
                persist_temp: cfg.persist_temp,
                qos: cfg.qos,
            },
            status,
        );
        let receiver = if cfg.role.receives() {
            let storage = Storage::open(&cfg.work_dir.join("storage"), cfg.storage_capacity)?;
            Some(ReceiverRole::new(
                ReceiverSettings {
                    watchdog: t.watchdog,
                    max_rounds: t.max_assembly_rounds,
                    spill_threshold: cfg.spill_threshold,
                    spill_root: cfg.work_dir.join("spill"),
                    qos: cfg.qos,
                },
                storage,
            ))
        } else {
            None
        };
        Ok(Self {
            cfg,
            sender,
            receiver,
            timers: TimerBook::default(),
            metrics: MetricsCounters::default(),
            subscriptions: Vec::new(),
            connected_once: false,
            requests: Vec::new(),
        })
    }

    pub fn id(&self) -> &SenderId {
        &self.cfg.id
    }

    pub fn config(&self) -> &NodeConfig {
        &self.cfg
    }

    pub fn role(&self) -> NodeRole {
        self.cfg.role
    }

    pub fn metrics(&self) -> &MetricsCounters {
        &self.metrics
    }

    pub fn sender(&self) -> &SenderRole {
        &self.sender
    }

    pub fn receiver(&self) -> Option<&ReceiverRole> {
        self.receiver.as_ref()
    }

    pub fn requests(&self) -> &[RequestState] {
        &self.requests
    }

    /// No transfers, queue items, open buffers or pending requests left.
    pub fn is_idle(&self) -> bool {
        self.sender.is_idle()
            && self.receiver.as_ref().is_none_or(|r| r.open_buffers() == 0)
            && self.requests.iter().all(|r| r.is_done() || r.timed_out)
    }

    /// Starts one transfer immediately.
    pub fn begin_transfer(
        &mut self,
        ctx: &mut dyn NodeContext,
        receiver: &SenderId,
        image: Bytes,
        package_name: &str,
        file_name: &str,
        annotations: BTreeMap<String, String>,
    ) -> Result<HashId, NodeError> {
        let item = OutgoingItem {
            source: ImageSource::Inline(image.clone()),
            package_name: package_name.to_string(),
            file_name: file_name.to_string(),
            annotations,
        };
        let mut env = Env {
            ctx,
            timers: &mut self.timers,
            metrics: &mut self.metrics,
        };
        self.sender.begin_transfer(&mut env, receiver, &image, &item)
    }

    /// Queues images for paced, sequential transfer to `receiver`.
    pub fn enqueue(&mut self, ctx: &mut dyn NodeContext, receiver: &SenderId, items: Vec<OutgoingItem>) {
        let mut env = Env {
            ctx,
            timers: &mut self.timers,
            metrics: &mut self.metrics,
        };
        self.sender.enqueue(&mut env, receiver, items);
    }

    /// Queues images toward this node's orchestrator.
    pub fn send_package(&mut self, ctx: &mut dyn NodeContext, items: Vec<OutgoingItem>) {
        let orch = self.cfg.orchestrator.clone();
        self.enqueue(ctx, &orch, items);
    }

    /// Asks the orchestrator for every stored image matching `selector`.
    /// Returns the request's index into [`ProtocolNode::requests`].
    pub fn request(&mut self, ctx: &mut dyn NodeContext, selector: &str) -> Result<usize, NodeError> {
        if self.receiver.is_none() {
            return Err(NodeError::NotAReceiver);
        }
        let req = CategoryRequest::new(self.cfg.id.clone(), selector)
            .map_err(crate::fragmentation::FragmentError::from)?;
        let payload = Bytes::from(encode_request(&req));
        ctx.publish(&scheme::type_request(&self.cfg.orchestrator), payload, self.cfg.qos)?;
        let index = self.requests.len();
        let deadline = self.timers.arm(
            ctx,
            self.cfg.timers.request_deadline,
            TimerPurpose::RequestDeadline(index),
        );
        self.requests.push(RequestState {
            selector: selector.to_string(),
            issued: ctx.now(),
            matches: None,
            restored: 0,
            first_restore: None,
            done_at: None,
            timed_out: false,
            deadline: Some(deadline),
        });
        Ok(index)
    }

    fn subscribe_all(&mut self, ctx: &mut dyn NodeContext) {
        let id = &self.cfg.id;
        let mut filters: Vec<TopicFilter> = vec![scheme::hash_sender(id).into()];
        if self.cfg.role.receives() {
            filters.push(scheme::send_header(id).into());
            filters.push(scheme::hash_sender_orq_all(id));
        }
        if self.cfg.role == NodeRole::Orchestrator {
            filters.push(scheme::type_request(id).into());
        }
        self.subscriptions.clear();
        for f in &filters {
            match ctx.subscribe(f) {
                Ok(sid) => self.subscriptions.push(sid),
                Err(e) => debug!("{id}: subscribe {f} failed: {e}"),
            }
        }
    }

    fn serve_request(&mut self, ctx: &mut dyn NodeContext, req: CategoryRequest) {
        let Some(rx) = &self.receiver else {
            return;
        };
        let storage = rx.storage();
        let mut matching: Vec<_> = storage
            .entries()
            .filter(|e| req.matches(&e.package_name))
            .collect();
        matching.sort_by(|a, b| {
            (&a.package_name, &a.file_name, &a.sender, a.hash_file)
                .cmp(&(&b.package_name, &b.file_name, &b.sender, b.hash_file))
        });
        let items: Vec<OutgoingItem> = matching
            .iter()
            .map(|e| OutgoingItem {
                source: ImageSource::File(storage.absolute_path(e)),
                package_name: e.package_name.clone(),
                file_name: e.file_name.clone(),
                annotations: BTreeMap::from([("origin".to_string(), e.sender.to_string())]),
            })
            .collect();
        info!(
            "{}: request {:?} from {} matches {} images",
            self.cfg.id,
            req.selector,
            req.requester,
            items.len()
        );
        let notice = RequestNotice {
            selector: req.selector.clone(),
            matches: items.len() as u32,
        };
        let payload = Bytes::from(encode_notice(&notice));
        if ctx
            .publish(&scheme::hash_sender(&req.requester), payload, self.cfg.qos)
            .is_err()
        {
            debug!("{}: notice to {} not sent", self.cfg.id, req.requester);
        }
        if !items.is_empty() {
            self.enqueue(ctx, &req.requester, items);
        }
    }

    fn on_notice(&mut self, ctx: &mut dyn NodeContext, notice: RequestNotice) {
        let Some(req) = self
            .requests
            .iter_mut()
            .find(|r| r.matches.is_none() && !r.timed_out && r.selector == notice.selector)
        else {
            debug!("{}: unexpected notice for {:?}", self.cfg.id, notice.selector);
            return;
        };
        req.matches = Some(notice.matches);
        if let Some(token) = req.deadline.take() {
            self.timers.cancel(ctx, token);
        }
        if notice.matches == 0 || req.restored >= notice.matches {
            req.done_at = Some(ctx.now());
        }
    }

    /// Credits images restored from the orchestrator to open requests.
    fn credit_requests(&mut self, now: SimTime, restored_before: usize) {
        let Some(rx) = &self.receiver else {
            return;
        };
        for img in &rx.restored()[restored_before..] {
            if img.entry.sender != self.cfg.orchestrator {
                continue;
            }
            let open = self.requests.iter_mut().find(|r| {
                !r.is_done()
                    && (r.selector == "*" || r.selector == img.entry.package_name)
                    && r.matches.is_none_or(|m| r.restored < m)
            });
            if let Some(r) = open {
                r.restored += 1;
                r.first_restore.get_or_insert(now);
                if r.matches.is_some_and(|m| r.restored >= m) {
                    r.done_at = Some(now);
                }
            }
        }
    }
}

impl Actor for ProtocolNode {
    fn on_connect(&mut self, ctx: &mut dyn NodeContext, session_present: bool) {
        let first = !self.connected_once;
        self.connected_once = true;
        let resubscribe = !session_present
            && (self.cfg.policy == RecoveryPolicy::Resilient
                || self.cfg.role == NodeRole::Orchestrator);
        if first || resubscribe {
            self.subscribe_all(ctx);
        }
        if first && self.cfg.policy == RecoveryPolicy::Resilient {
            let mut env = Env {
                ctx,
                timers: &mut self.timers,
                metrics: &mut self.metrics,
            };
            match self.sender.recover(&mut env) {
                Ok(0) => {}
                Ok(n) => info!("{}: resumed {n} unfinished transfers", self.cfg.id),
                Err(e) => log::warn!("{}: journal recovery failed: {e}", self.cfg.id),
            }
        }
    }

    fn on_message(&mut self, ctx: &mut dyn NodeContext, topic: &TopicName, payload: &Bytes) {
        let Some(kind) = scheme::classify(&self.cfg.id, topic) else {
            return;
        };
        let restored_before = self.receiver.as_ref().map_or(0, |r| r.restored().len());
        let mut env = Env {
            ctx,
            timers: &mut self.timers,
            metrics: &mut self.metrics,
        };
        match kind {
            TopicKind::SendHeader => {
                let Some(rx) = self.receiver.as_mut() else {
                    return;
                };
                match decode_header(payload) {
                    Ok(h) => rx.on_header(&mut env, h),
                    Err(e) => {
                        debug!("{}: bad header: {e}", self.cfg.id);
                        env.metrics.decode_errors += 1;
                    }
                }
            }
            TopicKind::Fragments { sender } => {
                if let Some(rx) = self.receiver.as_mut() {
                    rx.on_fragment(&mut env, &sender, payload);
                }
            }
            TopicKind::HashSender => match decode_sender_inbound(payload) {
                Ok(SenderInbound::Ack(ack)) => self.sender.on_ack(&mut env, &ack),
                Ok(SenderInbound::Notice(n)) => self.on_notice(ctx, n),
                Err(e) => {
                    debug!("{}: bad control message: {e}", self.cfg.id);
                    env.metrics.decode_errors += 1;
                }
            },
            TopicKind::TypeRequest => {
                if self.cfg.role != NodeRole::Orchestrator {
                    return;
                }
                match decode_request(payload) {
                    Ok(req) => self.serve_request(ctx, req),
                    Err(e) => {
                        debug!("{}: bad request: {e}", self.cfg.id);
                        env.metrics.decode_errors += 1;
                    }
                }
            }
        }
        self.credit_requests(ctx.now(), restored_before);
    }

    fn on_timer(&mut self, ctx: &mut dyn NodeContext, token: u64) {
        let Some(purpose) = self.timers.fire(token) else {
            return;
        };
        let mut env = Env {
            ctx,
            timers: &mut self.timers,
            metrics: &mut self.metrics,
        };
        match purpose {
            TimerPurpose::HeaderRetry(hash) => self.sender.on_retry_timer(&mut env, hash),
            TimerPurpose::QueueStart(dest) => self.sender.on_queue_timer(&mut env, &dest),
            TimerPurpose::Watchdog(sender, hash) => {
                if let Some(rx) = self.receiver.as_mut() {
                    rx.on_watchdog(&mut env, sender, hash);
                }
            }
            TimerPurpose::RequestDeadline(index) => {
                if let Some(r) = self.requests.get_mut(index) {
                    r.deadline = None;
                    if r.matches.is_none() {
                        info!("{}: request {:?} timed out", self.cfg.id, r.selector);
                        r.timed_out = true;
                    }
                }
            }
        }
    }
}
