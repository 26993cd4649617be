use std::any::Any;
use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::mem;
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use chrono::{DateTime, TimeZone, Utc};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::link::Pipe;
use super::{
    derive_rng, Actor, FaultAction, FaultSchedule, LinkState, NodeContext, PublishTicket, QoS,
    SessionMode, SimTime, SubscriptionId, SubscriptionTrie, TimerId, TopicFilter, TopicName,
    TrafficProfile, TransportError,
};
use crate::codec::SenderId;

/// MQTT fixed header, topic length prefix and packet id.
const PUBLISH_OVERHEAD: u64 = 7;

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub seed: u64,
    pub session_mode: SessionMode,
    pub broker_id: SenderId,
    /// Capacity of the broker's port, shared by all clients in each direction.
    pub broker_capacity_bps: u64,
    /// Time between a path becoming usable again and the client's session
    /// being re-established.
    pub reconnect_delay: Duration,
    pub record_deliveries: bool,
    /// Calendar instant that simulated time zero maps to.
    pub epoch: DateTime<Utc>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            session_mode: SessionMode::Clean,
            broker_id: SenderId::new("broker").expect("static id"),
            broker_capacity_bps: 1_000_000_000,
            reconnect_delay: Duration::from_secs(2),
            record_deliveries: false,
            epoch: Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap(),
        }
    }
}

/// Message counts. `queued`, `in_flight` and `uplink_pending` are
/// snapshots; the rest only grow.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TransportStats {
    /// Accepted publish calls.
    pub published: u64,
    /// Messages that reached the broker's router.
    pub routed: u64,
    /// Messages lost between publisher and router.
    pub uplink_lost: u64,
    /// Messages on the uplink or held by the client for resend.
    pub uplink_pending: u64,
    /// Subscriber copies created by routing, one per matching client.
    pub copies: u64,
    pub delivered: u64,
    pub dropped: u64,
    /// Copies waiting in persistent sessions of offline clients.
    pub queued: u64,
    /// Copies on their way to an online client.
    pub in_flight: u64,
}

impl TransportStats {
    pub fn is_conserved(&self) -> bool {
        self.published == self.routed + self.uplink_lost + self.uplink_pending
            && self.copies == self.delivered + self.dropped + self.queued + self.in_flight
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryRecord {
    pub at: SimTime,
    pub message: u64,
    pub publisher: SenderId,
    pub subscriber: SenderId,
    pub topic: TopicName,
}

#[derive(Debug)]
struct Message {
    id: u64,
    publisher: SenderId,
    topic: TopicName,
    payload: Bytes,
    qos: QoS,
}

impl Message {
    fn wire_len(&self) -> u64 {
        self.payload.len() as u64 + self.topic.as_str().len() as u64 + PUBLISH_OVERHEAD
    }
}

#[derive(Debug)]
struct Delivery {
    id: u64,
    msg: Arc<Message>,
}

#[derive(Debug)]
enum EventKind {
    Connect { node: SenderId, gen: u64 },
    AtBroker { node: SenderId, gen: u64, msg: Arc<Message> },
    Route { node: SenderId, gen: u64, msg: Arc<Message> },
    Deliver { node: SenderId, gen: u64, delivery: u64 },
    Timer { node: SenderId, timer: TimerId, token: u64 },
    Link { node: SenderId, up: bool },
}

impl EventKind {
    fn digest_into(&self, h: &mut Sha256) {
        let (tag, node, a, b): (u8, &SenderId, u64, u64) = match self {
            EventKind::Connect { node, gen } => (0, node, *gen, 0),
            EventKind::AtBroker { node, gen, msg } => (1, node, *gen, msg.id),
            EventKind::Route { node, gen, msg } => (2, node, *gen, msg.id),
            EventKind::Deliver { node, gen, delivery } => (3, node, *gen, *delivery),
            EventKind::Timer { node, timer, token } => (4, node, timer.0, *token),
            EventKind::Link { node, up } => (5, node, u64::from(*up), 0),
        };
        h.update([tag]);
        h.update(node.as_str().as_bytes());
        h.update([0]);
        h.update(a.to_be_bytes());
        h.update(b.to_be_bytes());
    }
}

#[derive(Debug)]
struct Scheduled {
    at: SimTime,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

struct Client {
    link: LinkState,
    connected: bool,
    /// Bumped whenever the connection breaks; events carrying an older value
    /// belong to a dead connection.
    gen: u64,
    tx: Pipe,
    rx: Pipe,
    uplink: BTreeMap<u64, Arc<Message>>,
    retained: Vec<Arc<Message>>,
    timers: BTreeSet<TimerId>,
    rng: ChaCha8Rng,
}

#[derive(Default)]
struct Session {
    subs: BTreeMap<SubscriptionId, TopicFilter>,
    queue: VecDeque<Delivery>,
    inflight: BTreeMap<u64, Delivery>,
}

struct Broker {
    up: bool,
    rx: Pipe,
    tx: Pipe,
    sessions: BTreeMap<SenderId, Session>,
    trie: SubscriptionTrie<(SenderId, SubscriptionId)>,
    traffic: Vec<TrafficProfile>,
}

struct Network {
    cfg: SimConfig,
    now: SimTime,
    seq: u64,
    next_id: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
    clients: BTreeMap<SenderId, Client>,
    broker: Broker,
    stats: TransportStats,
    log: Vec<DeliveryRecord>,
}

impl Network {
    fn schedule(&mut self, at: SimTime, kind: EventKind) {
        debug_assert!(at >= self.now);
        self.seq += 1;
        self.queue.push(Reverse(Scheduled {
            at,
            seq: self.seq,
            kind,
        }));
    }

    fn fresh_id(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id
    }

    fn persistent(&self) -> bool {
        self.cfg.session_mode == SessionMode::Persistent
    }

    fn client(&mut self, node: &SenderId) -> &mut Client {
        self.clients.get_mut(node).expect("events only name registered nodes")
    }

    fn publish(
        &mut self,
        node: &SenderId,
        topic: &TopicName,
        payload: Bytes,
        qos: QoS,
    ) -> Result<PublishTicket, TransportError> {
        if !self.client(node).connected {
            return Err(TransportError::Disconnected);
        }
        let id = self.fresh_id();
        let msg = Arc::new(Message {
            id,
            publisher: node.clone(),
            topic: topic.clone(),
            payload,
            qos,
        });
        self.stats.published += 1;
        self.send_uplink(node, msg);
        Ok(PublishTicket(id))
    }

    fn send_uplink(&mut self, node: &SenderId, msg: Arc<Message>) {
        let now = self.now;
        let c = self.clients.get_mut(node).expect("registered");
        let done = c.tx.transmit(now, msg.wire_len(), &[]) + c.link.latency;
        let gen = c.gen;
        c.uplink.insert(msg.id, msg.clone());
        self.schedule(
            done,
            EventKind::AtBroker {
                node: node.clone(),
                gen,
                msg,
            },
        );
    }

    fn is_current(&self, node: &SenderId, gen: u64) -> bool {
        self.clients.get(node).is_some_and(|c| c.gen == gen)
    }

    fn at_broker(&mut self, node: SenderId, gen: u64, msg: Arc<Message>) {
        if !self.is_current(&node, gen) {
            return;
        }
        let done = self
            .broker
            .rx
            .transmit(self.now, msg.wire_len(), &self.broker.traffic);
        self.schedule(done, EventKind::Route { node, gen, msg });
    }

    fn route(&mut self, node: SenderId, gen: u64, msg: Arc<Message>) {
        if !self.is_current(&node, gen) {
            return;
        }
        self.client(&node).uplink.remove(&msg.id);
        self.stats.routed += 1;
        let targets: BTreeSet<SenderId> = self
            .broker
            .trie
            .matches(&msg.topic)
            .into_iter()
            .map(|(client, _)| client)
            .collect();
        for target in targets {
            self.stats.copies += 1;
            let delivery = Delivery {
                id: self.fresh_id(),
                msg: msg.clone(),
            };
            if self.clients[&target].connected {
                self.send_downlink(&target, delivery);
            } else if self.persistent() && msg.qos == QoS::AtLeastOnce {
                self.session(&target).queue.push_back(delivery);
            } else {
                self.stats.dropped += 1;
            }
        }
    }

    fn session(&mut self, node: &SenderId) -> &mut Session {
        self.broker.sessions.entry(node.clone()).or_default()
    }

    fn send_downlink(&mut self, node: &SenderId, delivery: Delivery) {
        let len = delivery.msg.wire_len();
        let left_broker = self.broker.tx.transmit(self.now, len, &self.broker.traffic);
        let c = self.clients.get_mut(node).expect("registered");
        let arrived = c.rx.transmit(left_broker + c.link.latency, len, &[]);
        let gen = c.gen;
        let id = delivery.id;
        self.session(node).inflight.insert(id, delivery);
        self.schedule(
            arrived,
            EventKind::Deliver {
                node: node.clone(),
                gen,
                delivery: id,
            },
        );
    }

    fn take_delivery(&mut self, node: &SenderId, gen: u64, id: u64) -> Option<Arc<Message>> {
        if !self.is_current(node, gen) {
            return None;
        }
        let delivery = self.broker.sessions.get_mut(node)?.inflight.remove(&id)?;
        self.stats.delivered += 1;
        if self.cfg.record_deliveries {
            self.log.push(DeliveryRecord {
                at: self.now,
                message: delivery.msg.id,
                publisher: delivery.msg.publisher.clone(),
                subscriber: node.clone(),
                topic: delivery.msg.topic.clone(),
            });
        }
        Some(delivery.msg)
    }

    /// Tears down the connection; returns whether one existed.
    fn disconnect(&mut self, node: &SenderId) -> bool {
        let now = self.now;
        let persistent = self.persistent();
        let c = self.clients.get_mut(node).expect("registered");
        if !c.connected {
            return false;
        }
        c.connected = false;
        c.gen += 1;
        c.tx.flush(now);
        c.rx.flush(now);
        for msg in mem::take(&mut c.uplink).into_values() {
            if persistent && msg.qos == QoS::AtLeastOnce {
                c.retained.push(msg);
            } else {
                self.stats.uplink_lost += 1;
            }
        }
        if persistent {
            if let Some(s) = self.broker.sessions.get_mut(node) {
                for d in mem::take(&mut s.inflight).into_values().rev() {
                    if d.msg.qos == QoS::AtLeastOnce {
                        s.queue.push_front(d);
                    } else {
                        self.stats.dropped += 1;
                    }
                }
            }
        } else if let Some(s) = self.broker.sessions.remove(node) {
            self.stats.dropped += (s.inflight.len() + s.queue.len()) as u64;
            for (id, filter) in s.subs {
                self.broker.trie.remove(&filter, &(node.clone(), id));
            }
        }
        true
    }

    /// Completes a pending connect; `Some(session_present)` on success.
    fn complete_connect(&mut self, node: &SenderId, gen: u64) -> Option<bool> {
        let broker_up = self.broker.up;
        let c = self.clients.get_mut(node)?;
        if c.gen != gen || c.connected || !c.link.up || !broker_up {
            return None;
        }
        c.connected = true;
        let resend = mem::take(&mut c.retained);
        let present = self.broker.sessions.contains_key(node);
        self.session(node);
        for msg in resend {
            self.send_uplink(node, msg);
        }
        Some(present)
    }

    fn flush_session(&mut self, node: &SenderId) {
        if !self.clients[node].connected {
            return;
        }
        let backlog = mem::take(&mut self.session(node).queue);
        for d in backlog {
            self.send_downlink(node, d);
        }
    }

    fn schedule_connect(&mut self, node: &SenderId) {
        let at = self.now + self.cfg.reconnect_delay;
        let gen = self.clients[node].gen;
        self.schedule(
            at,
            EventKind::Connect {
                node: node.clone(),
                gen,
            },
        );
    }

    /// Applies a link change; returns the nodes that lost their connection.
    fn link_change(&mut self, node: &SenderId, up: bool) -> Vec<SenderId> {
        if *node == self.cfg.broker_id {
            return self.broker_change(up);
        }
        let mut lost = Vec::new();
        if up {
            let c = self.client(node);
            if c.link.up {
                return lost;
            }
            c.link.up = true;
            if self.broker.up {
                self.schedule_connect(node);
            }
        } else {
            if self.disconnect(node) {
                lost.push(node.clone());
            }
            let c = self.client(node);
            c.link.up = false;
            c.gen += 1;
        }
        lost
    }

    fn broker_change(&mut self, up: bool) -> Vec<SenderId> {
        if up == self.broker.up {
            return Vec::new();
        }
        self.broker.up = up;
        let ids: Vec<SenderId> = self.clients.keys().cloned().collect();
        if up {
            for id in ids {
                let c = &self.clients[&id];
                if c.link.up && !c.connected {
                    self.schedule_connect(&id);
                }
            }
            return Vec::new();
        }
        self.broker.rx.flush(self.now);
        self.broker.tx.flush(self.now);
        ids.into_iter().filter(|id| self.disconnect(id)).collect()
    }

    fn snapshot(&self) -> TransportStats {
        let mut s = self.stats;
        s.queued = self.broker.sessions.values().map(|x| x.queue.len() as u64).sum();
        s.in_flight = self.broker.sessions.values().map(|x| x.inflight.len() as u64).sum();
        s.uplink_pending = self
            .clients
            .values()
            .map(|c| (c.uplink.len() + c.retained.len()) as u64)
            .sum();
        s
    }
}

struct Ctx<'a> {
    net: &'a mut Network,
    node: &'a SenderId,
}

impl NodeContext for Ctx<'_> {
    fn node_id(&self) -> &SenderId {
        self.node
    }

    fn now(&self) -> SimTime {
        self.net.now
    }

    fn wall_time(&self) -> DateTime<Utc> {
        self.net.cfg.epoch + chrono::Duration::nanoseconds(self.net.now.as_nanos() as i64)
    }

    fn is_connected(&self) -> bool {
        self.net.clients[self.node].connected
    }

    fn publish(
        &mut self,
        topic: &TopicName,
        payload: Bytes,
        qos: QoS,
    ) -> Result<PublishTicket, TransportError> {
        self.net.publish(self.node, topic, payload, qos)
    }

    fn subscribe(&mut self, filter: &TopicFilter) -> Result<SubscriptionId, TransportError> {
        if !self.net.clients[self.node].connected {
            return Err(TransportError::Disconnected);
        }
        let existing = self
            .net
            .session(self.node)
            .subs
            .iter()
            .find(|(_, f)| *f == filter)
            .map(|(id, _)| *id);
        if let Some(id) = existing {
            return Ok(id);
        }
        let id = SubscriptionId(self.net.fresh_id());
        self.net.session(self.node).subs.insert(id, filter.clone());
        self.net.broker.trie.insert(filter, (self.node.clone(), id));
        Ok(id)
    }

    fn unsubscribe(&mut self, id: SubscriptionId) {
        let Some(s) = self.net.broker.sessions.get_mut(self.node) else {
            return;
        };
        if let Some(filter) = s.subs.remove(&id) {
            self.net.broker.trie.remove(&filter, &(self.node.clone(), id));
        }
    }

    fn set_timer(&mut self, after: Duration, token: u64) -> TimerId {
        let id = TimerId(self.net.fresh_id());
        self.net.client(self.node).timers.insert(id);
        let at = self.net.now + after;
        self.net.schedule(
            at,
            EventKind::Timer {
                node: self.node.clone(),
                timer: id,
                token,
            },
        );
        id
    }

    fn cancel_timer(&mut self, id: TimerId) {
        self.net.client(self.node).timers.remove(&id);
    }

    fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.net.client(self.node).rng
    }
}

/// Single-threaded discrete-event broker and network.
///
/// Events run in (time, insertion) order. Every processed event is folded
/// into a running SHA-256 so two runs can be compared by digest alone.
pub struct Simulator {
    actors: BTreeMap<SenderId, Box<dyn Actor>>,
    net: Network,
    digest: Sha256,
    processed: u64,
}

impl Simulator {
    pub fn new(cfg: SimConfig) -> Result<Self, TransportError> {
        if cfg.broker_capacity_bps == 0 {
            return Err(TransportError::InvalidConfig("broker capacity is zero".into()));
        }
        let cap = cfg.broker_capacity_bps;
        Ok(Self {
            actors: BTreeMap::new(),
            net: Network {
                cfg,
                now: SimTime::ZERO,
                seq: 0,
                next_id: 0,
                queue: BinaryHeap::new(),
                clients: BTreeMap::new(),
                broker: Broker {
                    up: true,
                    rx: Pipe::new(cap),
                    tx: Pipe::new(cap),
                    sessions: BTreeMap::new(),
                    trie: SubscriptionTrie::new(),
                    traffic: Vec::new(),
                },
                stats: TransportStats::default(),
                log: Vec::new(),
            },
            digest: Sha256::new(),
            processed: 0,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.net.cfg
    }

    pub fn now(&self) -> SimTime {
        self.net.now
    }

    /// Registers a node; it connects at the current instant.
    pub fn add_node(&mut self, link: LinkState, actor: Box<dyn Actor>) -> Result<(), TransportError> {
        let id = link.node.clone();
        if id == self.net.cfg.broker_id || self.actors.contains_key(&id) {
            return Err(TransportError::DuplicateNode(id.to_string()));
        }
        if link.capacity_bps == 0 {
            return Err(TransportError::InvalidConfig(format!("link of {id} has zero capacity")));
        }
        let rng = derive_rng(self.net.cfg.seed, id.as_str());
        let up = link.up;
        self.net.clients.insert(
            id.clone(),
            Client {
                tx: Pipe::new(link.capacity_bps),
                rx: Pipe::new(link.capacity_bps),
                link,
                connected: false,
                gen: 0,
                uplink: BTreeMap::new(),
                retained: Vec::new(),
                timers: BTreeSet::new(),
                rng,
            },
        );
        self.actors.insert(id.clone(), actor);
        if up {
            let now = self.net.now;
            self.net.schedule(now, EventKind::Connect { node: id, gen: 0 });
        }
        Ok(())
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &SenderId> {
        self.actors.keys()
    }

    /// Schedules a link change for a node, or for the broker itself.
    pub fn set_link(&mut self, node: &SenderId, up: bool, at: SimTime) -> Result<(), TransportError> {
        if at < self.net.now {
            return Err(TransportError::TimeTravel {
                at,
                now: self.net.now,
            });
        }
        if *node != self.net.cfg.broker_id && !self.net.clients.contains_key(node) {
            return Err(TransportError::UnknownNode(node.to_string()));
        }
        self.net.schedule(
            at,
            EventKind::Link {
                node: node.clone(),
                up,
            },
        );
        Ok(())
    }

    pub fn apply_faults(&mut self, schedule: &FaultSchedule) -> Result<(), TransportError> {
        for e in schedule.events() {
            self.set_link(&e.node, e.action == FaultAction::Up, e.at)?;
        }
        Ok(())
    }

    pub fn add_background_traffic(&mut self, profile: TrafficProfile) -> Result<(), TransportError> {
        profile.validate()?;
        self.net.broker.traffic.push(profile);
        Ok(())
    }

    pub fn is_connected(&self, node: &SenderId) -> bool {
        self.net.clients.get(node).is_some_and(|c| c.connected)
    }

    pub fn pending_events(&self) -> usize {
        self.net.queue.len()
    }

    pub fn next_event_time(&self) -> Option<SimTime> {
        self.net.queue.peek().map(|Reverse(s)| s.at)
    }

    pub fn events_processed(&self) -> u64 {
        self.processed
    }

    pub fn stats(&self) -> TransportStats {
        self.net.snapshot()
    }

    /// Delivery log; empty unless `record_deliveries` is set.
    pub fn deliveries(&self) -> &[DeliveryRecord] {
        &self.net.log
    }

    pub fn trace_digest(&self) -> String {
        hex::encode(self.digest.clone().finalize())
    }

    /// Processes every event at or before `t`, then moves the clock to `t`.
    pub fn run_until(&mut self, t: SimTime) -> u64 {
        let mut n = 0;
        while self.next_event_time().is_some_and(|at| at <= t) {
            self.step();
            n += 1;
        }
        self.net.now = self.net.now.max(t);
        n
    }

    /// Runs until nothing is scheduled or the next event lies past `max_t`.
    pub fn run_to_quiescence(&mut self, max_t: SimTime) -> u64 {
        let mut n = 0;
        while self.next_event_time().is_some_and(|at| at <= max_t) {
            self.step();
            n += 1;
        }
        n
    }

    /// Processes one event; false when the queue is empty.
    pub fn step(&mut self) -> bool {
        let Some(Reverse(ev)) = self.net.queue.pop() else {
            return false;
        };
        self.net.now = ev.at;
        self.processed += 1;
        self.digest.update(ev.at.as_nanos().to_be_bytes());
        self.digest.update(ev.seq.to_be_bytes());
        ev.kind.digest_into(&mut self.digest);
        match ev.kind {
            EventKind::Connect { node, gen } => {
                if let Some(present) = self.net.complete_connect(&node, gen) {
                    self.call(&node, |a, ctx| a.on_connect(ctx, present));
                    self.net.flush_session(&node);
                }
            }
            EventKind::AtBroker { node, gen, msg } => self.net.at_broker(node, gen, msg),
            EventKind::Route { node, gen, msg } => self.net.route(node, gen, msg),
            EventKind::Deliver {
                node,
                gen,
                delivery,
            } => {
                if let Some(msg) = self.net.take_delivery(&node, gen, delivery) {
                    self.call(&node, |a, ctx| a.on_message(ctx, &msg.topic, &msg.payload));
                }
            }
            EventKind::Timer { node, timer, token } => {
                if self.net.client(&node).timers.remove(&timer) {
                    self.call(&node, |a, ctx| a.on_timer(ctx, token));
                }
            }
            EventKind::Link { node, up } => {
                for lost in self.net.link_change(&node, up) {
                    self.call(&lost, |a, ctx| a.on_disconnect(ctx));
                }
            }
        }
        true
    }

    fn call(&mut self, node: &SenderId, f: impl FnOnce(&mut dyn Actor, &mut dyn NodeContext)) {
        if let Some(actor) = self.actors.get_mut(node) {
            let mut ctx = Ctx {
                net: &mut self.net,
                node,
            };
            f(actor.as_mut(), &mut ctx);
        }
    }

    /// Runs `f` against a node's actor as if it were one of its handlers.
    pub fn invoke<T: Actor, R>(
        &mut self,
        node: &SenderId,
        f: impl FnOnce(&mut T, &mut dyn NodeContext) -> R,
    ) -> Result<R, TransportError> {
        let actor = self
            .actors
            .get_mut(node)
            .ok_or_else(|| TransportError::UnknownNode(node.to_string()))?;
        let actor = (actor.as_mut() as &mut dyn Any)
            .downcast_mut::<T>()
            .ok_or_else(|| TransportError::UnknownNode(format!("{node} has another actor type")))?;
        let mut ctx = Ctx {
            net: &mut self.net,
            node,
        };
        Ok(f(actor, &mut ctx))
    }

    pub fn actor<T: Actor>(&self, node: &SenderId) -> Option<&T> {
        let actor = self.actors.get(node)?;
        (actor.as_ref() as &dyn Any).downcast_ref::<T>()
    }
}
