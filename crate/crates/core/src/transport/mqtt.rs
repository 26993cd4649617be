//! Runs an [`Actor`] against a real MQTT 3.1.1 broker.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use bytes::Bytes;
use chrono::{DateTime, Utc};
use log::{debug, info, warn};
use rand_chacha::ChaCha8Rng;
use rumqttc::{Client, Connection, Event, MqttOptions, Packet};

use super::{
    derive_rng, Actor, NodeContext, PublishTicket, QoS, SessionMode, SimTime, SubscriptionId,
    TimerId, TopicFilter, TopicName, TransportError,
};
use crate::codec::SenderId;

/// Room for a fragment of the largest chunk size plus its framing.
const MAX_PACKET: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct MqttSettings {
    pub host: String,
    pub port: u16,
    pub client_id: SenderId,
    pub session_mode: SessionMode,
    pub keep_alive: Duration,
    /// Pause between reconnect attempts.
    pub retry_delay: Duration,
    pub seed: u64,
}

impl MqttSettings {
    /// Parses `host:port` (port defaults to 1883).
    pub fn new(broker: &str, client_id: SenderId) -> Result<Self, TransportError> {
        let (host, port) = match broker.rsplit_once(':') {
            Some((h, p)) => (
                h.to_string(),
                p.parse()
                    .map_err(|_| TransportError::InvalidConfig(format!("bad broker port in {broker:?}")))?,
            ),
            None => (broker.to_string(), 1883),
        };
        if host.is_empty() {
            return Err(TransportError::InvalidConfig("broker host is empty".into()));
        }
        Ok(Self {
            host,
            port,
            client_id,
            session_mode: SessionMode::Clean,
            keep_alive: Duration::from_secs(30),
            retry_delay: Duration::from_secs(2),
            seed: 0,
        })
    }
}

enum Inbound {
    Connected(bool),
    Disconnected(String),
    Message(String, Bytes),
}

fn to_rumqtt(q: QoS) -> rumqttc::QoS {
    match q {
        QoS::AtMostOnce => rumqttc::QoS::AtMostOnce,
        QoS::AtLeastOnce => rumqttc::QoS::AtLeastOnce,
    }
}

#[derive(Default)]
struct Timers {
    next: u64,
    heap: BinaryHeap<Reverse<(Instant, u64, u64)>>,
    cancelled: BTreeSet<u64>,
}

struct LiveCtx<'a> {
    id: &'a SenderId,
    client: &'a Client,
    connected: bool,
    start: Instant,
    rng: &'a mut ChaCha8Rng,
    timers: &'a mut Timers,
    subs: &'a mut BTreeMap<u64, TopicFilter>,
    next_sub: &'a mut u64,
    next_ticket: &'a mut u64,
}

impl NodeContext for LiveCtx<'_> {
    fn node_id(&self) -> &SenderId {
        self.id
    }

    fn now(&self) -> SimTime {
        SimTime::from_nanos(self.start.elapsed().as_nanos() as u64)
    }

    fn wall_time(&self) -> DateTime<Utc> {
        Utc::now()
    }

    fn is_connected(&self) -> bool {
        self.connected
    }

    fn publish(&mut self, topic: &TopicName, payload: Bytes, qos: QoS) -> Result<PublishTicket, TransportError> {
        if !self.connected {
            return Err(TransportError::Disconnected);
        }
        self.client
            .publish(topic.as_str(), to_rumqtt(qos), false, payload.to_vec())
            .map_err(|e| TransportError::Connection(e.to_string()))?;
        *self.next_ticket += 1;
        Ok(PublishTicket(*self.next_ticket))
    }

    fn subscribe(&mut self, filter: &TopicFilter) -> Result<SubscriptionId, TransportError> {
        if let Some((id, _)) = self.subs.iter().find(|(_, f)| *f == filter) {
            return Ok(SubscriptionId(*id));
        }
        self.client
            .subscribe(filter.as_str(), rumqttc::QoS::AtLeastOnce)
            .map_err(|e| TransportError::Connection(e.to_string()))?;
        *self.next_sub += 1;
        self.subs.insert(*self.next_sub, filter.clone());
        Ok(SubscriptionId(*self.next_sub))
    }

    fn unsubscribe(&mut self, id: SubscriptionId) {
        if let Some(f) = self.subs.remove(&id.0) {
            if let Err(e) = self.client.unsubscribe(f.as_str()) {
                debug!("{}: unsubscribe {f}: {e}", self.id);
            }
        }
    }

    fn set_timer(&mut self, after: Duration, token: u64) -> TimerId {
        self.timers.next += 1;
        let id = self.timers.next;
        self.timers.heap.push(Reverse((Instant::now() + after, id, token)));
        TimerId(id)
    }

    fn cancel_timer(&mut self, id: TimerId) {
        self.timers.cancelled.insert(id.0);
    }

    fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }
}

/// One actor wired to a broker connection, driven on the calling thread.
pub struct MqttNode<A: Actor> {
    settings: MqttSettings,
    actor: A,
    client: Client,
    inbound: Receiver<Inbound>,
    connected: bool,
    start: Instant,
    rng: ChaCha8Rng,
    timers: Timers,
    subs: BTreeMap<u64, TopicFilter>,
    next_sub: u64,
    next_ticket: u64,
}

impl<A: Actor> MqttNode<A> {
    pub fn connect(settings: MqttSettings, actor: A) -> Self {
        let mut opts = MqttOptions::new(settings.client_id.as_str(), &settings.host, settings.port);
        opts.set_keep_alive(settings.keep_alive)
            .set_clean_session(settings.session_mode == SessionMode::Clean)
            .set_max_packet_size(MAX_PACKET, MAX_PACKET);
        let (client, connection) = Client::new(opts, 256);
        let (tx, rx) = mpsc::channel();
        let retry = settings.retry_delay;
        let name = settings.client_id.to_string();
        thread::Builder::new()
            .name(format!("mqtt-{name}"))
            .spawn(move || pump(connection, tx, retry))
            .expect("spawn connection thread");
        let rng = derive_rng(settings.seed, settings.client_id.as_str());
        Self {
            settings,
            actor,
            client,
            inbound: rx,
            connected: false,
            start: Instant::now(),
            rng,
            timers: Timers::default(),
            subs: BTreeMap::new(),
            next_sub: 0,
            next_ticket: 0,
        }
    }

    pub fn actor(&self) -> &A {
        &self.actor
    }

    pub fn is_connected(&self) -> bool {
        self.connected
    }

    /// Runs `f` against the actor with a live context, e.g. to queue work.
    pub fn invoke<R>(&mut self, f: impl FnOnce(&mut A, &mut dyn NodeContext) -> R) -> R {
        let mut ctx = LiveCtx {
            id: &self.settings.client_id,
            client: &self.client,
            connected: self.connected,
            start: self.start,
            rng: &mut self.rng,
            timers: &mut self.timers,
            subs: &mut self.subs,
            next_sub: &mut self.next_sub,
            next_ticket: &mut self.next_ticket,
        };
        f(&mut self.actor, &mut ctx)
    }

    /// Processes events until `done` holds or `limit` elapses. Returns
    /// whether `done` was reached.
    pub fn run(&mut self, limit: Option<Duration>, mut done: impl FnMut(&A, bool) -> bool) -> bool {
        let deadline = limit.map(|l| Instant::now() + l);
        loop {
            self.fire_due_timers();
            if done(&self.actor, self.connected) {
                return true;
            }
            let now = Instant::now();
            if deadline.is_some_and(|d| now >= d) {
                return false;
            }
            let mut wait = Duration::from_millis(200);
            if let Some(Reverse((at, _, _))) = self.timers.heap.peek() {
                wait = wait.min(at.saturating_duration_since(now));
            }
            if let Some(d) = deadline {
                wait = wait.min(d.saturating_duration_since(now));
            }
            match self.inbound.recv_timeout(wait) {
                Ok(ev) => self.handle(ev),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => {
                    warn!("{}: connection thread ended", self.settings.client_id);
                    return false;
                }
            }
        }
    }

    pub fn disconnect(self) -> A {
        if let Err(e) = self.client.disconnect() {
            debug!("{}: disconnect: {e}", self.settings.client_id);
        }
        self.actor
    }

    fn handle(&mut self, ev: Inbound) {
        match ev {
            Inbound::Connected(present) => {
                info!("{}: connected (session present: {present})", self.settings.client_id);
                self.connected = true;
                if !present {
                    self.subs.clear();
                }
                self.invoke(|a, ctx| a.on_connect(ctx, present));
            }
            Inbound::Disconnected(why) => {
                if self.connected {
                    warn!("{}: connection lost: {why}", self.settings.client_id);
                    self.connected = false;
                    self.invoke(|a, ctx| a.on_disconnect(ctx));
                }
            }
            Inbound::Message(topic, payload) => match TopicName::new(topic.clone()) {
                Ok(t) => self.invoke(|a, ctx| a.on_message(ctx, &t, &payload)),
                Err(e) => debug!("{}: ignoring topic {topic:?}: {e}", self.settings.client_id),
            },
        }
    }

    fn fire_due_timers(&mut self) {
        let now = Instant::now();
        while let Some(Reverse((at, id, token))) = self.timers.heap.peek().copied() {
            if at > now {
                break;
            }
            self.timers.heap.pop();
            if self.timers.cancelled.remove(&id) {
                continue;
            }
            self.invoke(|a, ctx| a.on_timer(ctx, token));
        }
    }
}

fn pump(mut connection: Connection, tx: mpsc::Sender<Inbound>, retry: Duration) {
    for ev in connection.iter() {
        let msg = match ev {
            Ok(Event::Incoming(Packet::ConnAck(ack))) => Inbound::Connected(ack.session_present),
            Ok(Event::Incoming(Packet::Publish(p))) => Inbound::Message(p.topic, p.payload),
            Ok(Event::Outgoing(rumqttc::Outgoing::Disconnect)) => return,
            Ok(_) => continue,
            Err(e) => {
                if tx.send(Inbound::Disconnected(e.to_string())).is_err() {
                    return;
                }
                thread::sleep(retry);
                continue;
            }
        };
        if tx.send(msg).is_err() {
            return;
        }
    }
}
