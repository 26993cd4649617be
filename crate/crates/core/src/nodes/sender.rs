use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::fs;
use std::io;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use bytes::{Bytes, BytesMut};
use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::Rng;

use super::metrics::{SendRecord, TransferOutcome};
use super::status::{StatusManager, TransferStatus};
use super::{Env, NodeError, TimerPurpose};
use crate::codec::{
    decode_fragment, decode_header, encode_fragment, encode_header, AckKind, AckMessage, Fragment,
    HashId, ImageHeader, SenderId, FRAGMENT_HEADER_LEN,
};
use crate::fragmentation::{compute_hash_file, split, TransferMeta};
use crate::transport::{scheme, QoS, SimTime};

const HEADER_FILE: &str = "header.json";
const FRAGMENTS_FILE: &str = "fragments.bin";
const RECEIVER_FILE: &str = "receiver";

/// Where the bytes of a queued image come from. Loaded only when the
/// transfer starts.
#[derive(Clone)]
pub enum ImageSource {
    Inline(Bytes),
    File(PathBuf),
    Lazy(Arc<dyn Fn() -> io::Result<Bytes> + Send + Sync>),
}

impl ImageSource {
    pub fn load(&self) -> io::Result<Bytes> {
        match self {
            ImageSource::Inline(b) => Ok(b.clone()),
            ImageSource::File(p) => fs::read(p).map(Bytes::from),
            ImageSource::Lazy(f) => f(),
        }
    }
}

impl fmt::Debug for ImageSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageSource::Inline(b) => write!(f, "Inline({} bytes)", b.len()),
            ImageSource::File(p) => write!(f, "File({})", p.display()),
            ImageSource::Lazy(_) => f.write_str("Lazy"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OutgoingItem {
    pub source: ImageSource,
    pub package_name: String,
    pub file_name: String,
    pub annotations: BTreeMap<String, String>,
}

#[derive(Debug)]
pub struct OutgoingTransfer {
    pub header: ImageHeader,
    pub fragments: Vec<Fragment>,
    pub receiver: SenderId,
    pub status: TransferStatus,
    pub header_retries: u32,
    pub temp_dir: PathBuf,
    retry_timer: Option<u64>,
    record: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SenderEvent {
    Ack(AckKind),
    RetryTimer,
}

/// What the sender does in response to an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SenderStep {
    /// Pending→Working, publish every fragment.
    SendAll,
    /// Republish the fragments the receiver listed.
    Resend,
    /// →Completed, clean up temp files.
    Finish,
    /// Receiver refused; keep temp files, mark failed.
    Abort,
    RepublishHeader,
    /// Header retries exhausted.
    GiveUp,
    Ignore,
    /// Input that cannot happen in a well-behaved exchange.
    Violation,
}

/// The sender transition table. `status` is `None` once the transfer is no
/// longer active.
pub fn sender_step(
    status: Option<TransferStatus>,
    event: SenderEvent,
    retries_left: bool,
) -> SenderStep {
    use SenderEvent::{Ack, RetryTimer};
    use TransferStatus::{Pending, Working};
    match (status, event) {
        (None | Some(TransferStatus::Completed), _) => SenderStep::Ignore,
        (Some(Pending), Ack(AckKind::Accepted)) => SenderStep::SendAll,
        (Some(Pending), Ack(AckKind::MissingParts)) => SenderStep::Violation,
        (Some(Working), Ack(AckKind::Accepted)) => SenderStep::Ignore,
        (Some(Working), Ack(AckKind::MissingParts)) => SenderStep::Resend,
        (Some(_), Ack(AckKind::Rejected)) => SenderStep::Abort,
        (Some(_), Ack(AckKind::Completed)) => SenderStep::Finish,
        (Some(Pending), RetryTimer) if retries_left => SenderStep::RepublishHeader,
        (Some(Pending), RetryTimer) => SenderStep::GiveUp,
        (Some(Working), RetryTimer) => SenderStep::Ignore,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendTraceKind {
    Header,
    Fragment(u32),
    Ack(AckKind),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SendTrace {
    pub at: SimTime,
    pub hash_file: HashId,
    pub kind: SendTraceKind,
}

#[derive(Debug, Clone)]
pub(crate) struct SenderSettings {
    pub chunk_size: u32,
    pub header_retry: Duration,
    pub max_header_retries: u32,
    pub gap_min: Duration,
    pub gap_max: Duration,
    pub temp_root: PathBuf,
    pub persist_temp: bool,
    pub qos: QoS,
}

#[derive(Debug, Default)]
struct DestQueue {
    items: VecDeque<(OutgoingItem, Duration)>,
    active: Option<HashId>,
    last_finish: Option<SimTime>,
    waiting: Option<u64>,
}

/// Image sender: splitting, header handshake, fragment streaming, and
/// paced per-destination queues.
#[derive(Debug)]
pub struct SenderRole {
    id: SenderId,
    settings: SenderSettings,
    status: StatusManager,
    outgoing: BTreeMap<HashId, OutgoingTransfer>,
    queues: BTreeMap<SenderId, DestQueue>,
    records: Vec<SendRecord>,
    trace: Vec<SendTrace>,
}

impl SenderRole {
    pub(crate) fn new(id: SenderId, settings: SenderSettings, status: StatusManager) -> Self {
        Self {
            id,
            settings,
            status,
            outgoing: BTreeMap::new(),
            queues: BTreeMap::new(),
            records: Vec::new(),
            trace: Vec::new(),
        }
    }

    pub fn status(&self) -> &StatusManager {
        &self.status
    }

    pub fn transfer(&self, hash: &HashId) -> Option<&OutgoingTransfer> {
        self.outgoing.get(hash)
    }

    pub fn active_transfers(&self) -> usize {
        self.outgoing.len()
    }

    pub fn queued_items(&self) -> usize {
        self.queues.values().map(|q| q.items.len()).sum()
    }

    pub fn is_idle(&self) -> bool {
        self.outgoing.is_empty() && self.queued_items() == 0
    }

    pub fn records(&self) -> &[SendRecord] {
        &self.records
    }

    pub fn trace(&self) -> &[SendTrace] {
        &self.trace
    }

    fn note(&mut self, at: SimTime, hash_file: HashId, kind: SendTraceKind) {
        self.trace.push(SendTrace { at, hash_file, kind });
    }

    pub(crate) fn begin_transfer(
        &mut self,
        env: &mut Env<'_>,
        receiver: &SenderId,
        image: &Bytes,
        item: &OutgoingItem,
    ) -> Result<HashId, NodeError> {
        let hash = compute_hash_file(image).map_err(|_| NodeError::EmptyInput)?;
        if self.outgoing.contains_key(&hash) {
            return Err(NodeError::DuplicateActiveTransfer(hash));
        }
        let meta = TransferMeta {
            sender: self.id.clone(),
            package_name: item.package_name.clone(),
            file_name: item.file_name.clone(),
            annotations: item.annotations.clone(),
        };
        let (header, fragments) = split(image, self.settings.chunk_size, meta)?;
        let temp_dir = self.settings.temp_root.join(hash.to_hex());
        if self.settings.persist_temp {
            persist(&temp_dir, receiver, &header, &fragments)?;
        }
        self.status.begin(hash, env.ctx.wall_time())?;
        Ok(self.activate(env, receiver.clone(), header, fragments, temp_dir))
    }

    fn activate(
        &mut self,
        env: &mut Env<'_>,
        receiver: SenderId,
        header: ImageHeader,
        fragments: Vec<Fragment>,
        temp_dir: PathBuf,
    ) -> HashId {
        let hash = header.hash_file;
        self.records.push(SendRecord {
            hash_file: hash,
            receiver: receiver.clone(),
            package_name: header.package_name.clone(),
            file_name: header.file_name.clone(),
            start: env.ctx.now(),
            end: None,
            retries: 0,
            outcome: TransferOutcome::InProgress,
        });
        self.outgoing.insert(
            hash,
            OutgoingTransfer {
                header,
                fragments,
                receiver,
                status: TransferStatus::Pending,
                header_retries: 0,
                temp_dir,
                retry_timer: None,
                record: self.records.len() - 1,
            },
        );
        env.metrics.files_sent += 1;
        self.publish_header(env, hash);
        self.arm_retry(env, hash);
        hash
    }

    fn publish_header(&mut self, env: &mut Env<'_>, hash: HashId) -> bool {
        let t = &self.outgoing[&hash];
        let payload = Bytes::from(encode_header(&t.header));
        let len = payload.len() as u64;
        let topic = scheme::send_header(&t.receiver);
        if env.ctx.publish(&topic, payload, self.settings.qos).is_err() {
            return false;
        }
        env.metrics.messages_sent += 1;
        env.metrics.bytes_on_wire += len;
        let now = env.ctx.now();
        self.note(now, hash, SendTraceKind::Header);
        true
    }

    fn arm_retry(&mut self, env: &mut Env<'_>, hash: HashId) {
        let token = env.timers.arm(
            env.ctx,
            self.settings.header_retry,
            TimerPurpose::HeaderRetry(hash),
        );
        if let Some(t) = self.outgoing.get_mut(&hash) {
            t.retry_timer = Some(token);
        }
    }

    fn publish_fragments(&mut self, env: &mut Env<'_>, hash: HashId, indices: &[u32], resend: bool) {
        let t = &self.outgoing[&hash];
        let topic = scheme::hash_sender_orq(&t.receiver, &self.id);
        let mut sent = Vec::with_capacity(indices.len());
        for &i in indices {
            let f = &t.fragments[i as usize];
            let wire = encode_fragment(f);
            let len = wire.len() as u64;
            if env.ctx.publish(&topic, wire, self.settings.qos).is_err() {
                // the receiver's watchdog will ask for the rest
                break;
            }
            env.metrics.messages_sent += 1;
            env.metrics.bytes_on_wire += len;
            if resend {
                env.metrics.fragments_resent += 1;
            } else {
                env.metrics.fragments_sent += 1;
            }
            sent.push(i);
        }
        let now = env.ctx.now();
        for i in sent {
            self.note(now, hash, SendTraceKind::Fragment(i));
        }
    }

    fn set_status(&mut self, env: &mut Env<'_>, hash: HashId, to: TransferStatus) {
        if let Err(e) = self.status.set(hash, to, env.ctx.wall_time()) {
            warn!("{}: {e}", self.id);
            env.metrics.protocol_violations += 1;
        }
        if let Some(t) = self.outgoing.get_mut(&hash) {
            t.status = to;
        }
    }

    pub(crate) fn on_ack(&mut self, env: &mut Env<'_>, ack: &AckMessage) {
        let hash = ack.hash_file;
        let status = self.outgoing.get(&hash).map(|t| t.status);
        if status.is_some() {
            let now = env.ctx.now();
            self.note(now, hash, SendTraceKind::Ack(ack.kind));
        }
        match sender_step(status, SenderEvent::Ack(ack.kind), true) {
            SenderStep::Ignore => {
                if status.is_none() {
                    env.metrics.unknown_acks += 1;
                }
            }
            SenderStep::Violation => env.metrics.protocol_violations += 1,
            SenderStep::SendAll => {
                self.cancel_retry(env, hash);
                self.set_status(env, hash, TransferStatus::Working);
                let all: Vec<u32> = (0..self.outgoing[&hash].header.total_parts).collect();
                self.publish_fragments(env, hash, &all, false);
            }
            SenderStep::Resend => {
                let total = self.outgoing[&hash].header.total_parts;
                if ack.missing.iter().any(|&i| i >= total) {
                    env.metrics.protocol_violations += 1;
                    return;
                }
                self.publish_fragments(env, hash, &ack.missing, true);
            }
            SenderStep::Finish => {
                self.cancel_retry(env, hash);
                if status == Some(TransferStatus::Pending) {
                    self.set_status(env, hash, TransferStatus::Working);
                }
                self.set_status(env, hash, TransferStatus::Completed);
                let dir = self.outgoing[&hash].temp_dir.clone();
                if dir.exists() {
                    if let Err(e) = fs::remove_dir_all(&dir) {
                        warn!("{}: cannot remove {}: {e}", self.id, dir.display());
                    }
                }
                env.metrics.transfers_completed += 1;
                self.finish(env, hash, TransferOutcome::Completed);
            }
            SenderStep::Abort => {
                self.cancel_retry(env, hash);
                env.metrics.transfers_failed += 1;
                self.finish(env, hash, TransferOutcome::Rejected);
            }
            SenderStep::RepublishHeader | SenderStep::GiveUp => unreachable!("timer-only steps"),
        }
    }

    fn cancel_retry(&mut self, env: &mut Env<'_>, hash: HashId) {
        if let Some(token) = self.outgoing.get_mut(&hash).and_then(|t| t.retry_timer.take()) {
            env.timers.cancel(env.ctx, token);
        }
    }

    pub(crate) fn on_retry_timer(&mut self, env: &mut Env<'_>, hash: HashId) {
        let Some(t) = self.outgoing.get_mut(&hash) else {
            return;
        };
        t.retry_timer = None;
        let retries_left = t.header_retries < self.settings.max_header_retries;
        match sender_step(Some(t.status), SenderEvent::RetryTimer, retries_left) {
            SenderStep::RepublishHeader => {
                // a resend only counts once it actually leaves the node
                if self.publish_header(env, hash) {
                    let t = self.outgoing.get_mut(&hash).expect("present");
                    t.header_retries += 1;
                    let rec = t.record;
                    self.records[rec].retries += 1;
                    env.metrics.header_retries += 1;
                    self.set_status(env, hash, TransferStatus::Pending);
                }
                self.arm_retry(env, hash);
            }
            SenderStep::GiveUp => {
                debug!("{}: giving up on {}", self.id, hash.short());
                env.metrics.transfers_failed += 1;
                self.finish(env, hash, TransferOutcome::TimedOut);
            }
            _ => {}
        }
    }

    fn finish(&mut self, env: &mut Env<'_>, hash: HashId, outcome: TransferOutcome) {
        let Some(t) = self.outgoing.remove(&hash) else {
            return;
        };
        let now = env.ctx.now();
        let rec = &mut self.records[t.record];
        rec.end = Some(now);
        rec.outcome = outcome;
        if let Some(q) = self.queues.get_mut(&t.receiver) {
            if q.active == Some(hash) {
                q.active = None;
                q.last_finish = Some(now);
            }
        }
        let dests: Vec<SenderId> = self.queues.keys().cloned().collect();
        for d in dests {
            self.pump(env, &d);
        }
    }

    /// Appends items to the queue toward `receiver`. Consecutive transfers
    /// are separated by random gaps drawn from the node's stream.
    pub(crate) fn enqueue(&mut self, env: &mut Env<'_>, receiver: &SenderId, items: Vec<OutgoingItem>) {
        let gaps = stratified_gaps(
            env.ctx.rng(),
            items.len(),
            self.settings.gap_min,
            self.settings.gap_max,
        );
        let q = self.queues.entry(receiver.clone()).or_default();
        q.items.extend(items.into_iter().zip(gaps));
        self.pump(env, receiver);
    }

    pub(crate) fn on_queue_timer(&mut self, env: &mut Env<'_>, receiver: &SenderId) {
        if let Some(q) = self.queues.get_mut(receiver) {
            q.waiting = None;
        }
        self.pump(env, receiver);
    }

    fn pump(&mut self, env: &mut Env<'_>, receiver: &SenderId) {
        loop {
            let now = env.ctx.now();
            let Some(q) = self.queues.get_mut(receiver) else {
                return;
            };
            if q.active.is_some() || q.waiting.is_some() {
                return;
            }
            let Some((_, gap)) = q.items.front() else {
                return;
            };
            let ready = q.last_finish.map_or(now, |f| f + *gap);
            if ready > now {
                let token = env.timers.arm(
                    env.ctx,
                    ready - now,
                    TimerPurpose::QueueStart(receiver.clone()),
                );
                self.queues.get_mut(receiver).expect("present").waiting = Some(token);
                return;
            }
            let (mut item, gap) = q.items.pop_front().expect("front exists");
            let image = match item.source.load() {
                Ok(b) => b,
                Err(e) => {
                    warn!("{}: cannot load {}: {e}", self.id, item.file_name);
                    env.metrics.transfers_failed += 1;
                    continue;
                }
            };
            match self.begin_transfer(env, receiver, &image, &item) {
                Ok(hash) => {
                    self.queues.get_mut(receiver).expect("present").active = Some(hash);
                    return;
                }
                Err(NodeError::DuplicateActiveTransfer(_)) => {
                    // wait for the other copy to finish, then try again
                    item.source = ImageSource::Inline(image);
                    self.queues
                        .get_mut(receiver)
                        .expect("present")
                        .items
                        .push_front((item, gap));
                    return;
                }
                Err(e) => {
                    warn!("{}: cannot send {}: {e}", self.id, item.file_name);
                    env.metrics.transfers_failed += 1;
                }
            }
        }
    }

    /// Restarts transfers the journal left unfinished, from their temp dirs.
    pub(crate) fn recover(&mut self, env: &mut Env<'_>) -> Result<usize, NodeError> {
        let unfinished: Vec<HashId> = self
            .status
            .entries()
            .filter(|(h, s)| **s != TransferStatus::Completed && !self.outgoing.contains_key(h))
            .map(|(h, _)| *h)
            .collect();
        let mut resumed = 0;
        for hash in unfinished {
            let dir = self.settings.temp_root.join(hash.to_hex());
            let Some((receiver, header, fragments)) = load_persisted(&dir)? else {
                continue;
            };
            if header.hash_file != hash {
                continue;
            }
            self.status.begin(hash, env.ctx.wall_time())?;
            self.activate(env, receiver, header, fragments, dir);
            resumed += 1;
        }
        Ok(resumed)
    }
}

/// `n` gaps in `[min, max]`, each marginally uniform, stratified so that
/// their sum varies little between runs.
fn stratified_gaps(rng: &mut impl Rng, n: usize, min: Duration, max: Duration) -> Vec<Duration> {
    let mut strata: Vec<usize> = (0..n).collect();
    strata.shuffle(rng);
    let span = (max - min).as_secs_f64();
    strata
        .into_iter()
        .map(|k| {
            let u: f64 = rng.random();
            min + Duration::from_secs_f64(span * (k as f64 + u) / n as f64)
        })
        .collect()
}

fn persist(
    dir: &PathBuf,
    receiver: &SenderId,
    header: &ImageHeader,
    fragments: &[Fragment],
) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(HEADER_FILE), encode_header(header))?;
    fs::write(dir.join(RECEIVER_FILE), receiver.as_str())?;
    let mut all = BytesMut::new();
    for f in fragments {
        all.extend_from_slice(&encode_fragment(f));
    }
    fs::write(dir.join(FRAGMENTS_FILE), all)
}

type Persisted = (SenderId, ImageHeader, Vec<Fragment>);

fn load_persisted(dir: &std::path::Path) -> Result<Option<Persisted>, NodeError> {
    let paths = [HEADER_FILE, RECEIVER_FILE, FRAGMENTS_FILE].map(|f| dir.join(f));
    if !paths.iter().all(|p| p.exists()) {
        return Ok(None);
    }
    let header = decode_header(&fs::read(&paths[0])?).map_err(crate::fragmentation::FragmentError::from)?;
    let receiver = SenderId::new(fs::read_to_string(&paths[1])?.trim())
        .map_err(crate::fragmentation::FragmentError::from)?;
    let blob = Bytes::from(fs::read(&paths[2])?);
    let mut fragments = Vec::with_capacity(header.total_parts as usize);
    let mut at = 0;
    for i in 0..header.total_parts {
        let len = FRAGMENT_HEADER_LEN + header.part_len(i).expect("in range") as usize;
        if at + len > blob.len() {
            return Ok(None);
        }
        let f = decode_fragment(&blob.slice(at..at + len)).map_err(crate::fragmentation::FragmentError::from)?;
        fragments.push(f);
        at += len;
    }
    Ok(Some((receiver, header, fragments)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn gaps_are_in_range_and_stratified() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let min = Duration::from_millis(100);
        let max = Duration::from_secs(2);
        let gaps = stratified_gaps(&mut rng, 50, min, max);
        assert_eq!(gaps.len(), 50);
        assert!(gaps.iter().all(|g| *g >= min && *g <= max));
        let mut sorted = gaps.clone();
        sorted.sort();
        // exactly one gap per stratum
        for (k, g) in sorted.iter().enumerate() {
            let lo = 0.1 + 1.9 * k as f64 / 50.0;
            let hi = 0.1 + 1.9 * (k + 1) as f64 / 50.0;
            let s = g.as_secs_f64();
            assert!(s >= lo - 1e-9 && s <= hi + 1e-9, "{k}: {s}");
        }
        let total: f64 = gaps.iter().map(|g| g.as_secs_f64()).sum();
        assert!((total - 50.0 * 1.05).abs() < 1.0);
    }

    #[test]
    fn no_gaps_for_empty_batch() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        assert!(stratified_gaps(&mut rng, 0, Duration::ZERO, Duration::from_secs(1)).is_empty());
    }
}
