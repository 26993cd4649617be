use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Duration;

use bytes::Bytes;
use log::{debug, warn};

use super::metrics::{ReceiveRecord, TransferOutcome};
use super::storage::{Storage, StorageEntry};
use super::{Env, TimerPurpose};
use crate::codec::{decode_fragment, encode_ack, AckMessage, HashId, ImageHeader, SenderId};
use crate::fragmentation::{AssemblyBuffer, FragmentError, IngestOutcome, Restored};
use crate::transport::{scheme, QoS, SimTime};

type Key = (SenderId, HashId);

#[derive(Debug, Clone)]
pub(crate) struct ReceiverSettings {
    pub watchdog: Duration,
    pub max_rounds: u32,
    pub spill_threshold: u64,
    pub spill_root: PathBuf,
    pub qos: QoS,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RestoredImage {
    pub at: SimTime,
    pub entry: StorageEntry,
}

#[derive(Debug)]
struct Incoming {
    buf: AssemblyBuffer,
    watchdog: Option<u64>,
    progressed: bool,
    rounds: u32,
    record: usize,
}

/// Image receiver: header admission, reassembly, storage, and the
/// missing-parts watchdog.
#[derive(Debug)]
pub struct ReceiverRole {
    settings: ReceiverSettings,
    storage: Storage,
    buffers: BTreeMap<Key, Incoming>,
    /// Abandoned transfers, and whether the sender has been told.
    discarded: BTreeMap<Key, bool>,
    records: Vec<ReceiveRecord>,
    restored: Vec<RestoredImage>,
}

impl ReceiverRole {
    pub(crate) fn new(settings: ReceiverSettings, storage: Storage) -> Self {
        Self {
            settings,
            storage,
            buffers: BTreeMap::new(),
            discarded: BTreeMap::new(),
            records: Vec::new(),
            restored: Vec::new(),
        }
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    pub fn records(&self) -> &[ReceiveRecord] {
        &self.records
    }

    pub fn restored(&self) -> &[RestoredImage] {
        &self.restored
    }

    pub fn open_buffers(&self) -> usize {
        self.buffers.len()
    }

    pub fn is_assembling(&self, sender: &SenderId, hash: &HashId) -> bool {
        self.buffers.contains_key(&(sender.clone(), *hash))
    }

    fn reply(&self, env: &mut Env<'_>, to: &SenderId, ack: &AckMessage) -> bool {
        let payload = Bytes::from(encode_ack(ack));
        let len = payload.len() as u64;
        let ok = env
            .ctx
            .publish(&scheme::hash_sender(to), payload, self.settings.qos)
            .is_ok();
        if ok {
            env.metrics.bytes_on_wire += len;
        }
        ok
    }

    pub(crate) fn on_header(&mut self, env: &mut Env<'_>, header: ImageHeader) {
        let key = (header.sender.clone(), header.hash_file);
        let hash = header.hash_file;
        env.metrics.messages_received += 1;
        if self.storage.contains(&key.0, &hash) {
            env.metrics.duplicates_received += 1;
            self.reply(env, &key.0, &AckMessage::completed(hash));
            return;
        }
        if self.buffers.contains_key(&key) {
            env.metrics.duplicates_received += 1;
            self.reply(env, &key.0, &AckMessage::accepted(hash));
            return;
        }
        if let Err(e) = self.storage.admit(&header) {
            debug!("rejecting {} from {}: {e}", hash.short(), key.0);
            env.metrics.rejections_sent += 1;
            self.reply(env, &key.0, &AckMessage::rejected(hash));
            return;
        }
        self.discarded.remove(&key);
        env.metrics.files_received += 1;
        self.records.push(ReceiveRecord {
            hash_file: hash,
            sender: key.0.clone(),
            start: env.ctx.now(),
            end: None,
            missing_rounds: 0,
            outcome: TransferOutcome::InProgress,
        });
        let watchdog = self.arm_watchdog(env, &key);
        self.buffers.insert(
            key.clone(),
            Incoming {
                buf: AssemblyBuffer::new(header),
                watchdog: Some(watchdog),
                progressed: false,
                rounds: 0,
                record: self.records.len() - 1,
            },
        );
        self.reply(env, &key.0, &AckMessage::accepted(hash));
    }

    fn arm_watchdog(&self, env: &mut Env<'_>, key: &Key) -> u64 {
        env.timers.arm(
            env.ctx,
            self.settings.watchdog,
            TimerPurpose::Watchdog(key.0.clone(), key.1),
        )
    }

    pub(crate) fn on_fragment(&mut self, env: &mut Env<'_>, from: &SenderId, wire: &Bytes) {
        env.metrics.messages_received += 1;
        let frag = match decode_fragment(wire) {
            Ok(f) => f,
            Err(e) => {
                debug!("undecodable fragment from {from}: {e}");
                env.metrics.decode_errors += 1;
                return;
            }
        };
        let key = (from.clone(), frag.hash_file);
        let Some(inc) = self.buffers.get_mut(&key) else {
            if let Some(told) = self.discarded.get_mut(&key) {
                if !*told {
                    *told = true;
                    env.metrics.rejections_sent += 1;
                    self.reply(env, from, &AckMessage::rejected(frag.hash_file));
                }
            } else if self.storage.contains(from, &frag.hash_file) {
                env.metrics.duplicates_received += 1;
            } else {
                env.metrics.unknown_fragments += 1;
            }
            return;
        };
        match inc.buf.ingest(&frag) {
            Ok(IngestOutcome::New) => {
                env.metrics.fragments_received += 1;
                inc.progressed = true;
            }
            Ok(IngestOutcome::Duplicate) => {
                env.metrics.duplicates_received += 1;
                return;
            }
            Ok(IngestOutcome::Mismatch) => {
                env.metrics.mismatched_fragments += 1;
                return;
            }
            Err(e) => {
                debug!("fragment from {from} does not fit: {e}");
                env.metrics.mismatched_fragments += 1;
                return;
            }
        }
        if inc.buf.is_complete() {
            self.complete(env, key);
        } else {
            self.maybe_spill();
        }
    }

    fn complete(&mut self, env: &mut Env<'_>, key: Key) {
        let mut inc = self.buffers.remove(&key).expect("caller checked");
        if let Some(token) = inc.watchdog.take() {
            env.timers.cancel(env.ctx, token);
        }
        let hash = key.1;
        match inc.buf.restore() {
            Ok(Restored::Complete(bytes)) => match self.storage.store(inc.buf.header(), &bytes) {
                Ok((entry, fresh)) => {
                    let now = env.ctx.now();
                    if fresh {
                        env.metrics.images_restored += 1;
                        self.restored.push(RestoredImage { at: now, entry });
                    }
                    env.metrics.transfers_completed += 1;
                    let rec = &mut self.records[inc.record];
                    rec.end = Some(now);
                    rec.outcome = TransferOutcome::Completed;
                    self.reply(env, &key.0, &AckMessage::completed(hash));
                }
                Err(e) => {
                    warn!("cannot store {} from {}: {e}", hash.short(), key.0);
                    env.metrics.rejections_sent += 1;
                    env.metrics.transfers_failed += 1;
                    let rec = &mut self.records[inc.record];
                    rec.end = Some(env.ctx.now());
                    rec.outcome = TransferOutcome::Rejected;
                    self.reply(env, &key.0, &AckMessage::rejected(hash));
                }
            },
            Ok(Restored::Missing(_)) => {
                inc.watchdog = Some(self.arm_watchdog(env, &key));
                self.buffers.insert(key, inc);
            }
            Err(e) => {
                if !matches!(e, FragmentError::HashMismatch { .. }) {
                    warn!("restoring {} from {} failed: {e}", hash.short(), key.0);
                }
                // start over and ask for everything
                inc.buf.reset();
                let all: Vec<u32> = (0..inc.buf.header().total_parts).collect();
                let ack = AckMessage::missing_parts(hash, all).expect("non-empty");
                if self.reply(env, &key.0, &ack) {
                    env.metrics.retransmission_requests += 1;
                }
                inc.watchdog = Some(self.arm_watchdog(env, &key));
                self.buffers.insert(key, inc);
            }
        }
    }

    pub(crate) fn on_watchdog(&mut self, env: &mut Env<'_>, sender: SenderId, hash: HashId) {
        let key = (sender, hash);
        let max_rounds = self.settings.max_rounds;
        let Some(inc) = self.buffers.get_mut(&key) else {
            return;
        };
        inc.watchdog = None;
        if inc.progressed {
            inc.progressed = false;
        } else if inc.rounds >= max_rounds {
            let inc = self.buffers.remove(&key).expect("present");
            debug!("abandoning {} from {}", hash.short(), key.0);
            env.metrics.transfers_failed += 1;
            let rec = &mut self.records[inc.record];
            rec.end = Some(env.ctx.now());
            rec.outcome = TransferOutcome::Abandoned;
            self.discarded.insert(key, false);
            return;
        } else {
            let ack = AckMessage::missing_parts(hash, inc.buf.missing()).expect("incomplete");
            // a round only counts if the request actually went out
            if self.reply(env, &key.0, &ack) {
                let inc = self.buffers.get_mut(&key).expect("present");
                inc.rounds += 1;
                let rec = inc.record;
                self.records[rec].missing_rounds += 1;
                env.metrics.retransmission_requests += 1;
            }
        }
        let token = self.arm_watchdog(env, &key);
        self.buffers.get_mut(&key).expect("present").watchdog = Some(token);
    }

    fn maybe_spill(&mut self) {
        let total: u64 = self.buffers.values().map(|i| i.buf.memory_bytes()).sum();
        if total <= self.settings.spill_threshold {
            return;
        }
        let mut order: Vec<(u64, Key)> = self
            .buffers
            .iter()
            .map(|(k, i)| (i.buf.memory_bytes(), k.clone()))
            .collect();
        order.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        let mut remaining = total;
        for (_, key) in order {
            if remaining <= self.settings.spill_threshold / 2 {
                break;
            }
            let dir = self
                .settings
                .spill_root
                .join(key.0.as_str())
                .join(key.1.to_hex());
            let inc = self.buffers.get_mut(&key).expect("present");
            match inc.buf.spill(&dir) {
                Ok(freed) => remaining -= freed,
                Err(e) => warn!("cannot spill {}: {e}", key.1.short()),
            }
        }
    }
}
