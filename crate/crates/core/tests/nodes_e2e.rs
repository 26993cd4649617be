use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Duration;

use bytes::Bytes;
use proptest::prelude::*;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use chunkrelay::codec::{AckKind, SenderId};
use chunkrelay::nodes::*;
use chunkrelay::transport::*;

fn id(s: &str) -> SenderId {
    SenderId::new(s).unwrap()
}

#[test]
fn sender_transition_table_is_exhaustive() {
    use AckKind::{Accepted, MissingParts, Rejected};
    use SenderStep as S;
    use TransferStatus::{Pending, Working};

    // (status, event, retries left) -> step, one row per combination
    let ev = SenderEvent::Ack;
    let t = SenderEvent::RetryTimer;
    let table: Vec<(Option<TransferStatus>, SenderEvent, bool, SenderStep)> = vec![
        (Some(Pending), ev(Accepted), true, S::SendAll),
        (Some(Pending), ev(Accepted), false, S::SendAll),
        (Some(Pending), ev(MissingParts), true, S::Violation),
        (Some(Pending), ev(MissingParts), false, S::Violation),
        (Some(Pending), ev(Rejected), true, S::Abort),
        (Some(Pending), ev(Rejected), false, S::Abort),
        (Some(Pending), ev(AckKind::Completed), true, S::Finish),
        (Some(Pending), ev(AckKind::Completed), false, S::Finish),
        (Some(Pending), t, true, S::RepublishHeader),
        (Some(Pending), t, false, S::GiveUp),
        (Some(Working), ev(Accepted), true, S::Ignore),
        (Some(Working), ev(Accepted), false, S::Ignore),
        (Some(Working), ev(MissingParts), true, S::Resend),
        (Some(Working), ev(MissingParts), false, S::Resend),
        (Some(Working), ev(Rejected), true, S::Abort),
        (Some(Working), ev(Rejected), false, S::Abort),
        (Some(Working), ev(AckKind::Completed), true, S::Finish),
        (Some(Working), ev(AckKind::Completed), false, S::Finish),
        (Some(Working), t, true, S::Ignore),
        (Some(Working), t, false, S::Ignore),
    ];
    let mut covered = BTreeSet::new();
    for &(status, event, left, expected) in &table {
        assert_eq!(sender_step(status, event, left), expected, "{status:?} {event:?} {left}");
        covered.insert(format!("{status:?}{event:?}{left}"));
    }
    let events: Vec<SenderEvent> = AckKind::ALL.iter().map(|k| ev(*k)).chain([t]).collect();
    for status in [None, Some(TransferStatus::Completed)] {
        for &e in &events {
            for left in [true, false] {
                assert_eq!(sender_step(status, e, left), S::Ignore);
                covered.insert(format!("{status:?}{e:?}{left}"));
            }
        }
    }
    assert_eq!(covered.len(), 4 * events.len() * 2);
}

fn image(seed: u64, len: usize) -> Bytes {
    let mut v = vec![0u8; len];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut v);
    Bytes::from(v)
}

fn fast_timers() -> TimerConfig {
    TimerConfig {
        header_retry: Duration::from_secs(2),
        max_header_retries: 200,
        watchdog: Duration::from_secs(3),
        gap_min: Duration::from_millis(10),
        gap_max: Duration::from_millis(200),
        ..TimerConfig::default()
    }
}

struct Net {
    sim: Simulator,
    producers: Vec<SenderId>,
    /// (producer, file name) -> bytes handed to the sender
    sent: BTreeMap<(SenderId, String), Bytes>,
}

fn node_cfg(work: &Path, name: &str, role: NodeRole, policy: RecoveryPolicy) -> NodeConfig {
    let mut cfg = NodeConfig::new(id(name), role, id("orchestrator"), work.join(name));
    cfg.policy = policy;
    cfg.chunk_size = 4096;
    cfg.timers = fast_timers();
    cfg
}

fn link(name: &str) -> LinkState {
    LinkState::new(id(name), 50_000_000, Duration::from_micros(500)).unwrap()
}

fn network(work: &Path, seed: u64, producers: usize, mode: SessionMode, policy: RecoveryPolicy) -> Net {
    let mut sim = Simulator::new(SimConfig {
        seed,
        session_mode: mode,
        record_deliveries: true,
        ..SimConfig::default()
    })
    .unwrap();
    let orch = ProtocolNode::new(node_cfg(work, "orchestrator", NodeRole::Orchestrator, policy)).unwrap();
    sim.add_node(link("orchestrator"), Box::new(orch)).unwrap();
    let ids: Vec<SenderId> = (1..=producers).map(|n| id(&format!("pc{n}"))).collect();
    for p in &ids {
        let node = ProtocolNode::new(node_cfg(work, p.as_str(), NodeRole::Producer, policy)).unwrap();
        sim.add_node(link(p.as_str()), Box::new(node)).unwrap();
    }
    Net { sim, producers: ids, sent: BTreeMap::new() }
}

impl Net {
    fn send(&mut self, images: usize, size: usize, seed: u64) {
        self.sim.run_until(SimTime::ZERO);
        for (n, p) in self.producers.clone().iter().enumerate() {
            let items: Vec<OutgoingItem> = (0..images)
                .map(|i| {
                    let bytes = image(seed ^ ((n as u64) << 32 | i as u64), size + i * 37);
                    let file_name = format!("img_{:03}.bin", i + 1);
                    self.sent.insert((p.clone(), file_name.clone()), bytes.clone());
                    OutgoingItem {
                        source: ImageSource::Inline(bytes),
                        package_name: format!("Sample {}", p.as_str().to_uppercase()),
                        file_name,
                        annotations: BTreeMap::new(),
                    }
                })
                .collect();
            self.sim
                .invoke::<ProtocolNode, _>(p, |node, ctx| node.send_package(ctx, items))
                .unwrap();
        }
    }

    fn node(&self, name: &str) -> &ProtocolNode {
        self.sim.actor::<ProtocolNode>(&id(name)).unwrap()
    }

    fn orchestrator_storage(&self) -> &Storage {
        self.node("orchestrator").receiver().unwrap().storage()
    }
}

/// Fragments of a transfer only go out after its Accepted ack came back.
fn assert_no_fragment_before_accept(node: &ProtocolNode) {
    let mut accepted = BTreeSet::new();
    for t in node.sender().trace() {
        match t.kind {
            SendTraceKind::Ack(AckKind::Accepted) => {
                accepted.insert(t.hash_file);
            }
            SendTraceKind::Fragment(i) => {
                assert!(accepted.contains(&t.hash_file), "fragment {i} of {} before Accepted", t.hash_file);
            }
            _ => {}
        }
    }
}

/// Every stored entry is unique and holds exactly what its sender sent.
fn assert_storage_faithful(net: &Net) {
    let storage = net.orchestrator_storage();
    let mut keys = BTreeSet::new();
    for e in storage.entries() {
        assert!(keys.insert((e.sender.clone(), e.hash_file)), "stored twice: {e:?}");
        let bytes = storage.read(e).unwrap();
        let original = &net.sent[&(e.sender.clone(), e.file_name.clone())];
        assert_eq!(&bytes[..], &original[..], "{e:?}");
        assert_eq!(hex::encode(Sha256::digest(&bytes)), e.hash_file.to_hex());
    }
}

#[test]
fn clean_run_restores_everything() {
    let dir = tempfile::tempdir().unwrap();
    let mut net = network(dir.path(), 3, 3, SessionMode::Clean, RecoveryPolicy::Basic);
    net.send(6, 30_000, 3);
    net.sim.run_to_quiescence(SimTime::from_secs(3_600));

    assert_eq!(net.orchestrator_storage().len(), 18);
    assert_storage_faithful(&net);
    let orch = net.node("orchestrator");
    assert_eq!(orch.receiver().unwrap().open_buffers(), 0);
    assert_eq!(orch.metrics().images_restored, 18);
    for p in &net.producers {
        let node = net.node(p.as_str());
        assert_no_fragment_before_accept(node);
        assert!(node.is_idle());
        assert!(node.sender().records().iter().all(|r| r.outcome == TransferOutcome::Completed));
        assert_eq!(node.metrics().files_sent, 6);
    }
    assert!(net.sim.stats().is_conserved());
}

#[test]
fn repeated_header_stores_once() {
    let dir = tempfile::tempdir().unwrap();
    let mut net = network(dir.path(), 5, 1, SessionMode::Clean, RecoveryPolicy::Basic);
    let img = image(5, 20_000);
    net.sent.insert((id("pc1"), "a.bin".into()), img.clone());
    net.sim.run_until(SimTime::ZERO);
    net.sim
        .invoke::<ProtocolNode, _>(&id("pc1"), |n, ctx| {
            n.begin_transfer(ctx, &id("orchestrator"), img.clone(), "Sample PC1", "a.bin", BTreeMap::new())
        })
        .unwrap()
        .unwrap();
    net.sim.run_to_quiescence(SimTime::from_secs(600));
    // a second transfer of the same image after it was stored
    net.sim
        .invoke::<ProtocolNode, _>(&id("pc1"), |n, ctx| {
            n.begin_transfer(ctx, &id("orchestrator"), img.clone(), "Sample PC1", "a.bin", BTreeMap::new())
        })
        .unwrap()
        .unwrap();
    net.sim.run_to_quiescence(SimTime::from_secs(1_200));

    assert_eq!(net.orchestrator_storage().len(), 1);
    assert_storage_faithful(&net);
    let orch = net.node("orchestrator");
    assert_eq!(orch.metrics().images_restored, 1);
    assert!(orch.metrics().duplicates_received >= 1);
    let pc1 = net.node("pc1");
    assert!(pc1.is_idle());
    assert_eq!(pc1.sender().records().last().unwrap().outcome, TransferOutcome::Completed);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Clean sessions with the orchestrator or a producer dropping out:
    /// whatever gets stored is stored once and intact, and the sender never
    /// jumps ahead of the Accepted ack.
    #[test]
    fn clean_faults_never_corrupt_storage(
        seed: u64,
        who in 0usize..3,
        down_ms in 100u64..4_000,
        dur_ms in 500u64..20_000,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let mut net = network(dir.path(), seed, 2, SessionMode::Clean, RecoveryPolicy::Basic);
        let target = ["orchestrator", "pc1", "pc2"][who];
        net.sim.apply_faults(&FaultSchedule::new(vec![
            FaultEvent { at: SimTime::from_millis(down_ms), node: id(target), action: FaultAction::Down },
            FaultEvent { at: SimTime::from_millis(down_ms + dur_ms), node: id(target), action: FaultAction::Up },
        ]).unwrap()).unwrap();
        net.send(5, 25_000, seed);
        net.sim.run_to_quiescence(SimTime::from_secs(3_600));

        assert_storage_faithful(&net);
        for p in &net.producers {
            assert_no_fragment_before_accept(net.node(p.as_str()));
        }
        prop_assert!(net.sim.stats().is_conserved());
        prop_assert_eq!(net.sim.stats().in_flight, 0);
    }

    /// Persistent sessions with the resilient policy always finish the job.
    #[test]
    fn persistent_sessions_deliver_everything(
        seed: u64,
        who in 0usize..4,
        down_ms in 100u64..4_000,
        dur_ms in 500u64..20_000,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let mut net = network(dir.path(), seed, 2, SessionMode::Persistent, RecoveryPolicy::Resilient);
        let target = ["orchestrator", "pc1", "pc2", "broker"][who];
        net.sim.apply_faults(&FaultSchedule::new(vec![
            FaultEvent { at: SimTime::from_millis(down_ms), node: id(target), action: FaultAction::Down },
            FaultEvent { at: SimTime::from_millis(down_ms + dur_ms), node: id(target), action: FaultAction::Up },
        ]).unwrap()).unwrap();
        net.send(5, 25_000, seed);
        net.sim.run_to_quiescence(SimTime::from_secs(3_600));

        prop_assert_eq!(net.orchestrator_storage().len(), 10);
        assert_storage_faithful(&net);
        let orch = net.node("orchestrator");
        prop_assert_eq!(orch.receiver().unwrap().open_buffers(), 0);
        for p in &net.producers {
            let node = net.node(p.as_str());
            assert_no_fragment_before_accept(node);
            prop_assert!(node.is_idle());
            prop_assert!(node.sender().records().iter().all(|r| r.outcome == TransferOutcome::Completed));
        }
    }
}

/// Starts a transfer with nobody listening, so it stays pending in the
/// producer's journal and temp directory.
fn stranded_transfer(work: &Path, img: &Bytes) {
    let mut sim = Simulator::new(SimConfig::default()).unwrap();
    let node = ProtocolNode::new(node_cfg(work, "pc1", NodeRole::Producer, RecoveryPolicy::Resilient)).unwrap();
    sim.add_node(link("pc1"), Box::new(node)).unwrap();
    sim.run_until(SimTime::ZERO);
    sim.invoke::<ProtocolNode, _>(&id("pc1"), |n, ctx| {
        n.begin_transfer(ctx, &id("orchestrator"), img.clone(), "Sample PC1", "a.bin", BTreeMap::new())
    })
    .unwrap()
    .unwrap();
    sim.run_until(SimTime::from_secs(1));
    let pc1 = sim.actor::<ProtocolNode>(&id("pc1")).unwrap();
    assert_eq!(pc1.sender().active_transfers(), 1);
}

fn restart(work: &Path, policy: RecoveryPolicy) -> Simulator {
    let mut sim = Simulator::new(SimConfig::default()).unwrap();
    let orch = ProtocolNode::new(node_cfg(work, "orchestrator", NodeRole::Orchestrator, policy)).unwrap();
    sim.add_node(link("orchestrator"), Box::new(orch)).unwrap();
    let pc1 = ProtocolNode::new(node_cfg(work, "pc1", NodeRole::Producer, policy)).unwrap();
    sim.add_node(link("pc1"), Box::new(pc1)).unwrap();
    sim.run_to_quiescence(SimTime::from_secs(600));
    sim
}

#[test]
fn resilient_restart_resumes_journaled_transfer() {
    let dir = tempfile::tempdir().unwrap();
    let img = image(11, 40_000);
    stranded_transfer(dir.path(), &img);

    let sim = restart(dir.path(), RecoveryPolicy::Resilient);
    let orch = sim.actor::<ProtocolNode>(&id("orchestrator")).unwrap();
    let storage = orch.receiver().unwrap().storage();
    assert_eq!(storage.len(), 1);
    let entry = storage.entries().next().unwrap();
    assert_eq!(storage.read(entry).unwrap(), img.to_vec());
    let pc1 = sim.actor::<ProtocolNode>(&id("pc1")).unwrap();
    assert!(pc1.sender().status().entries().all(|(_, s)| *s == TransferStatus::Completed));
}

#[test]
fn basic_restart_forgets_the_journal() {
    let dir = tempfile::tempdir().unwrap();
    stranded_transfer(dir.path(), &image(12, 40_000));

    let sim = restart(dir.path(), RecoveryPolicy::Basic);
    let orch = sim.actor::<ProtocolNode>(&id("orchestrator")).unwrap();
    assert!(orch.receiver().unwrap().storage().is_empty());
    let pc1 = sim.actor::<ProtocolNode>(&id("pc1")).unwrap();
    assert_eq!(pc1.sender().status().entries().count(), 0);
}
