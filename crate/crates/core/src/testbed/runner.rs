use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use log::info;

use super::config::{ContentMode, ScenarioConfig, BROKER_ID, ORCHESTRATOR_ID};
use super::dataset::{dataset_files, image_file_name, read_manifest, synth_image, MANIFEST_FILE};
use super::report::{MetricsReport, RequestReport, TransferRow, TransportSummary};
use super::TestbedError;
use crate::codec::{HashId, SenderId};
use crate::fragmentation::sha256;
use crate::nodes::{
    ImageSource, MetricsCounters, NodeConfig, NodeRole, OutgoingItem, ProtocolNode, TransferOutcome,
};
use crate::transport::scheme::{self, TopicKind};
use crate::transport::{FaultAction, LinkState, SimConfig, SimTime, Simulator};

fn mbps(v: f64) -> u64 {
    (v * 1e6).round().max(1.0) as u64
}

fn sid(s: &str) -> SenderId {
    SenderId::new(s).expect("valid id")
}

/// Runs a scenario in a scratch directory that is removed afterwards.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<MetricsReport, TestbedError> {
    let dir = tempfile::tempdir()?;
    run_scenario_in(cfg, dir.path())
}

/// Runs a scenario with node working directories under `work`.
///
/// Returns [`TestbedError::VerificationFailure`] when a stored image does
/// not match its source or the declared expectation is not met; the error
/// still carries the full report.
pub fn run_scenario_in(cfg: &ScenarioConfig, work: &Path) -> Result<MetricsReport, TestbedError> {
    cfg.validate()?;
    let mut sim = Simulator::new(SimConfig {
        seed: cfg.seed,
        session_mode: cfg.session_mode,
        broker_id: sid(BROKER_ID),
        broker_capacity_bps: mbps(cfg.network.broker_mbps),
        reconnect_delay: Duration::from_secs_f64(cfg.network.reconnect_delay_s),
        record_deliveries: true,
        ..SimConfig::default()
    })?;
    let orch = sid(ORCHESTRATOR_ID);
    let producers = cfg.producer_ids();
    let latency = Duration::from_secs_f64(cfg.network.latency_ms / 1000.0);
    let link_bps = mbps(cfg.network.link_mbps);

    for id in std::iter::once(&orch).chain(&producers) {
        let role = if *id == orch {
            NodeRole::Orchestrator
        } else if cfg.is_hybrid(id) {
            NodeRole::Hybrid
        } else {
            NodeRole::Producer
        };
        let mut nc = NodeConfig::new(id.clone(), role, orch.clone(), work.join(id.as_str()));
        nc.policy = cfg.recovery_policy();
        nc.chunk_size = cfg.chunk_size;
        nc.timers = cfg.timers.clone();
        nc.persist_temp = cfg.persist_temp;
        let node = ProtocolNode::new(nc)?;
        sim.add_node(LinkState::new(id.clone(), link_bps, latency)?, Box::new(node))?;
    }
    let faults = cfg.fault_schedule()?;
    sim.apply_faults(&faults)?;
    for t in &cfg.traffic {
        sim.add_background_traffic(cfg.traffic_profile(t)?)?;
    }

    // Let every client connect before handing out work.
    sim.run_until(SimTime::ZERO);
    for (n, id) in (1..).zip(&producers) {
        let items = package_items(cfg, n)?;
        sim.invoke::<ProtocolNode, _>(id, |node, ctx| node.send_package(ctx, items))?;
    }
    let horizon = SimTime::from_secs_f64(cfg.max_time_s);
    sim.run_to_quiescence(horizon);
    info!("{}: upload phase quiet at {}", cfg.id, sim.now());

    if !cfg.hybrid_requests.is_empty() {
        for r in &cfg.hybrid_requests {
            let requester = sid(&r.requester);
            sim.invoke::<ProtocolNode, _>(&requester, |node, ctx| node.request(ctx, &r.selector))??;
        }
        sim.run_to_quiescence(horizon);
        info!("{}: request phase quiet at {}", cfg.id, sim.now());
    }

    let report = collect(cfg, &sim, &orch, &producers, &faults)?;
    let mut failures = report.verification_failures.clone();
    if let Some(exp) = cfg.expect.restored {
        use super::config::RestoredExpectation::*;
        let full = report.restored_at_orchestrator == report.expected_at_orchestrator
            && report.requests.iter().all(|r| r.matches.is_some_and(|m| r.restored >= m));
        match (exp, full) {
            (Full, false) => failures.push(format!(
                "expected every image restored, got {} of {}",
                report.restored_at_orchestrator, report.expected_at_orchestrator
            )),
            (Partial, true) => failures.push("expected a partial restore, got all images".into()),
            _ => {}
        }
    }
    if failures.is_empty() {
        Ok(report)
    } else {
        Err(TestbedError::VerificationFailure {
            failures,
            report: Box::new(report),
        })
    }
}

fn package_items(cfg: &ScenarioConfig, n: u32) -> Result<Vec<OutgoingItem>, TestbedError> {
    let package_name = cfg.package.name_for(n);
    if let Some(dir) = &cfg.package.dataset_dir {
        return Ok(dataset_files(dir)?
            .into_iter()
            .map(|p| OutgoingItem {
                package_name: package_name.clone(),
                file_name: p.file_name().expect("file").to_string_lossy().into_owned(),
                source: ImageSource::File(p),
                annotations: BTreeMap::new(),
            })
            .collect());
    }
    let label: Arc<str> = match cfg.package.content {
        ContentMode::PerProducer => format!("pc{n}").into(),
        ContentMode::Shared => "shared".into(),
    };
    let (seed, size) = (cfg.seed, cfg.package.image_size.0);
    Ok((1..=cfg.package.image_count)
        .map(|i| {
            let label = label.clone();
            OutgoingItem {
                source: ImageSource::Lazy(Arc::new(move || Ok(synth_image(seed, &label, i, size)))),
                package_name: package_name.clone(),
                file_name: image_file_name(i),
                annotations: BTreeMap::new(),
            }
        })
        .collect())
}

fn secs(t: SimTime) -> f64 {
    t.as_secs_f64()
}

fn collect(
    cfg: &ScenarioConfig,
    sim: &Simulator,
    orch: &SenderId,
    producers: &[SenderId],
    faults: &crate::transport::FaultSchedule,
) -> Result<MetricsReport, TestbedError> {
    let node = |id: &SenderId| {
        sim.actor::<ProtocolNode>(id)
            .expect("every scenario node is a protocol node")
    };
    let all: Vec<&SenderId> = std::iter::once(orch).chain(producers).collect();

    let mut nodes = BTreeMap::new();
    let mut totals = MetricsCounters::default();
    let (mut open_buffers, mut unfinished) = (0u64, 0u64);
    for id in &all {
        let n = node(id);
        nodes.insert(id.to_string(), *n.metrics());
        totals += *n.metrics();
        open_buffers += n.receiver().map_or(0, |r| r.open_buffers() as u64);
        unfinished += n.sender().active_transfers() as u64;
    }

    let o = node(orch);
    let orx = o.receiver().expect("orchestrator receives");

    // Upload phase makespans.
    let mut producer_makespans_s = BTreeMap::new();
    let (mut first_start, mut last_end): (Option<SimTime>, Option<SimTime>) = (None, None);
    for p in producers {
        let start = node(p)
            .sender()
            .records()
            .iter()
            .filter(|r| &r.receiver == orch)
            .map(|r| r.start)
            .min();
        let end = orx
            .restored()
            .iter()
            .filter(|img| &img.entry.sender == p)
            .map(|img| img.at)
            .max();
        first_start = first_start.min(start).or(first_start).or(start);
        last_end = last_end.max(end);
        producer_makespans_s.insert(
            p.to_string(),
            start.zip(end).map(|(s, e)| secs(SimTime::from_nanos(e.since(s).as_nanos() as u64))),
        );
    }
    let makespan_s = match (first_start, last_end) {
        (Some(s), Some(e)) => e.since(s).as_secs_f64(),
        _ => 0.0,
    };

    // Request phase.
    let mut requests = Vec::new();
    for spec in &cfg.hybrid_requests {
        let requester = sid(&spec.requester);
        let h = node(&requester);
        for r in h.requests().iter().filter(|r| r.selector == spec.selector) {
            let start = o
                .sender()
                .records()
                .iter()
                .filter(|s| s.receiver == requester && s.start >= r.issued)
                .map(|s| s.start)
                .min();
            let upload = (1..=cfg.producers)
                .find(|n| cfg.package.name_for(*n) == spec.selector)
                .and_then(|n| producer_makespans_s.get(&format!("pc{n}")).copied().flatten());
            requests.push(RequestReport {
                requester: spec.requester.clone(),
                selector: spec.selector.clone(),
                matches: r.matches,
                restored: r.restored,
                timed_out: r.timed_out,
                makespan_s: start.zip(r.done_at).map(|(s, e)| e.since(s).as_secs_f64()),
                upload_makespan_s: upload,
            });
        }
    }

    let post_reconnect_fragments = post_reconnect_fragments(sim, producers, faults);
    let (verified_images, verification_failures) = verify(cfg, sim, orch, producers)?;

    let mut transfers = Vec::new();
    for id in &all {
        for s in node(id).sender().records() {
            let rx = node(&s.receiver).receiver().and_then(|rx| {
                rx.records()
                    .iter()
                    .rev()
                    .find(|r| r.hash_file == s.hash_file && &r.sender == *id && r.start >= s.start)
            });
            transfers.push(TransferRow {
                hash: s.hash_file.to_hex(),
                sender: id.to_string(),
                receiver: s.receiver.to_string(),
                file_name: s.file_name.clone(),
                start_s: secs(s.start),
                end_s: rx.and_then(|r| r.end).or(s.end).map(secs),
                retries: s.retries,
                missing_rounds: rx.map_or(0, |r| r.missing_rounds),
                outcome: s.outcome,
            });
        }
    }
    transfers.sort_by(|a, b| a.start_s.total_cmp(&b.start_s).then(a.sender.cmp(&b.sender)));

    let stats = sim.stats();
    let restored_at_orchestrator = orx
        .restored()
        .iter()
        .filter(|img| producers.contains(&img.entry.sender))
        .count() as u64;
    let expected_at_orchestrator = match &cfg.package.dataset_dir {
        Some(dir) => dataset_files(dir)?.len() as u64 * u64::from(cfg.producers),
        None => cfg.expected_images(),
    };
    let image_size = match &cfg.package.dataset_dir {
        Some(dir) => std::fs::metadata(&dataset_files(dir)?[0])?.len(),
        None => cfg.package.image_size.0,
    };
    Ok(MetricsReport {
        exp_id: cfg.id.clone(),
        description: cfg.description.clone(),
        seed: cfg.seed,
        producers: cfg.producers,
        session_mode: cfg.session_mode,
        recovery: cfg.recovery_policy(),
        image_count: cfg.package.image_count,
        image_size,
        sent: totals.files_sent,
        received: totals.files_received,
        messages_sent: totals.messages_sent,
        messages_received: totals.messages_received,
        duplicates: totals.duplicates_received,
        restored: totals.images_restored,
        restored_at_orchestrator,
        expected_at_orchestrator,
        downtime_s: faults.downtime(sim.now()).as_secs_f64(),
        makespan_s,
        producer_makespans_s,
        requests,
        post_reconnect_fragments,
        open_buffers,
        unfinished_transfers: unfinished,
        verified_images,
        verification_failures,
        nodes,
        totals,
        transport: TransportSummary {
            published: stats.published,
            routed: stats.routed,
            uplink_lost: stats.uplink_lost,
            copies: stats.copies,
            delivered: stats.delivered,
            dropped: stats.dropped,
            queued: stats.queued,
            in_flight: stats.in_flight,
            conserved: stats.is_conserved(),
        },
        transfers,
        end_time_s: secs(sim.now()),
        events: sim.events_processed(),
        trace_digest: sim.trace_digest(),
    })
}

/// Fragment deliveries published by a faulted node after it came back up.
/// A broker fault counts fragments from every producer.
fn post_reconnect_fragments(
    sim: &Simulator,
    producers: &[SenderId],
    faults: &crate::transport::FaultSchedule,
) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for e in faults.events().iter().filter(|e| e.action == FaultAction::Up) {
        let publishers: BTreeSet<&SenderId> = if e.node.as_str() == BROKER_ID {
            producers.iter().collect()
        } else if producers.contains(&e.node) {
            BTreeSet::from([&e.node])
        } else {
            continue;
        };
        let n = sim
            .deliveries()
            .iter()
            .filter(|d| d.at >= e.at && publishers.contains(&d.publisher))
            .filter(|d| {
                matches!(
                    scheme::classify(&d.subscriber, &d.topic),
                    Some(TopicKind::Fragments { .. })
                )
            })
            .count() as u64;
        *out.entry(e.node.to_string()).or_insert(0) += n;
    }
    out
}

/// Re-reads every stored image and checks it against its source.
fn verify(
    cfg: &ScenarioConfig,
    sim: &Simulator,
    orch: &SenderId,
    producers: &[SenderId],
) -> Result<(u64, Vec<String>), TestbedError> {
    let node = |id: &SenderId| sim.actor::<ProtocolNode>(id).expect("protocol node");
    let manifest = match &cfg.package.dataset_dir {
        Some(dir) if dir.join(MANIFEST_FILE).is_file() => Some(read_manifest(&dir.join(MANIFEST_FILE))?),
        _ => None,
    };
    // What each producer actually sent, hashed from the source bytes.
    let mut sources: BTreeMap<(&SenderId, &str, &str), HashId> = BTreeMap::new();
    for p in producers {
        for r in node(p).sender().records().iter().filter(|r| &r.receiver == orch) {
            sources.insert((p, &r.package_name, &r.file_name), r.hash_file);
        }
    }
    let orx = node(orch).receiver().expect("orchestrator receives");
    let mut failures = Vec::new();
    let mut checked = 0;
    for id in std::iter::once(orch).chain(producers) {
        let Some(rx) = node(id).receiver() else {
            continue;
        };
        for img in rx.restored() {
            let e = &img.entry;
            checked += 1;
            let bytes = rx.storage().read(e)?;
            if sha256(&bytes) != e.hash_file {
                failures.push(format!("{id}: {} does not hash to {}", e.stored_path.display(), e.hash_file));
            }
            let source_ok = if &e.sender == orch {
                orx.storage().entries().any(|s| {
                    s.hash_file == e.hash_file
                        && s.package_name == e.package_name
                        && s.file_name == e.file_name
                })
            } else {
                sources.get(&(&e.sender, e.package_name.as_str(), e.file_name.as_str()))
                    == Some(&e.hash_file)
                    && manifest
                        .as_ref()
                        .is_none_or(|m| m.get(&e.file_name) == Some(&e.hash_file))
            };
            if !source_ok {
                failures.push(format!(
                    "{id}: {}/{} from {} has no matching source",
                    e.package_name, e.file_name, e.sender
                ));
            }
        }
    }
    Ok((checked, failures))
}

/// Outcome counts over a report's transfers.
pub fn outcome_counts(report: &MetricsReport) -> BTreeMap<TransferOutcome, usize> {
    let mut out = BTreeMap::new();
    for t in &report.transfers {
        *out.entry(t.outcome).or_insert(0) += 1;
    }
    out
}
