use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TestbedError;
use crate::nodes::{MetricsCounters, RecoveryPolicy, TransferOutcome};
use crate::transport::SessionMode;

/// One sender-side transfer joined with the receiver's view of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub hash: String,
    pub sender: String,
    pub receiver: String,
    pub file_name: String,
    pub start_s: f64,
    pub end_s: Option<f64>,
    pub retries: u32,
    pub missing_rounds: u32,
    pub outcome: TransferOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestReport {
    pub requester: String,
    pub selector: String,
    pub matches: Option<u32>,
    pub restored: u32,
    pub timed_out: bool,
    /// First header sent for this request until its last image restored.
    pub makespan_s: Option<f64>,
    /// Makespan of the producer that originally uploaded the package.
    pub upload_makespan_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransportSummary {
    pub published: u64,
    pub routed: u64,
    pub uplink_lost: u64,
    pub copies: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub queued: u64,
    pub in_flight: u64,
    pub conserved: bool,
}

/// Everything a run measured. Serializes deterministically: maps are
/// ordered and no wall-clock values are included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub exp_id: String,
    pub description: String,
    pub seed: u64,
    pub producers: u32,
    pub session_mode: SessionMode,
    pub recovery: RecoveryPolicy,
    pub image_count: u32,
    pub image_size: u64,
    /// Images sent, summed over every sender.
    pub sent: u64,
    /// Distinct transfers accepted, summed over every receiver.
    pub received: u64,
    /// Headers and fragments published by senders, retries included.
    pub messages_sent: u64,
    /// Headers and fragments delivered to receivers, duplicates included.
    pub messages_received: u64,
    pub duplicates: u64,
    /// Images restored, summed over every receiver.
    pub restored: u64,
    /// Images the orchestrator restored from producers.
    pub restored_at_orchestrator: u64,
    pub expected_at_orchestrator: u64,
    pub downtime_s: f64,
    pub makespan_s: f64,
    pub producer_makespans_s: BTreeMap<String, Option<f64>>,
    pub requests: Vec<RequestReport>,
    /// Fragments delivered from a faulted path after it came back, keyed by
    /// the faulted node.
    pub post_reconnect_fragments: BTreeMap<String, u64>,
    /// Receiver buffers still open when the run went quiet.
    pub open_buffers: u64,
    /// Sender transfers neither completed nor failed at the end.
    pub unfinished_transfers: u64,
    pub verified_images: u64,
    pub verification_failures: Vec<String>,
    pub nodes: BTreeMap<String, MetricsCounters>,
    pub totals: MetricsCounters,
    pub transport: TransportSummary,
    pub transfers: Vec<TransferRow>,
    pub end_time_s: f64,
    pub events: u64,
    pub trace_digest: String,
}

impl MetricsReport {
    pub fn package_mib(&self) -> f64 {
        self.image_count as f64 * self.image_size as f64 / (1024.0 * 1024.0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TestbedError> {
        serde_json::from_str(text).map_err(|e| TestbedError::Config(format!("report: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, TestbedError> {
        let p = if path.is_dir() { path.join("report.json") } else { path.to_path_buf() };
        let text = fs::read_to_string(&p)
            .map_err(|e| TestbedError::Config(format!("{}: {e}", p.display())))?;
        Self::from_json(&text)
    }
}

fn secs3(v: f64) -> String {
    format!("{v:.3}")
}

/// Writes `summary.csv`, `transfers.csv` and `report.json` into `dir`.
pub fn write_report(report: &MetricsReport, dir: &Path) -> Result<(), TestbedError> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("summary.csv")).map_err(csv_err)?;
    w.write_record([
        "exp_id", "producers", "pkg_mb", "imgs", "size_mb", "sent", "received", "duplicates",
        "restored", "downtime_s", "makespan_s",
    ])
    .map_err(csv_err)?;
    w.write_record([
        report.exp_id.clone(),
        report.producers.to_string(),
        format!("{}", report.package_mib()),
        report.image_count.to_string(),
        format!("{}", report.image_size as f64 / (1024.0 * 1024.0)),
        report.sent.to_string(),
        report.received.to_string(),
        report.duplicates.to_string(),
        report.restored.to_string(),
        secs3(report.downtime_s),
        secs3(report.makespan_s),
    ])
    .map_err(csv_err)?;
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("transfers.csv")).map_err(csv_err)?;
    w.write_record(["hash", "sender", "start_s", "end_s", "retries", "missing_rounds"])
        .map_err(csv_err)?;
    for t in &report.transfers {
        w.write_record([
            t.hash.clone(),
            t.sender.clone(),
            secs3(t.start_s),
            t.end_s.map(secs3).unwrap_or_default(),
            t.retries.to_string(),
            t.missing_rounds.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;

    fs::write(dir.join("report.json"), report.to_json() + "\n")?;
    Ok(())
}

fn csv_err(e: csv::Error) -> TestbedError {
    TestbedError::Io(std::io::Error::other(e))
}

/// Differences `b - a` between two runs of the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffSummary {
    pub a: String,
    pub b: String,
    pub makespan_delta_s: f64,
    pub downtime_delta_s: f64,
    pub sent_delta: i64,
    pub received_delta: i64,
    pub duplicates_delta: i64,
    pub restored_delta: i64,
    pub producer_makespan_delta_s: BTreeMap<String, Option<f64>>,
}

impl DiffSummary {
    pub fn render(&self) -> String {
        let mut out = format!(
            "{} -> {}\nmakespan_s  {:+.3}\ndowntime_s  {:+.3}\nsent        {:+}\nreceived    {:+}\nduplicates  {:+}\nrestored    {:+}\n",
            self.a,
            self.b,
            self.makespan_delta_s,
            self.downtime_delta_s,
            self.sent_delta,
            self.received_delta,
            self.duplicates_delta,
            self.restored_delta
        );
        for (p, d) in &self.producer_makespan_delta_s {
            match d {
                Some(d) => out += &format!("  {p:<10}{d:+.3}\n"),
                None => out += &format!("  {p:<10}n/a\n"),
            }
        }
        out
    }
}

/// Compares two runs. Runs with different producer counts or packages
/// are not comparable.
pub fn compare_runs(a: &MetricsReport, b: &MetricsReport) -> Result<DiffSummary, TestbedError> {
    let shape = |r: &MetricsReport| (r.producers, r.image_count, r.image_size);
    if shape(a) != shape(b) {
        return Err(TestbedError::ShapeMismatch(format!(
            "{} has {} producers x {} x {} bytes, {} has {} x {} x {}",
            a.exp_id, a.producers, a.image_count, a.image_size, b.exp_id, b.producers,
            b.image_count, b.image_size
        )));
    }
    let d = |x: u64, y: u64| y as i64 - x as i64;
    let producer_makespan_delta_s = a
        .producer_makespans_s
        .iter()
        .map(|(p, ma)| {
            let mb = b.producer_makespans_s.get(p).copied().flatten();
            (p.clone(), ma.zip(mb).map(|(x, y)| y - x))
        })
        .collect();
    Ok(DiffSummary {
        a: a.exp_id.clone(),
        b: b.exp_id.clone(),
        makespan_delta_s: b.makespan_s - a.makespan_s,
        downtime_delta_s: b.downtime_s - a.downtime_s,
        sent_delta: d(a.sent, b.sent),
        received_delta: d(a.received, b.received),
        duplicates_delta: d(a.duplicates, b.duplicates),
        restored_delta: d(a.restored, b.restored),
        producer_makespan_delta_s,
    })
}
