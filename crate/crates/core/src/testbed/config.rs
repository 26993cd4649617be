use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::TestbedError;
use crate::codec::SenderId;
use crate::fragmentation::DEFAULT_CHUNK_SIZE;
use crate::nodes::{RecoveryPolicy, TimerConfig};
use crate::transport::{
    FaultAction, FaultEvent, FaultSchedule, SessionMode, SimTime, TrafficProfile,
};

pub const ORCHESTRATOR_ID: &str = "orchestrator";
pub const BROKER_ID: &str = "broker";

/// Producer ids are `pc1`..`pcN`.
pub fn producer_id(n: u32) -> SenderId {
    SenderId::new(format!("pc{n}")).expect("valid id")
}

/// A byte count, written either as an integer or as a string with a
/// `KB`/`MB`/`GB` suffix (binary multiples).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ByteSize(pub u64);

impl ByteSize {
    pub const MIB: u64 = 1024 * 1024;

    pub fn as_mib(self) -> f64 {
        self.0 as f64 / Self::MIB as f64
    }
}

/// Parses `1048576`, `512KB`, `1MB`, `2.5 MB`, `1GiB` and the like.
pub fn parse_size(s: &str) -> Result<u64, String> {
    let t = s.trim();
    let split = t
        .find(|c: char| !(c.is_ascii_digit() || c == '.'))
        .unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let num: f64 = num.parse().map_err(|_| format!("bad size {s:?}"))?;
    let mult = match unit.trim().to_ascii_uppercase().as_str() {
        "" | "B" => 1,
        "K" | "KB" | "KIB" => 1024,
        "M" | "MB" | "MIB" => 1024 * 1024,
        "G" | "GB" | "GIB" => 1024 * 1024 * 1024,
        other => return Err(format!("unknown size unit {other:?}")),
    };
    let bytes = num * mult as f64;
    if !bytes.is_finite() || bytes < 1.0 {
        return Err(format!("size {s:?} must be at least one byte"));
    }
    Ok(bytes.round() as u64)
}

impl fmt::Display for ByteSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_multiple_of(ByteSize::MIB) {
            write!(f, "{}MB", self.0 / ByteSize::MIB)
        } else if self.0.is_multiple_of(1024) {
            write!(f, "{}KB", self.0 / 1024)
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl Serialize for ByteSize {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ByteSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(n) => Ok(ByteSize(n)),
            Raw::Text(s) => parse_size(&s).map(ByteSize).map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContentMode {
    /// Each producer sends its own images.
    #[default]
    PerProducer,
    /// Every producer sends byte-identical images.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackageConfig {
    pub image_count: u32,
    pub image_size: ByteSize,
    /// Package name; `{n}` becomes the producer number.
    #[serde(default = "default_package_name")]
    pub name: String,
    #[serde(default)]
    pub content: ContentMode,
    /// Send the files of this directory instead of synthetic images.
    #[serde(default)]
    pub dataset_dir: Option<PathBuf>,
}

fn default_package_name() -> String {
    "Sample PC{n}".into()
}

impl PackageConfig {
    pub fn name_for(&self, producer: u32) -> String {
        self.name.replace("{n}", &producer.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub link_mbps: f64,
    pub broker_mbps: f64,
    pub latency_ms: f64,
    pub reconnect_delay_s: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            link_mbps: 1000.0,
            broker_mbps: 1000.0,
            latency_ms: 0.5,
            reconnect_delay_s: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub at_s: f64,
    pub node: String,
    pub action: FaultAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficSpec {
    #[serde(default)]
    pub start_s: f64,
    pub duration_s: f64,
    pub rate_mbps: f64,
    #[serde(default = "one")]
    pub parallel_streams: u32,
    #[serde(default = "default_packet")]
    pub packet_size: u32,
}

fn one() -> u32 {
    1
}

fn default_packet() -> u32 {
    131_072
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridRequestSpec {
    pub requester: String,
    pub selector: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RestoredExpectation {
    /// Every image restored, and every hybrid request served.
    Full,
    /// Strictly fewer than all images restored.
    Partial,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Expectation {
    pub restored: Option<RestoredExpectation>,
}

fn default_seed() -> u64 {
    1
}

fn default_chunk() -> u32 {
    DEFAULT_CHUNK_SIZE
}

fn default_max_time() -> f64 {
    86_400.0
}

fn default_true() -> bool {
    true
}

/// One experiment, read from a TOML scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub id: String,
    #[serde(default)]
    pub description: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub producers: u32,
    #[serde(default)]
    pub session_mode: SessionMode,
    /// Defaults to resilient for persistent sessions, basic for
    /// clean ones.
    #[serde(default)]
    pub recovery: Option<RecoveryPolicy>,
    #[serde(default = "default_chunk")]
    pub chunk_size: u32,
    #[serde(default = "default_max_time")]
    pub max_time_s: f64,
    #[serde(default = "default_true")]
    pub persist_temp: bool,
    pub package: PackageConfig,
    #[serde(default)]
    pub timers: TimerConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub traffic: Vec<TrafficSpec>,
    #[serde(default)]
    pub hybrid_requests: Vec<HybridRequestSpec>,
    #[serde(default)]
    pub expect: Expectation,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, TestbedError> {
        let cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| TestbedError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TestbedError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TestbedError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            TestbedError::Config(m) => TestbedError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        // relative dataset paths are relative to the scenario file
        if let (Some(dir), Some(base)) = (cfg.package.dataset_dir.as_mut(), path.parent()) {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn recovery_policy(&self) -> RecoveryPolicy {
        self.recovery.unwrap_or(match self.session_mode {
            SessionMode::Persistent => RecoveryPolicy::Resilient,
            SessionMode::Clean => RecoveryPolicy::Basic,
        })
    }

    pub fn producer_ids(&self) -> Vec<SenderId> {
        (1..=self.producers).map(producer_id).collect()
    }

    pub fn is_hybrid(&self, id: &SenderId) -> bool {
        self.hybrid_requests.iter().any(|r| r.requester == id.as_str())
    }

    pub fn expected_images(&self) -> u64 {
        u64::from(self.producers) * u64::from(self.package.image_count)
    }

    pub fn validate(&self) -> Result<(), TestbedError> {
        let bad = |m: String| Err(TestbedError::Config(format!("{}: {m}", self.id)));
        if self.id.is_empty() {
            return Err(TestbedError::Config("scenario id is empty".into()));
        }
        if self.producers == 0 {
            return bad("at least one producer is required".into());
        }
        if self.chunk_size == 0 {
            return bad("chunk_size must be positive".into());
        }
        if self.package.image_count == 0 && self.package.dataset_dir.is_none() {
            return bad("image_count must be positive".into());
        }
        if self.package.image_size.0 == 0 {
            return bad("image_size must be positive".into());
        }
        let n = &self.network;
        if n.link_mbps <= 0.0 || n.broker_mbps <= 0.0 {
            return bad("link capacities must be positive".into());
        }
        if n.latency_ms < 0.0 || n.reconnect_delay_s < 0.0 {
            return bad("latency and reconnect delay must not be negative".into());
        }
        if !(self.max_time_s > 0.0) {
            return bad("max_time_s must be positive".into());
        }
        if self.timers.gap_min > self.timers.gap_max {
            return bad("gap_min exceeds gap_max".into());
        }
        let known: Vec<String> = self
            .producer_ids()
            .into_iter()
            .map(|s| s.to_string())
            .chain([ORCHESTRATOR_ID.to_string(), BROKER_ID.to_string()])
            .collect();
        for f in &self.faults {
            if !known.contains(&f.node) {
                return bad(format!("fault names unknown node {:?}", f.node));
            }
            if !(f.at_s >= 0.0) {
                return bad("fault times must not be negative".into());
            }
        }
        self.fault_schedule()?;
        for t in &self.traffic {
            self.traffic_profile(t)?;
        }
        for r in &self.hybrid_requests {
            if !known[..self.producers as usize].contains(&r.requester) {
                return bad(format!("hybrid request from unknown node {:?}", r.requester));
            }
            if r.selector.is_empty() {
                return bad("hybrid request selector is empty".into());
            }
        }
        Ok(())
    }

    pub fn fault_schedule(&self) -> Result<FaultSchedule, TestbedError> {
        let events = self
            .faults
            .iter()
            .map(|f| {
                Ok(FaultEvent {
                    at: SimTime::from_secs_f64(f.at_s),
                    node: SenderId::new(f.node.clone())
                        .map_err(|e| TestbedError::Config(e.to_string()))?,
                    action: f.action,
                })
            })
            .collect::<Result<Vec<_>, TestbedError>>()?;
        FaultSchedule::new(events).map_err(|e| TestbedError::Config(format!("{}: {e}", self.id)))
    }

    pub fn traffic_profile(&self, t: &TrafficSpec) -> Result<TrafficProfile, TestbedError> {
        if !(t.duration_s > 0.0) || !(t.rate_mbps > 0.0) || t.start_s < 0.0 {
            return Err(TestbedError::Config(format!(
                "{}: traffic needs positive duration and rate",
                self.id
            )));
        }
        let p = TrafficProfile {
            start: SimTime::from_secs_f64(t.start_s),
            duration: Duration::from_secs_f64(t.duration_s),
            rate_bps: (t.rate_mbps * 1e6).round() as u64,
            parallel_streams: t.parallel_streams,
            packet_size: t.packet_size,
        };
        p.validate()
            .map_err(|e| TestbedError::Config(format!("{}: {e}", self.id)))?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        id = "t"
        producers = 2
        [package]
        image_count = 3
        image_size = "2MB"
    "#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ScenarioConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.package.image_size, ByteSize(2 * 1024 * 1024));
        assert_eq!(c.session_mode, SessionMode::Clean);
        assert_eq!(c.recovery_policy(), RecoveryPolicy::Basic);
        assert_eq!(c.timers, TimerConfig::default());
        assert_eq!(c.package.name_for(2), "Sample PC2");
        assert_eq!(c.expected_images(), 6);
    }

    #[test]
    fn round_trips_through_toml() {
        let c = ScenarioConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(ScenarioConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\nbogus = 1\n");
        assert!(matches!(ScenarioConfig::from_toml(&text), Err(TestbedError::Config(_))));
    }

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_size("1MB").unwrap(), 1_048_576);
        assert_eq!(parse_size("512 KB").unwrap(), 524_288);
        assert_eq!(parse_size("1.5MB").unwrap(), 1_572_864);
        assert_eq!(parse_size("7").unwrap(), 7);
        assert!(parse_size("MB").is_err());
        assert!(parse_size("0").is_err());
        assert!(parse_size("3 parsecs").is_err());
    }

    #[test]
    fn faults_are_validated() {
        let bad_node = format!("{MINIMAL}\n[[faults]]\nat_s = 1\nnode = \"pc9\"\naction = \"down\"\n");
        assert!(ScenarioConfig::from_toml(&bad_node).is_err());
        let up_first = format!("{MINIMAL}\n[[faults]]\nat_s = 1\nnode = \"pc1\"\naction = \"up\"\n");
        assert!(ScenarioConfig::from_toml(&up_first).is_err());
        let ok = format!(
            "{MINIMAL}\n[[faults]]\nat_s = 1\nnode = \"broker\"\naction = \"down\"\n[[faults]]\nat_s = 2\nnode = \"broker\"\naction = \"up\"\n"
        );
        let c = ScenarioConfig::from_toml(&ok).unwrap();
        assert_eq!(c.fault_schedule().unwrap().events().len(), 2);
    }

    #[test]
    fn zero_producers_is_a_config_error() {
        let text = MINIMAL.replace("producers = 2", "producers = 0");
        assert!(ScenarioConfig::from_toml(&text).is_err());
    }
}
