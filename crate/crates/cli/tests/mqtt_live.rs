//! Two `chunkrelay node` processes exchanging a dataset through a real
//! MQTT broker running in this test process.

use std::fs;
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

fn start_broker() -> u16 {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let text = format!(
        r#"
id = 0

[router]
max_connections = 64
max_outgoing_packet_count = 200
max_segment_size = 104857600
max_segment_count = 10

[v4.1]
name = "v4-1"
listen = "127.0.0.1:{port}"
next_connection_delay_ms = 1

[v4.1.connections]
connection_timeout_ms = 60000
max_payload_size = 67108864
max_inflight_count = 100
dynamic_filters = true
"#
    );
    let config: rumqttd::Config = toml::from_str(&text).unwrap();
    thread::spawn(move || rumqttd::Broker::new(config).start().unwrap());
    let deadline = Instant::now() + Duration::from_secs(10);
    while TcpStream::connect(("127.0.0.1", port)).is_err() {
        assert!(Instant::now() < deadline, "broker did not come up");
        thread::sleep(Duration::from_millis(50));
    }
    port
}

fn node(port: u16, work: &Path, args: &[&str]) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_chunkrelay"));
    c.env("CHUNKRELAY_LOG", "warn")
        .args(["node", "--broker", &format!("127.0.0.1:{port}"), "--work-dir"])
        .arg(work)
        .args(args);
    c
}

#[test]
fn producer_delivers_dataset_to_orchestrator() {
    let port = start_broker();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("Sample PC1");
    let gen = Command::new(env!("CARGO_BIN_EXE_chunkrelay"))
        .args(["gen-dataset", "--seed", "5", "--count", "3", "--size", "600KB", "--out"])
        .arg(&data)
        .stdout(Stdio::null())
        .status()
        .unwrap();
    assert!(gen.success());

    let mut orch = node(port, &dir.path().join("orch"), &["--role", "orchestrator", "--id", "orchestrator", "--timeout", "60"])
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    // give the orchestrator time to subscribe before headers go out
    thread::sleep(Duration::from_millis(500));
    let producer = node(port, &dir.path().join("pc1"), &["--role", "producer", "--id", "pc1", "--exit-when-idle", "--timeout", "60"])
        .arg("--send")
        .arg(&data)
        .output()
        .unwrap();
    orch.kill().ok();
    orch.wait().ok();
    assert_eq!(producer.status.code(), Some(0), "{}", String::from_utf8_lossy(&producer.stderr));
    let metrics: serde_json::Value = serde_json::from_slice(&producer.stdout).unwrap();
    assert_eq!(metrics["files_sent"], 3);

    let stored = dir.path().join("orch/storage/pc1/Sample PC1");
    for i in 1..=3 {
        let name = format!("img_{i:03}.bin");
        let got = fs::read(stored.join(&name)).unwrap();
        let want = fs::read(data.join(&name)).unwrap();
        assert_eq!(got.len(), 600 * 1024);
        assert_eq!(Sha256::digest(&got), Sha256::digest(&want), "{name}");
    }
}
