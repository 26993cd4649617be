//! Reliable chunked image transfer over MQTT-style publish/subscribe.
//!
//! Producers split images into checksummed fragments, announce them with a
//! header, and stream fragments once the orchestrator accepts. The
//! orchestrator reassembles, verifies the whole-file hash, stores with
//! sender namespacing, and asks for missing parts when assembly stalls.
//! Everything runs against [`transport::Simulator`] for reproducible
//! fault-injection experiments, or against a real broker with the `mqtt`
//! feature.

pub mod codec;
pub mod fragmentation;
pub mod transport;
pub mod nodes;
pub mod testbed;
