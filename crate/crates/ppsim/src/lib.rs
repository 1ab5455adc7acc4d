//! Simulation library for power packet dispatching networks.
//!
//! A power packet is a fixed-length burst of electrical energy tagged with a
//! short digital header: three sync bits, a 4-bit destination address, and a
//! continuous-high payload that carries the energy itself. Routers read the
//! tag, close their input switch only for packets addressed to them, and
//! store the received energy in a capacitor. Supply is driven by demand
//! signalling between neighboring routers: a router whose storage voltage
//! falls below its threshold asserts a demand line, and the upstream router
//! answers with packets.
//!
//! The crate models such networks at the bit/envelope level (not at the
//! carrier level): wired links are lossy diode-gated resistive paths, and
//! wireless links are inductively coupled hops with a first-order ASK
//! envelope and a calibrated coupling falloff. The fixed-step engine in
//! [`engine`] is deterministic: identical configurations produce identical
//! traces, byte for byte.
//!
//! Modules, bottom up:
//!
//! * [`codec`] - frame encoding, header recovery, clock synchronization.
//! * [`analog`] - storage capacitors, wired transfer, coupling, envelopes.
//! * [`router`] - transmitter/receiver state machines and port logic.
//! * [`control`] - threshold supervision, arbitration, fallback timing.
//! * [`engine`] - the stepped world: topology, integration, tracing.
//! * [`scenario`] - scenario files, bundled presets, and embedded checks.
//! * [`report`] - windowed power summaries and reference comparisons.

pub mod analog;
pub mod codec;
pub mod control;
pub mod engine;
pub mod report;
pub mod router;
pub mod scenario;
pub mod trace;

pub use codec::{Address, BitFrame};
pub use engine::{run, SimConfig, Topology};
pub use report::SummaryReport;
pub use scenario::{parse_scenario, preset, preset_names, run_preset, Scenario};
pub use trace::Trace;
