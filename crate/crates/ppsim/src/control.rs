//! Demand signalling and dispatch decisions: storage supervisors with
//! hysteresis, priority arbitration between competing routes, output floor
//! checks, and the fallback timer that pulls in a second supplier when the
//! primary route starves.
//!
//! Everything here is evaluated on the control tick, one bit period, and is
//! deterministic given the same inputs.

use crate::router::RxMode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Deassert margin above the threshold so a single packet's worth of charge
/// does not make the demand line chatter.
pub const DEFAULT_HYSTERESIS: f64 = 0.1;

/// Unserved-demand time after which a fallback supplier is pulled in.
pub const DEFAULT_FALLBACK_TIMEOUT: f64 = 20e-3;

/// Watches one storage voltage and raises demand when it sags below the
/// operating threshold. Demand holds until the voltage recovers past the
/// threshold plus the hysteresis margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSupervisor {
    pub threshold: f64,
    pub hysteresis: f64,
    asserted: bool,
}

impl ThresholdSupervisor {
    pub fn new(threshold: f64) -> Self {
        Self::with_hysteresis(threshold, DEFAULT_HYSTERESIS)
    }

    pub fn with_hysteresis(threshold: f64, hysteresis: f64) -> Self {
        assert!(hysteresis >= 0.0, "hysteresis must be non-negative");
        ThresholdSupervisor {
            threshold,
            hysteresis,
            asserted: false,
        }
    }

    /// Feeds one voltage sample; returns the demand line after it.
    pub fn update(&mut self, voltage: f64) -> bool {
        if self.asserted {
            if voltage >= self.threshold + self.hysteresis {
                self.asserted = false;
            }
        } else if voltage < self.threshold {
            self.asserted = true;
        }
        self.asserted
    }

    pub fn asserted(&self) -> bool {
        self.asserted
    }
}

/// Picks which demanding route a source serves next. Routes are given in
/// declaration order as `(rank, demanding)`; the lowest rank wins and
/// declaration order breaks ties. Returns the winning index.
pub fn arbitrate(routes: &[(u32, bool)]) -> Option<usize> {
    routes
        .iter()
        .enumerate()
        .filter(|(_, &(_, demanding))| demanding)
        .min_by_key(|&(i, &(rank, _))| (rank, i))
        .map(|(i, _)| i)
}

/// Issue-time gate: a router only sources a packet while its own storage
/// sits at or above the configured floor.
pub fn output_permitted(storage_voltage: f64, floor: f64) -> bool {
    storage_voltage >= floor
}

/// A router never converts input and output at once; while the receive side
/// is latched onto a payload, issuance from the same router is held back.
pub fn output_blocked_by_input(rx_mode: RxMode) -> bool {
    rx_mode.rectifier_on()
}

/// Counts contiguous control ticks of unserved demand and engages a fallback
/// supplier once the count reaches the timeout. An accepted delivery from
/// the primary route stands the fallback down and restarts the count; so
/// does the demand line dropping. The primary route keeps serving while the
/// fallback is engaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FallbackTimer {
    timeout_ticks: u64,
    unserved_ticks: u64,
    engaged: bool,
}

impl FallbackTimer {
    pub fn new(timeout_ticks: u64) -> Self {
        assert!(timeout_ticks > 0, "timeout must be at least one tick");
        FallbackTimer {
            timeout_ticks,
            unserved_ticks: 0,
            engaged: false,
        }
    }

    /// Converts a timeout in seconds to ticks of length `tick`.
    pub fn from_times(timeout: f64, tick: f64) -> Self {
        Self::new((timeout / tick).round().max(1.0) as u64)
    }

    /// Advances one control tick. `demand` is the downstream demand line and
    /// `served` reports a frame accepted over the primary route this tick.
    pub fn tick(&mut self, demand: bool, served: bool) -> bool {
        if !demand || served {
            self.unserved_ticks = 0;
            self.engaged = false;
        } else {
            self.unserved_ticks += 1;
            if self.unserved_ticks >= self.timeout_ticks {
                self.engaged = true;
            }
        }
        self.engaged
    }

    pub fn engaged(&self) -> bool {
        self.engaged
    }
}

/// Seeded two-state Markov demand line for stress scenarios: each control
/// tick the line flips with the probability for its current state.
#[derive(Debug, Clone)]
pub struct ScriptedDemand {
    rng: ChaCha8Rng,
    flip_on: f64,
    flip_off: f64,
    asserted: bool,
}

impl ScriptedDemand {
    pub fn new(seed: u64, flip_on: f64, flip_off: f64) -> Self {
        ScriptedDemand {
            rng: ChaCha8Rng::seed_from_u64(seed),
            flip_on,
            flip_off,
            asserted: false,
        }
    }

    pub fn tick(&mut self) -> bool {
        let p = if self.asserted {
            self.flip_off
        } else {
            self.flip_on
        };
        if self.rng.gen::<f64>() < p {
            self.asserted = !self.asserted;
        }
        self.asserted
    }

    pub fn asserted(&self) -> bool {
        self.asserted
    }
}
