//! Run traces: decimated per-router samples, the packet and control events
//! that shaped them, and loss-free round-trips to CSV and JSON.
//!
//! Each sample row carries, per router, the storage voltage, four cumulative
//! energy counters, and the two power-path switch states. Keeping the
//! counters cumulative lets any downstream consumer compute average power
//! over an arbitrary window from two rows, without caring about the sampling
//! rate the trace was written at; the switch columns let the input/output
//! exclusion be audited sample by sample.

use serde::{Deserialize, Serialize};

use crate::router::RxMode;

/// Per-router signal kinds, in column order: voltage, the four cumulative
/// energy counters, the payload input switch, and output activity.
pub const ROUTER_COLUMNS: [&str; 7] = ["V", "e_in", "e_out", "e_load", "e_loss", "S_rx", "out"];

/// Static facts about one router, in column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterMeta {
    pub id: String,
    pub address: String,
    /// Storage capacitance in farads; `None` marks an ideal supply rail.
    pub capacitance: Option<f64>,
    /// Always-on load across the storage, ohms.
    pub load_resistance: Option<f64>,
    /// Demand threshold of the storage supervisor, volts.
    pub threshold: Option<f64>,
    /// Minimum storage voltage this router sources packets at.
    pub output_floor: Option<f64>,
}

/// Run-level facts a consumer needs to interpret the samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub scenario_name: String,
    /// Integration step, seconds.
    pub dt: f64,
    /// Bit period, seconds.
    pub bit_width: f64,
    /// Spacing of trace rows, seconds.
    pub sample_interval: f64,
    /// Simulated span, seconds.
    pub duration: f64,
    /// Start of the steady measurement window, seconds.
    pub measure_start: f64,
    pub seed: Option<u64>,
    pub routers: Vec<RouterMeta>,
}

/// One router's contribution to a sample row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RouterSample {
    pub voltage: f64,
    pub energy_in: f64,
    pub energy_out: f64,
    pub energy_load: f64,
    pub energy_loss: f64,
    /// Payload input switch closed (wireless rectifier or wired latch).
    pub input_closed: bool,
    /// A frame from this router is on the line.
    pub output_active: bool,
}

/// Discrete happenings worth more precision than the sample grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum TraceEvent {
    /// A frame left `source` for `dest`; `source_voltage` is the storage
    /// voltage the issue-time floor check saw.
    PacketSent {
        time: f64,
        source: String,
        dest: String,
        address: String,
        source_voltage: f64,
    },
    /// A receiver latched onto a frame's payload at the header decision.
    PacketAccepted {
        time: f64,
        router: String,
        address: String,
    },
    /// A receiver sat out a frame addressed elsewhere.
    PacketRejected {
        time: f64,
        router: String,
        address: String,
    },
    /// A receiver sat out its own frame because its output was in flight.
    PacketDeferred {
        time: f64,
        router: String,
        address: String,
    },
    ModeChanged {
        time: f64,
        router: String,
        from: RxMode,
        to: RxMode,
    },
    DemandChanged {
        time: f64,
        router: String,
        asserted: bool,
    },
    /// A starved route pulled its fallback supplier in or stood it down.
    FallbackChanged {
        time: f64,
        route: String,
        engaged: bool,
    },
}

impl TraceEvent {
    pub fn time(&self) -> f64 {
        match self {
            TraceEvent::PacketSent { time, .. }
            | TraceEvent::PacketAccepted { time, .. }
            | TraceEvent::PacketRejected { time, .. }
            | TraceEvent::PacketDeferred { time, .. }
            | TraceEvent::ModeChanged { time, .. }
            | TraceEvent::DemandChanged { time, .. }
            | TraceEvent::FallbackChanged { time, .. } => *time,
        }
    }
}

/// A complete recorded run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub meta: TraceMeta,
    /// Column names; index 0 is always `time`.
    pub columns: Vec<String>,
    /// Row-major samples, one row per sample instant.
    pub samples: Vec<Vec<f64>>,
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new(meta: TraceMeta) -> Self {
        let mut columns = vec!["time_s".to_string()];
        for r in &meta.routers {
            for kind in ROUTER_COLUMNS {
                columns.push(format!("{}.{}", r.id, kind));
            }
        }
        Trace {
            meta,
            columns,
            samples: Vec::new(),
            events: Vec::new(),
        }
    }

    /// Appends one row; `per_router` must follow `meta.routers` order.
    pub fn push_sample(&mut self, time: f64, per_router: &[RouterSample]) {
        debug_assert_eq!(per_router.len(), self.meta.routers.len());
        let mut row = Vec::with_capacity(self.columns.len());
        row.push(time);
        for s in per_router {
            row.push(s.voltage);
            row.push(s.energy_in);
            row.push(s.energy_out);
            row.push(s.energy_load);
            row.push(s.energy_loss);
            row.push(if s.input_closed { 1.0 } else { 0.0 });
            row.push(if s.output_active { 1.0 } else { 0.0 });
        }
        self.samples.push(row);
    }

    pub fn push_event(&mut self, event: TraceEvent) {
        self.events.push(event);
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn router_index(&self, id: &str) -> Option<usize> {
        self.meta.routers.iter().position(|r| r.id == id)
    }

    /// Index of the last row at or before `time`; rows are time ordered.
    pub fn row_at_or_before(&self, time: f64) -> Option<usize> {
        let n = self.samples.partition_point(|row| row[0] <= time + 1e-15);
        n.checked_sub(1)
    }

    pub fn value(&self, row: usize, column: &str) -> f64 {
        let col = self
            .column_index(column)
            .unwrap_or_else(|| panic!("no column named {}", column));
        self.samples[row][col]
    }

    /// Average of a cumulative energy column over `[t0, t1]`, watts.
    pub fn average_power(&self, column: &str, t0: f64, t1: f64) -> f64 {
        assert!(t1 > t0, "window must be forward");
        let r0 = self
            .row_at_or_before(t0)
            .expect("window starts before data");
        let r1 = self.row_at_or_before(t1).expect("window ends before data");
        let actual = self.samples[r1][0] - self.samples[r0][0];
        assert!(actual > 0.0, "window spans no samples");
        (self.value(r1, column) - self.value(r0, column)) / actual
    }

    /// Samples of one column inside `[t0, t1]`, as `(time, value)` pairs.
    pub fn column_between(&self, column: &str, t0: f64, t1: f64) -> Vec<(f64, f64)> {
        let col = self
            .column_index(column)
            .unwrap_or_else(|| panic!("no column named {}", column));
        self.samples
            .iter()
            .filter(|row| row[0] >= t0 - 1e-15 && row[0] <= t1 + 1e-15)
            .map(|row| (row[0], row[col]))
            .collect()
    }

    pub fn events_between(&self, t0: f64, t1: f64) -> impl Iterator<Item = &TraceEvent> {
        self.events
            .iter()
            .filter(move |e| e.time() >= t0 - 1e-15 && e.time() <= t1 + 1e-15)
    }

    /// Samples as CSV, header first. Floats print in shortest round-trip
    /// form, so equal traces serialize to identical bytes.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.samples {
            let mut first = true;
            for v in row {
                if !first {
                    out.push(',');
                }
                first = false;
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string(self)
    }

    pub fn from_json(text: &str) -> serde_json::Result<Trace> {
        serde_json::from_str(text)
    }
}
