//! Post-run analysis: windowed summaries computed from a trace, the check
//! functions the bundled presets and the acceptance suite share, and the
//! reference operating points the gap-study report prints deltas against.
//!
//! Every check takes a finished [`Trace`] and returns a [`CheckResult`] so
//! callers can render one pass/fail line per property. Checks never mutate
//! anything and panic only if asked about columns the trace's own metadata
//! does not define.

use std::fmt;

use serde::Serialize;

use crate::codec::{FRAME_BITS, HEADER_BITS};
use crate::router::RxMode;
use crate::trace::{Trace, TraceEvent};

/// Reference operating points for the storage-sharing gap study, used for
/// delta reporting in the gap-study presets. Powers in watts, averaged over
/// a 250 ms window.
pub const GAP_STUDY_REFERENCE: [GapStudyRow; 3] = [
    GapStudyRow {
        case_label: "i",
        gap_mm: 50.0,
        rx_input_w: 0.50,
        rx_output_w: 0.46,
        m2_output_w: 0.73,
        total_output_w: 1.19,
    },
    GapStudyRow {
        case_label: "ii",
        gap_mm: 100.0,
        rx_input_w: 0.20,
        rx_output_w: 0.17,
        m2_output_w: 0.94,
        total_output_w: 1.11,
    },
    GapStudyRow {
        case_label: "iii",
        gap_mm: 250.0,
        rx_input_w: 0.00,
        rx_output_w: 0.00,
        m2_output_w: 1.13,
        total_output_w: 1.13,
    },
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapStudyRow {
    pub case_label: &'static str,
    pub gap_mm: f64,
    pub rx_input_w: f64,
    pub rx_output_w: f64,
    pub m2_output_w: f64,
    pub total_output_w: f64,
}

/// One measured gap-study case next to its reference row.
#[derive(Debug, Clone, Serialize)]
pub struct GapStudyComparison {
    pub case_label: String,
    pub gap_mm: f64,
    pub measured_rx_input_w: f64,
    pub measured_rx_output_w: f64,
    pub measured_m2_output_w: f64,
    pub measured_total_output_w: f64,
    pub reference: GapStudyRow,
}

/// Outcome of one named property check.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    pub fn pass(name: &str, detail: String) -> Self {
        CheckResult {
            name: name.to_string(),
            passed: true,
            detail,
        }
    }

    pub fn fail(name: &str, detail: String) -> Self {
        CheckResult {
            name: name.to_string(),
            passed: false,
            detail,
        }
    }

    pub fn from(name: &str, passed: bool, detail: String) -> Self {
        CheckResult {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

/// Windowed per-router figures.
#[derive(Debug, Clone, Serialize)]
pub struct RouterSummary {
    pub id: String,
    pub avg_in_w: f64,
    pub avg_out_w: f64,
    pub avg_load_w: f64,
    pub avg_loss_w: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub v_final: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PacketCounts {
    pub sent: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub deferred: usize,
}

/// Per-receiver selectivity tally. `observed()` always equals the sum of the
/// three outcomes, so the counts partition the frames the receiver saw.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ReceiverCounts {
    pub id: String,
    pub accepted: usize,
    pub rejected: usize,
    pub deferred: usize,
}

impl ReceiverCounts {
    pub fn observed(&self) -> usize {
        self.accepted + self.rejected + self.deferred
    }
}

/// Everything a run reduces to: windowed router figures, packet counts,
/// and the pass/fail lines of whatever checks the caller attached.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryReport {
    pub scenario: String,
    pub window_start_s: f64,
    pub window_end_s: f64,
    /// The measurement window holds fewer than two samples; averages are
    /// reported as zero and window checks are omitted.
    pub insufficient_window: bool,
    pub routers: Vec<RouterSummary>,
    pub packets: PacketCounts,
    /// Accept/reject/defer tallies per router that saw at least one frame.
    pub receivers: Vec<ReceiverCounts>,
    /// Samples at or after the window start where a supervised storage sat
    /// below threshold minus the tolerated hysteresis band.
    pub threshold_violations: usize,
    pub checks: Vec<CheckResult>,
    pub gap_study: Vec<GapStudyComparison>,
}

impl SummaryReport {
    /// Reduces a trace over its own measurement window; checks start empty.
    pub fn from_trace(trace: &Trace) -> Self {
        let t0 = trace.meta.measure_start;
        let t1 = trace.meta.duration;
        let rows_in_window = trace
            .samples
            .iter()
            .filter(|r| r[0] >= t0 - 1e-15 && r[0] <= t1 + 1e-15)
            .count();
        let insufficient = t1 - t0 <= 0.0 || rows_in_window < 2;
        let routers = trace
            .meta
            .routers
            .iter()
            .map(|r| {
                let volts = trace.column_between(&format!("{}.V", r.id), t0, t1);
                let (mut v_min, mut v_max) = (0.0_f64, 0.0_f64);
                for (k, &(_, v)) in volts.iter().enumerate() {
                    if k == 0 {
                        v_min = v;
                        v_max = v;
                    }
                    v_min = v_min.min(v);
                    v_max = v_max.max(v);
                }
                let v_final = trace
                    .samples
                    .last()
                    .map(|row| row[trace.column_index(&format!("{}.V", r.id)).unwrap()])
                    .unwrap_or(0.0);
                let avg = |kind: &str| {
                    if insufficient {
                        0.0
                    } else {
                        trace.average_power(&format!("{}.{}", r.id, kind), t0, t1)
                    }
                };
                RouterSummary {
                    id: r.id.clone(),
                    avg_in_w: avg("e_in"),
                    avg_out_w: avg("e_out"),
                    avg_load_w: avg("e_load"),
                    avg_loss_w: avg("e_loss"),
                    v_min,
                    v_max,
                    v_final,
                }
            })
            .collect();
        SummaryReport {
            scenario: trace.meta.scenario_name.clone(),
            window_start_s: t0,
            window_end_s: t1,
            insufficient_window: insufficient,
            routers,
            packets: packet_counts(trace),
            receivers: receiver_counts(trace),
            threshold_violations: count_threshold_violations(
                trace,
                t0,
                crate::control::DEFAULT_HYSTERESIS,
            ),
            checks: Vec::new(),
            gap_study: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}

impl fmt::Display for SummaryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario: {}", self.scenario)?;
        writeln!(
            f,
            "window: {:.3} s .. {:.3} s{}",
            self.window_start_s,
            self.window_end_s,
            if self.insufficient_window {
                "  (INSUFFICIENT WINDOW: averages not meaningful)"
            } else {
                ""
            }
        )?;
        writeln!(
            f,
            "{:<8} {:>10} {:>10} {:>10} {:>10} {:>8} {:>8} {:>8}",
            "router", "in W", "out W", "load W", "loss W", "V min", "V max", "V end"
        )?;
        for r in &self.routers {
            writeln!(
                f,
                "{:<8} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>8.3} {:>8.3} {:>8.3}",
                r.id,
                r.avg_in_w,
                r.avg_out_w,
                r.avg_load_w,
                r.avg_loss_w,
                r.v_min,
                r.v_max,
                r.v_final
            )?;
        }
        writeln!(
            f,
            "packets: {} sent, {} accepted, {} rejected, {} deferred",
            self.packets.sent, self.packets.accepted, self.packets.rejected, self.packets.deferred
        )?;
        for rc in &self.receivers {
            writeln!(
                f,
                "receiver {}: {} observed = {} accepted + {} rejected + {} deferred",
                rc.id,
                rc.observed(),
                rc.accepted,
                rc.rejected,
                rc.deferred
            )?;
        }
        writeln!(
            f,
            "threshold violations after window start: {}",
            self.threshold_violations
        )?;
        if !self.gap_study.is_empty() {
            writeln!(
                f,
                "{:<6} {:>7} {:>12} {:>12} {:>12} {:>12}",
                "case", "gap mm", "rx in W", "rx out W", "m2 out W", "total W"
            )?;
            for c in &self.gap_study {
                writeln!(
                    f,
                    "{:<6} {:>7.0} {:>12.4} {:>12.4} {:>12.4} {:>12.4}",
                    c.case_label,
                    c.gap_mm,
                    c.measured_rx_input_w,
                    c.measured_rx_output_w,
                    c.measured_m2_output_w,
                    c.measured_total_output_w
                )?;
                writeln!(
                    f,
                    "{:<6} {:>7} {:>12.2} {:>12.2} {:>12.2} {:>12.2}  (reference; deltas {:+.2}/{:+.2}/{:+.2} W)",
                    "",
                    "",
                    c.reference.rx_input_w,
                    c.reference.rx_output_w,
                    c.reference.m2_output_w,
                    c.reference.total_output_w,
                    c.measured_rx_input_w - c.reference.rx_input_w,
                    c.measured_rx_output_w - c.reference.rx_output_w,
                    c.measured_m2_output_w - c.reference.m2_output_w,
                )?;
            }
        }
        for c in &self.checks {
            writeln!(f, "{}", c)?;
        }
        Ok(())
    }
}

pub fn packet_counts(trace: &Trace) -> PacketCounts {
    let mut counts = PacketCounts::default();
    for e in &trace.events {
        match e {
            TraceEvent::PacketSent { .. } => counts.sent += 1,
            TraceEvent::PacketAccepted { .. } => counts.accepted += 1,
            TraceEvent::PacketRejected { .. } => counts.rejected += 1,
            TraceEvent::PacketDeferred { .. } => counts.deferred += 1,
            _ => {}
        }
    }
    counts
}

/// Tallies decision events per receiving router, in router order; routers
/// that observed nothing are omitted.
pub fn receiver_counts(trace: &Trace) -> Vec<ReceiverCounts> {
    let mut out: Vec<ReceiverCounts> = trace
        .meta
        .routers
        .iter()
        .map(|r| ReceiverCounts {
            id: r.id.clone(),
            ..ReceiverCounts::default()
        })
        .collect();
    for e in &trace.events {
        let (router, slot) = match e {
            TraceEvent::PacketAccepted { router, .. } => (router, 0),
            TraceEvent::PacketRejected { router, .. } => (router, 1),
            TraceEvent::PacketDeferred { router, .. } => (router, 2),
            _ => continue,
        };
        if let Some(rc) = out.iter_mut().find(|rc| &rc.id == router) {
            match slot {
                0 => rc.accepted += 1,
                1 => rc.rejected += 1,
                _ => rc.deferred += 1,
            }
        }
    }
    out.retain(|rc| rc.observed() > 0);
    out
}

/// Counts samples from `after` on where a supervised storage sits below its
/// threshold minus `band`.
pub fn count_threshold_violations(trace: &Trace, after: f64, band: f64) -> usize {
    let mut n = 0;
    for r in &trace.meta.routers {
        let Some(th) = r.threshold else { continue };
        let floor = th - band;
        n += trace
            .column_between(&format!("{}.V", r.id), after, trace.meta.duration)
            .iter()
            .filter(|&&(_, v)| v < floor - 1e-9)
            .count();
    }
    n
}

/// Exact per-receiver accept/reject counts, plus the structural guarantee
/// that every accepted frame bore the accepting router's own address.
pub fn check_selectivity(trace: &Trace, expect: &[(&str, usize, usize)]) -> CheckResult {
    let mut problems = Vec::new();
    for &(router, want_acc, want_rej) in expect {
        let own = trace
            .meta
            .routers
            .iter()
            .find(|r| r.id == router)
            .map(|r| r.address.clone())
            .unwrap_or_default();
        let mut acc = 0;
        let mut rej = 0;
        let mut cross = 0;
        for e in &trace.events {
            match e {
                TraceEvent::PacketAccepted {
                    router: r, address, ..
                } if r == router => {
                    acc += 1;
                    if *address != own {
                        cross += 1;
                    }
                }
                TraceEvent::PacketRejected { router: r, .. } if r == router => rej += 1,
                _ => {}
            }
        }
        if acc != want_acc || rej != want_rej || cross != 0 {
            problems.push(format!(
                "{}: accepted {} (want {}), rejected {} (want {}), cross {}",
                router, acc, want_acc, rej, want_rej, cross
            ));
        }
    }
    if problems.is_empty() {
        CheckResult::pass(
            "selectivity",
            format!(
                "all {} receivers accepted exactly their own frames",
                expect.len()
            ),
        )
    } else {
        CheckResult::fail("selectivity", problems.join("; "))
    }
}

/// Re-arm and payload-latch cadence of one receiver: counts must match and
/// consecutive spacings must sit within `tol` of the expected period.
pub fn check_mode_cadence(
    trace: &Trace,
    router: &str,
    rearm_spacing: f64,
    expected_rearms: usize,
    payload_spacing: f64,
    expected_payloads: usize,
    tol: f64,
) -> CheckResult {
    let times_to = |mode: RxMode| -> Vec<f64> {
        trace
            .events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::ModeChanged {
                    time,
                    router: r,
                    to,
                    ..
                } if r == router && *to == mode => Some(*time),
                _ => None,
            })
            .collect()
    };
    let spacing_ok = |times: &[f64], want: f64| -> bool {
        times.windows(2).all(|w| (w[1] - w[0] - want).abs() <= tol)
    };
    let rearms = times_to(RxMode::HeaderListen);
    let payloads = times_to(RxMode::PayloadReceive);
    let ok = rearms.len() == expected_rearms
        && payloads.len() == expected_payloads
        && spacing_ok(&rearms, rearm_spacing)
        && spacing_ok(&payloads, payload_spacing);
    CheckResult::from(
        "mode cadence",
        ok,
        format!(
            "{}: {} re-arms (want {}) every {:.1} ms, {} payload latches (want {}) every {:.1} ms",
            router,
            rearms.len(),
            expected_rearms,
            rearm_spacing * 1e3,
            payloads.len(),
            expected_payloads,
            payload_spacing * 1e3
        ),
    )
}

/// The `near` receiver must strictly beat the `far` one in both received
/// energy and time-averaged load voltage over the measurement window.
pub fn check_receive_ordering(trace: &Trace, near: &str, far: &str) -> CheckResult {
    let t0 = trace.meta.measure_start;
    let t1 = trace.meta.duration;
    let p_near = trace.average_power(&format!("{}.e_in", near), t0, t1);
    let p_far = trace.average_power(&format!("{}.e_in", far), t0, t1);
    let mean_v = |id: &str| {
        let samples = trace.column_between(&format!("{}.V", id), t0, t1);
        samples.iter().map(|&(_, v)| v).sum::<f64>() / samples.len() as f64
    };
    let v_near = mean_v(near);
    let v_far = mean_v(far);
    CheckResult::from(
        "near/far ordering",
        p_near > p_far && v_near > v_far,
        format!(
            "{}: {:.4} W / {:.3} V vs {}: {:.4} W / {:.3} V",
            near, p_near, v_near, far, p_far, v_far
        ),
    )
}

/// Every supervised storage must stay at or above threshold minus `band` at
/// every sample from `after` onward.
pub fn check_threshold_floors(trace: &Trace, after: f64, band: f64) -> CheckResult {
    let t1 = trace.meta.duration;
    let mut details = Vec::new();
    let mut ok = true;
    for r in &trace.meta.routers {
        let Some(th) = r.threshold else { continue };
        let samples = trace.column_between(&format!("{}.V", r.id), after, t1);
        let v_min = samples
            .iter()
            .map(|&(_, v)| v)
            .fold(f64::INFINITY, f64::min);
        let floor = th - band;
        if v_min < floor - 1e-9 {
            ok = false;
        }
        details.push(format!("{} min {:.3} V (limit {:.3})", r.id, v_min, floor));
    }
    CheckResult::from("threshold maintenance", ok, details.join(", "))
}

/// Measured figures of one gap-study case.
#[derive(Debug, Clone, Copy)]
pub struct GapCaseMeasurement {
    pub gap_mm: f64,
    pub rx_input_w: f64,
    pub rx_output_w: f64,
    pub m2_output_w: f64,
}

pub fn measure_gap_case(trace: &Trace, gap_mm: f64, rx: &str, m2: &str) -> GapCaseMeasurement {
    let t0 = trace.meta.measure_start;
    let t1 = trace.meta.duration;
    GapCaseMeasurement {
        gap_mm,
        rx_input_w: trace.average_power(&format!("{}.e_in", rx), t0, t1),
        rx_output_w: trace.average_power(&format!("{}.e_out", rx), t0, t1),
        m2_output_w: trace.average_power(&format!("{}.e_out", m2), t0, t1),
    }
}

/// The gap-study gates: receiver input falls monotonically with gap and is
/// zero from the cutoff on, the mid-gap input lands in its band, the backup
/// supply ramps up, and the combined output stays level. The level gate is
/// spread over mean <= 15%.
pub fn check_gap_study(cases: &[GapCaseMeasurement]) -> Vec<CheckResult> {
    let mut results = Vec::new();
    let inputs: Vec<f64> = cases.iter().map(|c| c.rx_input_w).collect();
    let monotone = inputs
        .windows(2)
        .all(|w| w[0] > w[1] || (w[0] == 0.0 && w[1] == 0.0));
    results.push(CheckResult::from(
        "rx input falls with gap",
        monotone,
        format!("{:?} W", inputs),
    ));
    if let Some(mid) = cases.iter().find(|c| c.gap_mm == 100.0) {
        results.push(CheckResult::from(
            "rx input at 100 mm",
            (0.15..=0.25).contains(&mid.rx_input_w),
            format!("{:.4} W, band 0.15..0.25", mid.rx_input_w),
        ));
    }
    if let Some(far) = cases.iter().find(|c| c.gap_mm >= 250.0) {
        results.push(CheckResult::from(
            "rx input at cutoff",
            far.rx_input_w == 0.0,
            format!("{:.6} W at {:.0} mm", far.rx_input_w, far.gap_mm),
        ));
    }
    let m2: Vec<f64> = cases.iter().map(|c| c.m2_output_w).collect();
    results.push(CheckResult::from(
        "m2 output rises with gap",
        m2.windows(2).all(|w| w[1] > w[0]),
        format!("{:?} W", m2),
    ));
    let totals: Vec<f64> = cases
        .iter()
        .map(|c| c.rx_output_w + c.m2_output_w)
        .collect();
    let t_min = totals.iter().cloned().fold(f64::INFINITY, f64::min);
    let t_max = totals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = totals.iter().sum::<f64>() / totals.len() as f64;
    let spread = if mean > 0.0 {
        (t_max - t_min) / mean
    } else {
        1.0
    };
    results.push(CheckResult::from(
        "total rx+m2 output level",
        spread <= 0.15,
        format!("{:?} W, spread {:.1}% of mean", totals, spread * 100.0),
    ));
    results
}

/// Builds the reference comparison rows for measured gap-study cases.
pub fn compare_gap_study(cases: &[GapCaseMeasurement]) -> Vec<GapStudyComparison> {
    cases
        .iter()
        .filter_map(|c| {
            GAP_STUDY_REFERENCE
                .iter()
                .find(|r| r.gap_mm == c.gap_mm)
                .map(|r| GapStudyComparison {
                    case_label: r.case_label.to_string(),
                    gap_mm: c.gap_mm,
                    measured_rx_input_w: c.rx_input_w,
                    measured_rx_output_w: c.rx_output_w,
                    measured_m2_output_w: c.m2_output_w,
                    measured_total_output_w: c.rx_output_w + c.m2_output_w,
                    reference: *r,
                })
        })
        .collect()
}

/// No router may ever sample with its payload input switch and an output
/// frame active together; checked over every sample row and, tighter than
/// the sample grid, over reconstructed packet intervals.
pub fn check_io_exclusion(trace: &Trace) -> CheckResult {
    let mut sample_hits = 0usize;
    for r in &trace.meta.routers {
        let (Some(s_col), Some(o_col)) = (
            trace.column_index(&format!("{}.S_rx", r.id)),
            trace.column_index(&format!("{}.out", r.id)),
        ) else {
            continue;
        };
        sample_hits += trace
            .samples
            .iter()
            .filter(|row| row[s_col] != 0.0 && row[o_col] != 0.0)
            .count();
    }
    let frame_s = trace.meta.bit_width * FRAME_BITS as f64;
    let payload_s = trace.meta.bit_width * (FRAME_BITS - HEADER_BITS) as f64;
    let mut interval_hits = 0usize;
    for r in &trace.meta.routers {
        let outs: Vec<(f64, f64)> = trace
            .events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::PacketSent { time, source, .. } if source == &r.id => {
                    Some((*time, *time + frame_s))
                }
                _ => None,
            })
            .collect();
        let ins: Vec<(f64, f64)> = trace
            .events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::PacketAccepted { time, router, .. } if router == &r.id => {
                    Some((*time, *time + payload_s))
                }
                _ => None,
            })
            .collect();
        for o in &outs {
            for i in &ins {
                if o.0 < i.1 - 1e-9 && i.0 < o.1 - 1e-9 {
                    interval_hits += 1;
                }
            }
        }
    }
    CheckResult::from(
        "input/output exclusion",
        sample_hits == 0 && interval_hits == 0,
        format!(
            "{} overlapping samples, {} overlapping packet intervals",
            sample_hits, interval_hits
        ),
    )
}

/// Every issued frame must have left a source at or above its output floor.
pub fn check_output_floors(trace: &Trace) -> CheckResult {
    let mut checked = 0usize;
    let mut violations = Vec::new();
    for e in &trace.events {
        let TraceEvent::PacketSent {
            time,
            source,
            source_voltage,
            ..
        } = e
        else {
            continue;
        };
        let floor = trace
            .meta
            .routers
            .iter()
            .find(|r| &r.id == source)
            .and_then(|r| r.output_floor);
        let Some(floor) = floor else { continue };
        checked += 1;
        if *source_voltage < floor - 1e-9 {
            violations.push(format!(
                "{} at {:.4} s: {:.3} V",
                source, time, source_voltage
            ));
        }
    }
    CheckResult::from(
        "output floors",
        violations.is_empty(),
        if violations.is_empty() {
            format!(
                "{} floor-gated frames all at or above their floors",
                checked
            )
        } else {
            violations.join("; ")
        },
    )
}

/// Looks for sustained intervals where `starved` sits below its floor while
/// `demanding` sits below its threshold; every such interval longer than
/// `min_len` must contain a frame from `backup`, and at least
/// `require_intervals` such intervals must exist at all.
#[allow(clippy::too_many_arguments)]
pub fn check_fallback(
    trace: &Trace,
    starved: &str,
    starved_below: f64,
    demanding: &str,
    demanding_below: f64,
    backup: &str,
    min_len: f64,
    require_intervals: usize,
) -> CheckResult {
    let v_starved = trace.column_between(&format!("{}.V", starved), 0.0, trace.meta.duration);
    let v_demand = trace.column_between(&format!("{}.V", demanding), 0.0, trace.meta.duration);
    debug_assert_eq!(v_starved.len(), v_demand.len());
    let backup_sends: Vec<f64> = trace
        .events
        .iter()
        .filter_map(|e| match e {
            TraceEvent::PacketSent { time, source, .. } if source == backup => Some(*time),
            _ => None,
        })
        .collect();
    let mut intervals: Vec<(f64, f64)> = Vec::new();
    let mut start: Option<f64> = None;
    for (&(t, vs), &(_, vd)) in v_starved.iter().zip(&v_demand) {
        let active = vs < starved_below && vd < demanding_below;
        match (active, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                intervals.push((s, t));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        intervals.push((s, trace.meta.duration));
    }
    let qualifying: Vec<(f64, f64)> = intervals
        .into_iter()
        .filter(|&(s, e)| e - s > min_len)
        .collect();
    let unserved: Vec<&(f64, f64)> = qualifying
        .iter()
        .filter(|&&(s, e)| !backup_sends.iter().any(|&t| t >= s && t <= e))
        .collect();
    let ok = unserved.is_empty() && qualifying.len() >= require_intervals;
    CheckResult::from(
        "fallback supply",
        ok,
        format!(
            "{} starved intervals > {:.0} ms, {} without a {} frame (need >= {} intervals)",
            qualifying.len(),
            min_len * 1e3,
            unserved.len(),
            backup,
            require_intervals
        ),
    )
}

/// Windowed average powers of two runs of the same scenario at different
/// steps must agree within `rel_tol` on every column that carries power.
pub fn check_convergence(coarse: &Trace, fine: &Trace, rel_tol: f64) -> CheckResult {
    let t0 = coarse.meta.measure_start;
    let t1 = coarse.meta.duration;
    let mut worst: (f64, String) = (0.0, String::from("none"));
    for r in &coarse.meta.routers {
        for kind in ["e_in", "e_out", "e_load", "e_loss"] {
            let col = format!("{}.{}", r.id, kind);
            let a = coarse.average_power(&col, t0, t1);
            let b = fine.average_power(&col, t0, t1);
            let scale = a.abs().max(b.abs());
            if scale < 1e-3 {
                continue;
            }
            let rel = (a - b).abs() / scale;
            if rel > worst.0 {
                worst = (rel, format!("{} ({:.4} vs {:.4} W)", col, a, b));
            }
        }
    }
    CheckResult::from(
        "step-halving convergence",
        worst.0 < rel_tol,
        format!(
            "worst relative change {:.3}% on {}",
            worst.0 * 100.0,
            worst.1
        ),
    )
}

/// Network energy identity over the whole run: rail supply must equal the
/// storage delta plus load and loss energies, within `rel_tol` of supply.
pub fn check_energy_closure(trace: &Trace, rel_tol: f64) -> CheckResult {
    let Some(last) = trace.samples.len().checked_sub(1) else {
        return CheckResult::fail("energy closure", "trace has no samples".to_string());
    };
    let mut supplied = 0.0;
    let mut storage_delta = 0.0;
    let mut load = 0.0;
    let mut loss = 0.0;
    for r in &trace.meta.routers {
        let v0 = trace.value(0, &format!("{}.V", r.id));
        let v1 = trace.value(last, &format!("{}.V", r.id));
        match r.capacitance {
            None => supplied += trace.value(last, &format!("{}.e_out", r.id)),
            Some(c) => storage_delta += 0.5 * c * (v1 * v1 - v0 * v0),
        }
        load += trace.value(last, &format!("{}.e_load", r.id));
        loss += trace.value(last, &format!("{}.e_loss", r.id));
    }
    // Storage routers may also source energy they held at t = 0; fold their
    // net draw into the supply side via the identity's sign.
    let residual = (supplied - (storage_delta + load + loss)).abs();
    let scale = supplied.abs().max(load).max(1e-12);
    CheckResult::from(
        "energy closure",
        residual <= rel_tol * scale,
        format!(
            "supplied {:.4} J = storage {:+.4} J + load {:.4} J + loss {:.4} J, residual {:.2e} J",
            supplied, storage_delta, load, loss, residual
        ),
    )
}
