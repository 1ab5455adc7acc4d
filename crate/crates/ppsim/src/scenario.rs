//! Scenario files, bundled presets, and the runner that ties parsing,
//! simulation, checks, and artifact export together.
//!
//! A scenario is a versioned TOML document with explicit units in every
//! field name (`_ms`, `_us`, `_mm`, `_uf`, `_v`, `_ohm`). [`parse_scenario`]
//! validates it and [`Scenario::build`] lowers it into the SI-unit
//! [`Topology`] and [`SimConfig`] the engine consumes. Bundled presets are
//! embedded in the binary, so every preset runs without touching anything
//! outside the output directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analog::{rise_time_constant, LinkCalibration, WiredLink, WirelessLinkModel};
use crate::codec::Address;
use crate::engine::{
    run, EngineError, FallbackSpec, RouteSpec, RouterSpec, ScheduledFrame, ScriptedDemandSpec,
    SimConfig, Topology, WiredLinkSpec, WirelessLinkSpec,
};
use crate::report::{
    check_energy_closure, check_fallback, check_gap_study, check_io_exclusion, check_mode_cadence,
    check_output_floors, check_receive_ordering, check_selectivity, check_threshold_floors,
    compare_gap_study, measure_gap_case, GapCaseMeasurement, SummaryReport,
};
use crate::trace::Trace;

/// Format version accepted by [`parse_scenario`].
pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("serialize: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("unsupported scenario version {found}; this build reads version {SCENARIO_VERSION}")]
    Version { found: u32 },
    #[error("validation: {0}")]
    Validation(String),
    #[error("unknown preset {0}")]
    UnknownPreset(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn default_dt_us() -> f64 {
    1.0
}
fn default_sample_interval_us() -> f64 {
    10.0
}
fn default_bit_width_us() -> f64 {
    100.0
}
fn default_capacitance_uf() -> f64 {
    1000.0
}
fn default_hysteresis_v() -> f64 {
    0.1
}
fn default_resistance_ohm() -> f64 {
    5.0
}
fn default_diode_drop_v() -> f64 {
    0.6
}
fn default_coil_radius_mm() -> f64 {
    50.0
}
fn default_falloff_exponent() -> f64 {
    1.0
}
fn default_cutoff_mm() -> f64 {
    250.0
}
fn default_rise_time_us() -> f64 {
    25.0
}
fn default_drive_efficiency() -> f64 {
    0.8
}
fn default_cal_gap_mm() -> f64 {
    50.0
}
fn default_cal_drive_v() -> f64 {
    9.0
}
fn default_cal_power_w() -> f64 {
    0.5
}
fn default_stride_bits() -> u64 {
    100
}
fn default_fallback_timeout_ms() -> f64 {
    20.0
}

/// One router entry. Exactly one of `supply_v` (ideal rail) or the storage
/// fields applies; `threshold_v` and the `demand_flip_*` pair are mutually
/// exclusive demand sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterDef {
    pub id: String,
    pub address: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub supply_v: Option<f64>,
    #[serde(default = "default_capacitance_uf")]
    pub capacitance_uf: f64,
    #[serde(default)]
    pub initial_v: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub load_ohm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold_v: Option<f64>,
    #[serde(default = "default_hysteresis_v")]
    pub hysteresis_v: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_floor_v: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub demand_flip_on: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub demand_flip_off: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WiredLinkDef {
    pub id: String,
    pub source: String,
    pub dest: String,
    #[serde(default = "default_resistance_ohm")]
    pub resistance_ohm: f64,
    #[serde(default = "default_diode_drop_v")]
    pub diode_drop_v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WirelessLinkDef {
    pub id: String,
    pub source: String,
    pub dest: String,
    pub gap_mm: f64,
    #[serde(default)]
    pub lateral_mm: f64,
    #[serde(default = "default_coil_radius_mm")]
    pub coil_radius_mm: f64,
    #[serde(default = "default_falloff_exponent")]
    pub falloff_exponent: f64,
    #[serde(default = "default_cutoff_mm")]
    pub cutoff_mm: f64,
    #[serde(default = "default_rise_time_us")]
    pub rise_time_us: f64,
    #[serde(default = "default_drive_efficiency")]
    pub drive_efficiency: f64,
    #[serde(default = "default_cal_gap_mm")]
    pub cal_gap_mm: f64,
    #[serde(default = "default_cal_drive_v")]
    pub cal_drive_v: f64,
    #[serde(default = "default_cal_power_w")]
    pub cal_power_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteDef {
    pub id: String,
    pub link: String,
    #[serde(default)]
    pub rank: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fallback_primary: Option<String>,
    #[serde(default = "default_fallback_timeout_ms")]
    pub fallback_timeout_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduledDef {
    pub source: String,
    pub dest: String,
    pub at_bit: u64,
}

/// Expands into `count` scheduled frames cycling through `dests`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BurstDef {
    pub source: String,
    pub dests: Vec<String>,
    pub count: u64,
    #[serde(default)]
    pub start_bit: u64,
    #[serde(default = "default_stride_bits")]
    pub stride_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    pub name: String,
    pub duration_ms: f64,
    #[serde(default = "default_dt_us")]
    pub dt_us: f64,
    #[serde(default = "default_sample_interval_us")]
    pub sample_interval_us: f64,
    #[serde(default)]
    pub measure_start_ms: f64,
    #[serde(default = "default_bit_width_us")]
    pub bit_width_us: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, rename = "router")]
    pub routers: Vec<RouterDef>,
    #[serde(default, rename = "wired_link", skip_serializing_if = "Vec::is_empty")]
    pub wired_links: Vec<WiredLinkDef>,
    #[serde(
        default,
        rename = "wireless_link",
        skip_serializing_if = "Vec::is_empty"
    )]
    pub wireless_links: Vec<WirelessLinkDef>,
    #[serde(default, rename = "route", skip_serializing_if = "Vec::is_empty")]
    pub routes: Vec<RouteDef>,
    #[serde(default, rename = "scheduled", skip_serializing_if = "Vec::is_empty")]
    pub schedule: Vec<ScheduledDef>,
    #[serde(default, rename = "burst", skip_serializing_if = "Vec::is_empty")]
    pub bursts: Vec<BurstDef>,
}

/// Parses and validates a scenario document.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let sc: Scenario = toml::from_str(text)?;
    if sc.version != SCENARIO_VERSION {
        return Err(ScenarioError::Version { found: sc.version });
    }
    Ok(sc)
}

/// Reads a scenario file from disk and parses it.
pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    parse_scenario(&fs::read_to_string(path)?)
}

impl Scenario {
    pub fn to_toml(&self) -> Result<String, ScenarioError> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Lowers the scenario into engine inputs, converting every field to SI
    /// units. Cross-reference errors (unknown ids, duplicate addresses) are
    /// reported by the engine when the topology is instantiated.
    pub fn build(&self) -> Result<(Topology, SimConfig), ScenarioError> {
        for (field, value) in [
            ("dt_us", self.dt_us),
            ("sample_interval_us", self.sample_interval_us),
            ("bit_width_us", self.bit_width_us),
        ] {
            if !(value > 0.0) {
                return Err(ScenarioError::Validation(format!(
                    "{} must be positive, got {}",
                    field, value
                )));
            }
        }
        if self.duration_ms < 0.0 {
            return Err(ScenarioError::Validation(format!(
                "duration_ms must be non-negative, got {}",
                self.duration_ms
            )));
        }
        let mut routers = Vec::with_capacity(self.routers.len());
        for d in &self.routers {
            let address = Address::from_str(&d.address).map_err(|e| {
                ScenarioError::Validation(format!("router {}: bad address: {}", d.id, e))
            })?;
            if d.supply_v.is_none() && !(d.capacitance_uf > 0.0) {
                return Err(ScenarioError::Validation(format!(
                    "router {}: capacitance_uf must be positive, got {}",
                    d.id, d.capacitance_uf
                )));
            }
            let scripted_demand = match (d.demand_flip_on, d.demand_flip_off) {
                (Some(flip_on), Some(flip_off)) => Some(ScriptedDemandSpec { flip_on, flip_off }),
                (None, None) => None,
                _ => {
                    return Err(ScenarioError::Validation(format!(
                        "router {}: demand_flip_on and demand_flip_off must be set together",
                        d.id
                    )))
                }
            };
            routers.push(RouterSpec {
                id: d.id.clone(),
                address,
                supply: d.supply_v,
                capacitance: d.capacitance_uf * 1e-6,
                initial_voltage: d.supply_v.unwrap_or(d.initial_v),
                load_resistance: d.load_ohm,
                threshold: d.threshold_v,
                hysteresis: d.hysteresis_v,
                output_floor: d.output_floor_v,
                scripted_demand,
            });
        }
        let wired_links = self
            .wired_links
            .iter()
            .map(|d| WiredLinkSpec {
                id: d.id.clone(),
                source: d.source.clone(),
                dest: d.dest.clone(),
                link: WiredLink {
                    series_resistance: d.resistance_ohm,
                    diode_drop: d.diode_drop_v,
                    unidirectional: true,
                },
            })
            .collect();
        let wireless_links = self
            .wireless_links
            .iter()
            .map(|d| WirelessLinkSpec {
                id: d.id.clone(),
                source: d.source.clone(),
                dest: d.dest.clone(),
                model: WirelessLinkModel {
                    axial_gap: d.gap_mm * 1e-3,
                    lateral_offset: d.lateral_mm * 1e-3,
                    coil_radius: d.coil_radius_mm * 1e-3,
                    falloff_exponent: d.falloff_exponent,
                    cutoff_gap: d.cutoff_mm * 1e-3,
                    envelope_tau: rise_time_constant(d.rise_time_us * 1e-6),
                    drive_efficiency: d.drive_efficiency,
                    calibration: LinkCalibration {
                        gap: d.cal_gap_mm * 1e-3,
                        drive_voltage: d.cal_drive_v,
                        received_power: d.cal_power_w,
                    },
                },
            })
            .collect();
        let routes = self
            .routes
            .iter()
            .map(|d| RouteSpec {
                id: d.id.clone(),
                link: d.link.clone(),
                rank: d.rank,
                fallback: d.fallback_primary.as_ref().map(|primary| FallbackSpec {
                    primary_route: primary.clone(),
                    timeout: d.fallback_timeout_ms * 1e-3,
                }),
            })
            .collect();
        let mut schedule: Vec<ScheduledFrame> = self
            .schedule
            .iter()
            .map(|d| ScheduledFrame {
                source: d.source.clone(),
                dest: d.dest.clone(),
                at_bit: d.at_bit,
            })
            .collect();
        for b in &self.bursts {
            if b.dests.is_empty() {
                return Err(ScenarioError::Validation(format!(
                    "burst from {}: dests must not be empty",
                    b.source
                )));
            }
            for k in 0..b.count {
                schedule.push(ScheduledFrame {
                    source: b.source.clone(),
                    dest: b.dests[(k as usize) % b.dests.len()].clone(),
                    at_bit: b.start_bit + k * b.stride_bits,
                });
            }
        }
        let topo = Topology {
            bit_width: self.bit_width_us * 1e-6,
            routers,
            wired_links,
            wireless_links,
            routes,
            schedule,
            ..Topology::default()
        };
        let cfg = SimConfig {
            dt: self.dt_us * 1e-6,
            duration: self.duration_ms * 1e-3,
            sample_interval: self.sample_interval_us * 1e-6,
            seed: self.seed.unwrap_or(0),
            scenario_name: self.name.clone(),
            measure_start: self.measure_start_ms * 1e-3,
        };
        Ok((topo, cfg))
    }
}

const PRESET_SOURCES: [(&str, &str); 6] = [
    (
        "selectivity_3node",
        include_str!("../presets/selectivity_3node.toml"),
    ),
    (
        "sharing_case_i",
        include_str!("../presets/sharing_case_i.toml"),
    ),
    (
        "sharing_case_ii",
        include_str!("../presets/sharing_case_ii.toml"),
    ),
    (
        "sharing_case_iii",
        include_str!("../presets/sharing_case_iii.toml"),
    ),
    // The sweep preset expands to three gap runs; its embedded document is
    // the 50 mm base point.
    (
        "sharing_gap_sweep",
        include_str!("../presets/sharing_case_i.toml"),
    ),
    (
        "random_demand",
        include_str!("../presets/random_demand.toml"),
    ),
];

/// The gaps the bundled sweep runs, millimeters.
pub const SWEEP_GAPS_MM: [f64; 3] = [50.0, 100.0, 250.0];

pub fn preset_names() -> Vec<&'static str> {
    PRESET_SOURCES.iter().map(|&(n, _)| n).collect()
}

/// Returns the bundled scenario behind a preset name.
pub fn preset(name: &str) -> Result<Scenario, ScenarioError> {
    let Some(&(_, text)) = PRESET_SOURCES.iter().find(|&&(n, _)| n == name) else {
        return Err(ScenarioError::UnknownPreset(name.to_string()));
    };
    let mut sc = parse_scenario(text).expect("bundled presets always parse");
    sc.name = name.to_string();
    Ok(sc)
}

/// Command-line adjustments applied on top of a scenario before running.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Integration step, microseconds.
    pub dt_us: Option<f64>,
    /// Run length, milliseconds.
    pub duration_ms: Option<f64>,
    /// Replaces the axial gap of every wireless link, millimeters.
    pub gap_mm: Option<f64>,
    pub seed: Option<u64>,
    /// Sample every integration step instead of the scenario's interval.
    pub full_rate: bool,
    /// Directory for trace and summary artifacts; nothing is written when
    /// absent.
    pub out_dir: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, sc: &mut Scenario) {
        if let Some(dt) = self.dt_us {
            sc.dt_us = dt;
        }
        if let Some(duration) = self.duration_ms {
            sc.duration_ms = duration;
        }
        if let Some(gap) = self.gap_mm {
            for l in &mut sc.wireless_links {
                l.gap_mm = gap;
            }
        }
        if let Some(seed) = self.seed {
            sc.seed = Some(seed);
        }
        if self.full_rate {
            sc.sample_interval_us = sc.dt_us;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    /// Header row plus one decimal-ASCII row per sample.
    DelimitedTable,
    /// Hierarchical record with metadata, series, and events.
    StructuredRecord,
}

impl FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "delimited-table" | "csv" => Ok(ExportFormat::DelimitedTable),
            "structured-record" | "json" => Ok(ExportFormat::StructuredRecord),
            other => Err(format!(
                "unknown trace format {other}; use delimited-table or structured-record"
            )),
        }
    }
}

impl fmt::Display for ExportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExportFormat::DelimitedTable => "delimited-table",
            ExportFormat::StructuredRecord => "structured-record",
        })
    }
}

/// Writes a trace to `path`. Output depends only on the trace contents, so
/// identical runs export byte-identical files.
pub fn export_trace(trace: &Trace, format: ExportFormat, path: &Path) -> Result<(), ScenarioError> {
    let text = match format {
        ExportFormat::DelimitedTable => trace.to_csv(),
        ExportFormat::StructuredRecord => trace
            .to_json()
            .map_err(|e| ScenarioError::Validation(format!("trace not serializable: {}", e)))?,
    };
    fs::write(path, text)?;
    Ok(())
}

/// One finished run plus its summary.
#[derive(Debug)]
pub struct PresetRun {
    pub scenario: Scenario,
    pub trace: Trace,
    pub report: SummaryReport,
}

/// Everything a preset invocation produced. `passed` folds every check of
/// every report.
#[derive(Debug)]
pub struct PresetOutcome {
    pub name: String,
    pub runs: Vec<PresetRun>,
    /// Cross-run summary; present only for sweeps.
    pub aggregate: Option<SummaryReport>,
}

impl PresetOutcome {
    pub fn passed(&self) -> bool {
        self.runs.iter().all(|r| r.report.passed())
            && self.aggregate.as_ref().map_or(true, |a| a.passed())
    }
}

fn run_scenario(sc: &Scenario) -> Result<(Trace, SummaryReport), ScenarioError> {
    let (topo, cfg) = sc.build()?;
    let trace = run(&topo, &cfg)?;
    let report = SummaryReport::from_trace(&trace);
    Ok((trace, report))
}

/// The checks every run gets, preset or not.
pub fn attach_universal_checks(trace: &Trace, report: &mut SummaryReport) {
    report.checks.push(check_io_exclusion(trace));
    report.checks.push(check_output_floors(trace));
    if !report.insufficient_window {
        report.checks.push(check_energy_closure(trace, 0.01));
    }
}

fn attach_preset_checks(name: &str, trace: &Trace, report: &mut SummaryReport) {
    if report.insufficient_window {
        // Nothing meaningful ran; the summary already flags the window and
        // only the structural checks below still apply.
        attach_universal_checks(trace, report);
        return;
    }
    match name {
        "selectivity_3node" => {
            let bit = trace.meta.bit_width;
            report
                .checks
                .push(check_selectivity(trace, &[("r1", 50, 50), ("r2", 50, 50)]));
            for receiver in ["r1", "r2"] {
                report.checks.push(check_mode_cadence(
                    trace, receiver, 10e-3, 100, 20e-3, 50, bit,
                ));
            }
            report
                .checks
                .push(check_receive_ordering(trace, "r1", "r2"));
        }
        "sharing_case_i" => {
            report
                .checks
                .push(check_threshold_floors(trace, 50e-3, 0.1));
            report
                .checks
                .push(check_fallback(trace, "rx", 7.0, "l2", 5.0, "m2", 20e-3, 1));
        }
        _ => {}
    }
    attach_universal_checks(trace, report);
}

fn write_artifacts(run: &PresetRun, out_dir: Option<&Path>) -> Result<(), ScenarioError> {
    let Some(dir) = out_dir else { return Ok(()) };
    fs::create_dir_all(dir)?;
    export_trace(
        &run.trace,
        ExportFormat::DelimitedTable,
        &dir.join(format!("{}.csv", run.scenario.name)),
    )?;
    export_trace(
        &run.trace,
        ExportFormat::StructuredRecord,
        &dir.join(format!("{}.trace.json", run.scenario.name)),
    )?;
    let summary = run
        .report
        .to_json()
        .map_err(|e| ScenarioError::Validation(format!("summary not serializable: {}", e)))?;
    fs::write(
        dir.join(format!("{}.summary.json", run.scenario.name)),
        summary,
    )?;
    Ok(())
}

/// Runs one scenario document with overrides, universal checks only.
pub fn run_scenario_file(
    sc: Scenario,
    overrides: &Overrides,
) -> Result<PresetOutcome, ScenarioError> {
    let mut sc = sc;
    overrides.apply(&mut sc);
    let (trace, mut report) = run_scenario(&sc)?;
    attach_universal_checks(&trace, &mut report);
    let name = sc.name.clone();
    let run = PresetRun {
        scenario: sc,
        trace,
        report,
    };
    write_artifacts(&run, overrides.out_dir.as_deref())?;
    Ok(PresetOutcome {
        name,
        runs: vec![run],
        aggregate: None,
    })
}

/// Runs a bundled preset by name, with its embedded checks attached.
pub fn run_preset(name: &str, overrides: &Overrides) -> Result<PresetOutcome, ScenarioError> {
    if name == "sharing_gap_sweep" {
        let gaps: Vec<f64> = match overrides.gap_mm {
            Some(g) => vec![g],
            None => SWEEP_GAPS_MM.to_vec(),
        };
        let mut sub = overrides.clone();
        sub.gap_mm = None;
        return sweep_gaps(&gaps, &sub);
    }
    let mut sc = preset(name)?;
    overrides.apply(&mut sc);
    let (trace, mut report) = run_scenario(&sc)?;
    attach_preset_checks(name, &trace, &mut report);
    let run = PresetRun {
        scenario: sc,
        trace,
        report,
    };
    write_artifacts(&run, overrides.out_dir.as_deref())?;
    Ok(PresetOutcome {
        name: name.to_string(),
        runs: vec![run],
        aggregate: None,
    })
}

/// Runs the storage-sharing scenario once per gap, in parallel, and
/// aggregates the cross-gap checks. Reference deltas appear only for gaps
/// that match an embedded reference row.
pub fn sweep_gaps(gaps_mm: &[f64], overrides: &Overrides) -> Result<PresetOutcome, ScenarioError> {
    if gaps_mm.is_empty() {
        return Err(ScenarioError::Validation(
            "sweep needs at least one gap".to_string(),
        ));
    }
    let mut scenarios = Vec::with_capacity(gaps_mm.len());
    for &gap in gaps_mm {
        let mut sc = preset("sharing_case_i")?;
        sc.name = format!("sharing_gap_{:.0}mm", gap);
        let mut o = overrides.clone();
        o.gap_mm = Some(gap);
        o.apply(&mut sc);
        scenarios.push(sc);
    }
    let mut results: Vec<Option<Result<(Trace, SummaryReport), ScenarioError>>> =
        (0..scenarios.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (sc, slot) in scenarios.iter().zip(results.iter_mut()) {
            scope.spawn(move || {
                *slot = Some(run_scenario(sc));
            });
        }
    });
    let mut runs = Vec::with_capacity(scenarios.len());
    let mut cases: Vec<GapCaseMeasurement> = Vec::with_capacity(scenarios.len());
    for (sc, slot) in scenarios.into_iter().zip(results) {
        let (trace, mut report) = slot.expect("sweep thread finished")?;
        attach_universal_checks(&trace, &mut report);
        let gap = sc.wireless_links[0].gap_mm;
        cases.push(measure_gap_case(&trace, gap, "rx", "m2"));
        let run = PresetRun {
            scenario: sc,
            trace,
            report,
        };
        write_artifacts(&run, overrides.out_dir.as_deref())?;
        runs.push(run);
    }
    let mut aggregate = SummaryReport {
        scenario: "sharing_gap_sweep".to_string(),
        window_start_s: runs[0].trace.meta.measure_start,
        window_end_s: runs[0].trace.meta.duration,
        insufficient_window: runs.iter().any(|r| r.report.insufficient_window),
        routers: Vec::new(),
        packets: Default::default(),
        receivers: Vec::new(),
        threshold_violations: 0,
        checks: Vec::new(),
        gap_study: compare_gap_study(&cases),
    };
    if cases.len() >= 2 && !aggregate.insufficient_window {
        aggregate.checks.extend(check_gap_study(&cases));
    }
    if let Some(dir) = overrides.out_dir.as_deref() {
        fs::create_dir_all(dir)?;
        let text = aggregate
            .to_json()
            .map_err(|e| ScenarioError::Validation(format!("summary not serializable: {}", e)))?;
        fs::write(dir.join("sharing_gap_sweep.summary.json"), text)?;
    }
    Ok(PresetOutcome {
        name: "sharing_gap_sweep".to_string(),
        runs,
        aggregate: Some(aggregate),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_build_and_round_trip() {
        for name in preset_names() {
            let sc = preset(name).unwrap();
            assert_eq!(sc.name, name);
            let text = sc.to_toml().unwrap();
            let back = parse_scenario(&text).unwrap();
            assert_eq!(back, sc, "round trip changed preset {}", name);
            sc.build()
                .unwrap_or_else(|e| panic!("{} does not build: {}", name, e));
        }
    }

    #[test]
    fn unknown_preset_is_reported() {
        assert!(matches!(
            preset("no_such_thing"),
            Err(ScenarioError::UnknownPreset(_))
        ));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let text = "version = 2\nname = \"x\"\nduration_ms = 1.0\n";
        assert!(matches!(
            parse_scenario(text),
            Err(ScenarioError::Version { found: 2 })
        ));
    }

    #[test]
    fn defaults_fill_omitted_fields() {
        let text = r#"
            version = 1
            name = "tiny"
            duration_ms = 1.0

            [[router]]
            id = "a"
            address = "0001"
        "#;
        let sc = parse_scenario(text).unwrap();
        assert_eq!(sc.dt_us, 1.0);
        assert_eq!(sc.sample_interval_us, 10.0);
        assert_eq!(sc.bit_width_us, 100.0);
        assert_eq!(sc.routers[0].capacitance_uf, 1000.0);
        assert_eq!(sc.routers[0].hysteresis_v, 0.1);
        let (topo, cfg) = sc.build().unwrap();
        assert_eq!(topo.routers[0].capacitance, 1e-3);
        assert_eq!(cfg.duration, 1e-3);
    }

    #[test]
    fn bad_address_names_the_router() {
        let text = r#"
            version = 1
            name = "bad"
            duration_ms = 1.0

            [[router]]
            id = "weird"
            address = "00012"
        "#;
        let err = parse_scenario(text).unwrap().build().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("weird"), "{}", msg);
    }

    #[test]
    fn lone_demand_flip_is_rejected() {
        let text = r#"
            version = 1
            name = "bad"
            duration_ms = 1.0

            [[router]]
            id = "a"
            address = "0001"
            demand_flip_on = 0.01
        "#;
        let err = parse_scenario(text).unwrap().build().unwrap_err();
        assert!(err.to_string().contains("demand_flip_on"), "{}", err);
    }

    #[test]
    fn burst_expands_to_cycled_schedule() {
        let sc = preset("selectivity_3node").unwrap();
        let (topo, _) = sc.build().unwrap();
        assert_eq!(topo.schedule.len(), 100);
        assert_eq!(topo.schedule[0].dest, "r1");
        assert_eq!(topo.schedule[1].dest, "r2");
        assert_eq!(topo.schedule[0].at_bit, 0);
        assert_eq!(topo.schedule[1].at_bit, 100);
        assert_eq!(topo.schedule[99].at_bit, 9900);
        assert_eq!(topo.schedule[99].dest, "r2");
    }

    #[test]
    fn sharing_preset_builds_expected_network() {
        let sc = preset("sharing_case_i").unwrap();
        let (topo, cfg) = sc.build().unwrap();
        assert_eq!(topo.routers.len(), 6);
        assert_eq!(topo.wired_links.len(), 4);
        assert_eq!(topo.wireless_links.len(), 1);
        assert_eq!(topo.routes.len(), 5);
        assert_eq!(topo.wireless_links[0].model.axial_gap, 0.05);
        assert!(topo.routes.iter().any(|r| r
            .fallback
            .as_ref()
            .is_some_and(|f| f.primary_route == "gamma1")));
        assert_eq!(cfg.measure_start, 0.0);
        assert_eq!(cfg.duration, 0.4);
    }

    #[test]
    fn case_presets_differ_only_in_gap_and_name() {
        let mut i = preset("sharing_case_i").unwrap();
        let mut ii = preset("sharing_case_ii").unwrap();
        let mut iii = preset("sharing_case_iii").unwrap();
        assert_eq!(i.wireless_links[0].gap_mm, 50.0);
        assert_eq!(ii.wireless_links[0].gap_mm, 100.0);
        assert_eq!(iii.wireless_links[0].gap_mm, 250.0);
        for sc in [&mut i, &mut ii, &mut iii] {
            sc.name = "x".to_string();
            sc.wireless_links[0].gap_mm = 0.0;
        }
        assert_eq!(i, ii);
        assert_eq!(i, iii);
    }

    #[test]
    fn overrides_rewrite_the_scenario() {
        let mut sc = preset("sharing_case_i").unwrap();
        let o = Overrides {
            dt_us: Some(0.5),
            duration_ms: Some(10.0),
            gap_mm: Some(75.0),
            seed: Some(9),
            full_rate: true,
            out_dir: None,
        };
        o.apply(&mut sc);
        assert_eq!(sc.dt_us, 0.5);
        assert_eq!(sc.duration_ms, 10.0);
        assert_eq!(sc.wireless_links[0].gap_mm, 75.0);
        assert_eq!(sc.seed, Some(9));
        assert_eq!(sc.sample_interval_us, 0.5);
    }

    #[test]
    fn zero_duration_preset_flags_insufficient_window() {
        let overrides = Overrides {
            duration_ms: Some(0.0),
            ..Overrides::default()
        };
        let outcome = run_preset("sharing_case_i", &overrides).unwrap();
        let report = &outcome.runs[0].report;
        assert!(report.insufficient_window);
        assert!(report.to_string().contains("INSUFFICIENT WINDOW"));
        // Window checks are omitted rather than failed, so nothing fails.
        assert!(outcome.passed(), "{}", report);
    }

    #[test]
    fn export_formats_are_stable_and_parseable() {
        let sc = parse_scenario(
            r#"
            version = 1
            name = "flat"
            duration_ms = 1.0

            [[router]]
            id = "a"
            address = "0001"
            initial_v = 5.0
        "#,
        )
        .unwrap();
        let (topo, cfg) = sc.build().unwrap();
        let trace = run(&topo, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("t.csv");
        let json_path = dir.path().join("t.json");
        export_trace(&trace, ExportFormat::DelimitedTable, &csv_path).unwrap();
        export_trace(&trace, ExportFormat::StructuredRecord, &json_path).unwrap();
        let csv = fs::read_to_string(&csv_path).unwrap();
        assert!(csv.starts_with("time_s,a.V,"));
        let trace2 = run(&topo, &cfg).unwrap();
        export_trace(&trace2, ExportFormat::DelimitedTable, &csv_path).unwrap();
        assert_eq!(csv, fs::read_to_string(&csv_path).unwrap());
        let parsed = Trace::from_json(&fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(parsed.samples.len(), trace.samples.len());
    }

    #[test]
    fn format_names_parse() {
        assert_eq!(
            "delimited-table".parse::<ExportFormat>().unwrap(),
            ExportFormat::DelimitedTable
        );
        assert_eq!(
            "structured-record".parse::<ExportFormat>().unwrap(),
            ExportFormat::StructuredRecord
        );
        assert!("yaml".parse::<ExportFormat>().is_err());
    }
}
