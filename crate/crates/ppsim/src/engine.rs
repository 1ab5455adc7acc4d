//! Deterministic discrete-time engine tying the other modules together.
//!
//! Time advances in integer ticks of `dt`. Bit boundaries sit every
//! `bit_width / dt` ticks and carry all discrete work in a fixed order:
//! supervisors and timers, then frame cursors and receiver decisions, then
//! new issuance. A frame that needs its own storage topped up is therefore
//! latched as input before the same boundary can start an output, and a
//! boundary that both frees an output and completes an incoming header lets
//! the input through. Analog state integrates explicitly once per tick.
//!
//! All iteration is over vectors in declaration order; reruns with the same
//! topology and config produce byte-identical traces.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analog::{
    demodulate_bit, envelope_step, CapacitorState, DemodulatorConfig, WiredLink, WirelessLinkModel,
};
use crate::codec::{Address, BitFrame, DEFAULT_BIT_WIDTH, HEADER_BITS};
use crate::control::{
    arbitrate, output_permitted, FallbackTimer, ScriptedDemand, ThresholdSupervisor,
    DEFAULT_HYSTERESIS,
};
use crate::router::{OutgoingFrame, RxDecision, WirelessReceiver};
use crate::trace::{RouterMeta, RouterSample, Trace, TraceEvent, TraceMeta};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("topology: {0}")]
    Topology(String),
}

/// Randomized demand line attached to a router instead of a supervisor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptedDemandSpec {
    /// Per-tick probability of raising demand while low.
    pub flip_on: f64,
    /// Per-tick probability of dropping demand while high.
    pub flip_off: f64,
}

/// One router of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterSpec {
    pub id: String,
    pub address: Address,
    /// Ideal supply rail voltage; such routers have no storage dynamics.
    pub supply: Option<f64>,
    /// Storage capacitance, farads. Ignored for rail routers.
    pub capacitance: f64,
    pub initial_voltage: f64,
    /// Always-on resistive load across the storage, ohms.
    pub load_resistance: Option<f64>,
    /// Demand threshold watched by a storage supervisor, volts.
    pub threshold: Option<f64>,
    pub hysteresis: f64,
    /// Minimum storage voltage for sourcing a packet, volts.
    pub output_floor: Option<f64>,
    pub scripted_demand: Option<ScriptedDemandSpec>,
}

impl RouterSpec {
    pub fn storage(id: &str, address: Address, capacitance: f64, initial_voltage: f64) -> Self {
        RouterSpec {
            id: id.to_string(),
            address,
            supply: None,
            capacitance,
            initial_voltage,
            load_resistance: None,
            threshold: None,
            hysteresis: DEFAULT_HYSTERESIS,
            output_floor: None,
            scripted_demand: None,
        }
    }

    pub fn rail(id: &str, address: Address, volts: f64) -> Self {
        RouterSpec {
            supply: Some(volts),
            initial_voltage: volts,
            ..Self::storage(id, address, 1.0, volts)
        }
    }

    pub fn with_load(mut self, ohms: f64) -> Self {
        self.load_resistance = Some(ohms);
        self
    }

    pub fn with_threshold(mut self, volts: f64) -> Self {
        self.threshold = Some(volts);
        self
    }

    pub fn with_floor(mut self, volts: f64) -> Self {
        self.output_floor = Some(volts);
        self
    }

    pub fn with_scripted_demand(mut self, flip_on: f64, flip_off: f64) -> Self {
        self.scripted_demand = Some(ScriptedDemandSpec { flip_on, flip_off });
        self
    }
}

/// Point-to-point wired hop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WiredLinkSpec {
    pub id: String,
    pub source: String,
    pub dest: String,
    pub link: WiredLink,
}

/// Inductive hop from a source coil to one receiving coil. Several edges may
/// share a source; they then all carry that source's frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WirelessLinkSpec {
    pub id: String,
    pub source: String,
    pub dest: String,
    pub model: WirelessLinkModel,
}

/// Engages a route only after its primary route has starved the demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FallbackSpec {
    pub primary_route: String,
    /// Contiguous unserved-demand time before engaging, seconds.
    pub timeout: f64,
}

/// A dispatch rule: when the link's destination demands, its source may
/// serve it. `rank` orders competing routes at one source, lowest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteSpec {
    pub id: String,
    pub link: String,
    pub rank: u32,
    pub fallback: Option<FallbackSpec>,
}

impl RouteSpec {
    pub fn new(id: &str, link: &str, rank: u32) -> Self {
        RouteSpec {
            id: id.to_string(),
            link: link.to_string(),
            rank,
            fallback: None,
        }
    }

    pub fn with_fallback(mut self, primary_route: &str, timeout: f64) -> Self {
        self.fallback = Some(FallbackSpec {
            primary_route: primary_route.to_string(),
            timeout,
        });
        self
    }
}

/// Fixed-schedule issuance, independent of demand lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledFrame {
    pub source: String,
    pub dest: String,
    /// Frame start, counted in bit periods from t = 0.
    pub at_bit: u64,
}

/// Complete network description handed to [`run`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub bit_width: f64,
    pub demod: DemodulatorConfig,
    pub routers: Vec<RouterSpec>,
    pub wired_links: Vec<WiredLinkSpec>,
    pub wireless_links: Vec<WirelessLinkSpec>,
    pub routes: Vec<RouteSpec>,
    pub schedule: Vec<ScheduledFrame>,
}

impl Default for Topology {
    fn default() -> Self {
        Topology {
            bit_width: DEFAULT_BIT_WIDTH,
            demod: DemodulatorConfig::default(),
            routers: Vec::new(),
            wired_links: Vec::new(),
            wireless_links: Vec::new(),
            routes: Vec::new(),
            schedule: Vec::new(),
        }
    }
}

/// Run-level knobs, all in SI units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub duration: f64,
    pub sample_interval: f64,
    /// Seeds scripted demand lines; unused otherwise.
    pub seed: u64,
    pub scenario_name: String,
    /// Start of the steady measurement window, stamped into the trace.
    pub measure_start: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 1e-6,
            duration: 0.1,
            sample_interval: 1e-5,
            seed: 0,
            scenario_name: "custom".to_string(),
            measure_start: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LinkRef {
    Wired(usize),
    Wireless(usize),
}

impl LinkRef {
    fn is_wireless(self) -> bool {
        matches!(self, LinkRef::Wireless(_))
    }
}

#[derive(Debug)]
struct OutFlight {
    frame: OutgoingFrame,
    link: LinkRef,
}

#[derive(Debug)]
struct RouterRt {
    id: String,
    address: Address,
    rail: Option<f64>,
    cap: Option<CapacitorState>,
    load_resistance: Option<f64>,
    supervisor: Option<ThresholdSupervisor>,
    scripted: Option<ScriptedDemand>,
    demand: bool,
    output_floor: Option<f64>,
    rx: Option<WirelessReceiver>,
    rx_edge: Option<usize>,
    pending_bit: bool,
    outgoing: Option<OutFlight>,
    routes_from: Vec<usize>,
    energy_in: f64,
    energy_out: f64,
    energy_load: f64,
    energy_loss: f64,
}

impl RouterRt {
    fn voltage(&self) -> f64 {
        match self.rail {
            Some(v) => v,
            None => self.cap.expect("storage router has a capacitor").voltage,
        }
    }
}

#[derive(Debug)]
struct WiredRt {
    src: usize,
    dst: usize,
    link: WiredLink,
    /// Destination latched onto the current frame's payload.
    accepted: bool,
}

#[derive(Debug)]
struct WirelessRt {
    src: usize,
    dst: usize,
    model: WirelessLinkModel,
    envelope: f64,
}

#[derive(Debug)]
struct FallbackRt {
    timer: FallbackTimer,
    primary: usize,
}

#[derive(Debug)]
struct RouteRt {
    id: String,
    link: LinkRef,
    dst: usize,
    rank: u32,
    fallback: Option<FallbackRt>,
}

struct World {
    dt: f64,
    bit_width: f64,
    demod: DemodulatorConfig,
    routers: Vec<RouterRt>,
    wired: Vec<WiredRt>,
    wireless: Vec<WirelessRt>,
    routes: Vec<RouteRt>,
    route_served: Vec<bool>,
    wired_route: Vec<Option<usize>>,
    wireless_route: Vec<Option<usize>>,
    schedule: VecDeque<(u64, usize, usize, LinkRef)>,
    trace: Trace,
    // Per-tick scratch, reused to keep the hot loop allocation free.
    v: Vec<f64>,
    i_in: Vec<f64>,
    i_out: Vec<f64>,
    i_load: Vec<f64>,
    p_wl_in: Vec<f64>,
    p_wl_out: Vec<f64>,
    loss_w: Vec<f64>,
}

/// Simulates `topo` for `cfg.duration` and returns the recorded trace.
pub fn run(topo: &Topology, cfg: &SimConfig) -> Result<Trace, EngineError> {
    let (spb, sample_every, total) = grids(topo, cfg)?;
    let mut world = build_world(topo, cfg)?;
    for tick in 0..=total {
        let t = tick as f64 * cfg.dt;
        if tick % spb == 0 {
            world.control_tick(t);
            if tick > 0 {
                world.advance_frames(t);
                world.receiver_bits(t);
            }
            if tick < total {
                world.issuance(t, tick / spb);
            }
        }
        if tick % sample_every == 0 {
            world.sample_row(t);
        }
        if tick == total {
            break;
        }
        world.integrate(tick, spb);
    }
    Ok(world.trace)
}

/// Resolves the tick grids: steps per bit (must divide evenly and be even so
/// a mid-bit sample instant exists), samples, and total ticks.
fn grids(topo: &Topology, cfg: &SimConfig) -> Result<(u64, u64, u64), EngineError> {
    if !(cfg.dt > 0.0) {
        return Err(EngineError::Config(format!(
            "dt must be positive, got {}",
            cfg.dt
        )));
    }
    if !(topo.bit_width > 0.0) {
        return Err(EngineError::Config(format!(
            "bit width must be positive, got {}",
            topo.bit_width
        )));
    }
    if cfg.duration < 0.0 {
        return Err(EngineError::Config(format!(
            "duration must be non-negative, got {}",
            cfg.duration
        )));
    }
    let spb_f = topo.bit_width / cfg.dt;
    let spb = spb_f.round();
    if (spb_f - spb).abs() > 1e-6 || spb < 2.0 {
        return Err(EngineError::Config(format!(
            "dt {} does not divide the bit width {} into whole steps",
            cfg.dt, topo.bit_width
        )));
    }
    let spb = spb as u64;
    if spb % 2 != 0 {
        return Err(EngineError::Config(format!(
            "bit width {} over dt {} gives {} steps per bit; an even count is \
             needed for mid-bit sampling",
            topo.bit_width, cfg.dt, spb
        )));
    }
    let se_f = cfg.sample_interval / cfg.dt;
    let sample_every = se_f.round();
    if (se_f - sample_every).abs() > 1e-6 || sample_every < 1.0 {
        return Err(EngineError::Config(format!(
            "sample interval {} is not a whole number of dt {} steps",
            cfg.sample_interval, cfg.dt
        )));
    }
    let total = (cfg.duration / cfg.dt).round() as u64;
    Ok((spb, sample_every as u64, total))
}

fn build_world(topo: &Topology, cfg: &SimConfig) -> Result<World, EngineError> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, r) in topo.routers.iter().enumerate() {
        if index.insert(r.id.as_str(), i).is_some() {
            return Err(EngineError::Topology(format!(
                "duplicate router id {}",
                r.id
            )));
        }
    }
    let mut seen_addr: HashMap<Address, &str> = HashMap::new();
    for r in &topo.routers {
        if let Some(other) = seen_addr.insert(r.address, &r.id) {
            return Err(EngineError::Topology(format!(
                "routers {} and {} share address {}",
                other, r.id, r.address
            )));
        }
    }
    let lookup = |id: &str, what: &str| -> Result<usize, EngineError> {
        index
            .get(id)
            .copied()
            .ok_or_else(|| EngineError::Topology(format!("{} names unknown router {}", what, id)))
    };

    let mut routers: Vec<RouterRt> = Vec::with_capacity(topo.routers.len());
    for (i, spec) in topo.routers.iter().enumerate() {
        if spec.supply.is_none() && !(spec.capacitance > 0.0) {
            return Err(EngineError::Topology(format!(
                "router {} needs a positive storage capacitance",
                spec.id
            )));
        }
        if spec.threshold.is_some() && spec.scripted_demand.is_some() {
            return Err(EngineError::Topology(format!(
                "router {} has both a threshold supervisor and scripted demand",
                spec.id
            )));
        }
        let scripted = spec.scripted_demand.map(|s| {
            let seed = cfg.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            ScriptedDemand::new(seed, s.flip_on, s.flip_off)
        });
        routers.push(RouterRt {
            id: spec.id.clone(),
            address: spec.address,
            rail: spec.supply,
            cap: match spec.supply {
                Some(_) => None,
                None => Some(CapacitorState::new(spec.capacitance, spec.initial_voltage)),
            },
            load_resistance: spec.load_resistance,
            supervisor: spec
                .threshold
                .map(|th| ThresholdSupervisor::with_hysteresis(th, spec.hysteresis)),
            scripted,
            demand: false,
            output_floor: spec.output_floor,
            rx: None,
            rx_edge: None,
            pending_bit: false,
            outgoing: None,
            routes_from: Vec::new(),
            energy_in: 0.0,
            energy_out: 0.0,
            energy_load: 0.0,
            energy_loss: 0.0,
        });
    }

    let mut wired = Vec::with_capacity(topo.wired_links.len());
    let mut link_index: HashMap<&str, LinkRef> = HashMap::new();
    for (k, l) in topo.wired_links.iter().enumerate() {
        let src = lookup(&l.source, "wired link")?;
        let dst = lookup(&l.dest, "wired link")?;
        if src == dst {
            return Err(EngineError::Topology(format!(
                "link {} loops on itself",
                l.id
            )));
        }
        if link_index
            .insert(l.id.as_str(), LinkRef::Wired(k))
            .is_some()
        {
            return Err(EngineError::Topology(format!("duplicate link id {}", l.id)));
        }
        wired.push(WiredRt {
            src,
            dst,
            link: l.link,
            accepted: false,
        });
    }
    let mut wireless = Vec::with_capacity(topo.wireless_links.len());
    for (k, l) in topo.wireless_links.iter().enumerate() {
        let src = lookup(&l.source, "wireless link")?;
        let dst = lookup(&l.dest, "wireless link")?;
        if src == dst {
            return Err(EngineError::Topology(format!(
                "link {} loops on itself",
                l.id
            )));
        }
        if link_index
            .insert(l.id.as_str(), LinkRef::Wireless(k))
            .is_some()
        {
            return Err(EngineError::Topology(format!("duplicate link id {}", l.id)));
        }
        if routers[dst].rx.is_some() {
            return Err(EngineError::Topology(format!(
                "router {} has more than one incoming wireless link",
                topo.routers[dst].id
            )));
        }
        routers[dst].rx = Some(WirelessReceiver::new(routers[dst].address));
        routers[dst].rx_edge = Some(k);
        wireless.push(WirelessRt {
            src,
            dst,
            model: l.model,
            envelope: 0.0,
        });
    }

    let mut route_name: HashMap<&str, usize> = HashMap::new();
    let mut routes: Vec<RouteRt> = Vec::with_capacity(topo.routes.len());
    let mut wired_route = vec![None; wired.len()];
    let mut wireless_route = vec![None; wireless.len()];
    for (ri, r) in topo.routes.iter().enumerate() {
        let link = *link_index.get(r.link.as_str()).ok_or_else(|| {
            EngineError::Topology(format!("route {} names unknown link {}", r.id, r.link))
        })?;
        let (src, dst, slot) = match link {
            LinkRef::Wired(k) => (wired[k].src, wired[k].dst, &mut wired_route[k]),
            LinkRef::Wireless(k) => (wireless[k].src, wireless[k].dst, &mut wireless_route[k]),
        };
        if slot.is_some() {
            return Err(EngineError::Topology(format!(
                "link {} is claimed by more than one route",
                r.link
            )));
        }
        *slot = Some(ri);
        if route_name.insert(r.id.as_str(), ri).is_some() {
            return Err(EngineError::Topology(format!(
                "duplicate route id {}",
                r.id
            )));
        }
        if routers[dst].supervisor.is_none() && routers[dst].scripted.is_none() {
            return Err(EngineError::Topology(format!(
                "route {}: destination {} has no demand source",
                r.id, routers[dst].id
            )));
        }
        routers[src].routes_from.push(ri);
        routes.push(RouteRt {
            id: r.id.clone(),
            link,
            dst,
            rank: r.rank,
            fallback: None,
        });
    }
    for (ri, r) in topo.routes.iter().enumerate() {
        if let Some(f) = &r.fallback {
            let primary = *route_name.get(f.primary_route.as_str()).ok_or_else(|| {
                EngineError::Topology(format!(
                    "route {} falls back from unknown route {}",
                    r.id, f.primary_route
                ))
            })?;
            if primary == ri {
                return Err(EngineError::Topology(format!(
                    "route {} cannot be its own primary",
                    r.id
                )));
            }
            routes[ri].fallback = Some(FallbackRt {
                timer: FallbackTimer::from_times(f.timeout, topo.bit_width),
                primary,
            });
        }
    }

    let mut schedule: Vec<(u64, usize, usize, LinkRef)> = Vec::with_capacity(topo.schedule.len());
    for s in &topo.schedule {
        let src = lookup(&s.source, "schedule entry")?;
        let dst = lookup(&s.dest, "schedule entry")?;
        let wired_hit = wired.iter().position(|w| w.src == src && w.dst == dst);
        let wireless_hit = wireless.iter().position(|w| w.src == src && w.dst == dst);
        let link = match (wired_hit, wireless_hit) {
            (Some(k), None) => LinkRef::Wired(k),
            (None, Some(k)) => LinkRef::Wireless(k),
            (Some(_), Some(_)) => {
                return Err(EngineError::Topology(format!(
                    "schedule entry {} -> {} is ambiguous: both link kinds exist",
                    s.source, s.dest
                )))
            }
            (None, None) => {
                return Err(EngineError::Topology(format!(
                    "schedule entry {} -> {} has no connecting link",
                    s.source, s.dest
                )))
            }
        };
        schedule.push((s.at_bit, src, dst, link));
    }
    schedule.sort_by_key(|&(at, src, dst, _)| (at, src, dst));

    let meta = TraceMeta {
        scenario_name: cfg.scenario_name.clone(),
        dt: cfg.dt,
        bit_width: topo.bit_width,
        sample_interval: cfg.sample_interval,
        duration: cfg.duration,
        measure_start: cfg.measure_start,
        seed: Some(cfg.seed),
        routers: topo
            .routers
            .iter()
            .map(|r| RouterMeta {
                id: r.id.clone(),
                address: r.address.to_string(),
                capacitance: match r.supply {
                    Some(_) => None,
                    None => Some(r.capacitance),
                },
                load_resistance: r.load_resistance,
                threshold: r.threshold,
                output_floor: r.output_floor,
            })
            .collect(),
    };

    let n = routers.len();
    let route_count = routes.len();
    Ok(World {
        dt: cfg.dt,
        bit_width: topo.bit_width,
        demod: topo.demod,
        routers,
        wired,
        wireless,
        routes,
        route_served: vec![false; route_count],
        wired_route,
        wireless_route,
        schedule: schedule.into(),
        trace: Trace::new(meta),
        v: vec![0.0; n],
        i_in: vec![0.0; n],
        i_out: vec![0.0; n],
        i_load: vec![0.0; n],
        p_wl_in: vec![0.0; n],
        p_wl_out: vec![0.0; n],
        loss_w: vec![0.0; n],
    })
}

impl World {
    /// Supervisors, scripted demand, and fallback timers, in that order.
    /// Service flags collected since the previous control tick feed the
    /// timers here and are then cleared.
    fn control_tick(&mut self, t: f64) {
        for i in 0..self.routers.len() {
            let v = self.routers[i].voltage();
            let r = &mut self.routers[i];
            let now = if let Some(sup) = &mut r.supervisor {
                sup.update(v)
            } else if let Some(s) = &mut r.scripted {
                s.tick()
            } else {
                continue;
            };
            if now != r.demand {
                r.demand = now;
                let router = r.id.clone();
                self.trace.push_event(TraceEvent::DemandChanged {
                    time: t,
                    router,
                    asserted: now,
                });
            }
        }
        for ri in 0..self.routes.len() {
            let demand = self.routers[self.routes[ri].dst].demand;
            let Some(fb) = &mut self.routes[ri].fallback else {
                continue;
            };
            let served = self.route_served[fb.primary];
            let was = fb.timer.engaged();
            let now = fb.timer.tick(demand, served);
            if now != was {
                let route = self.routes[ri].id.clone();
                self.trace.push_event(TraceEvent::FallbackChanged {
                    time: t,
                    route,
                    engaged: now,
                });
            }
        }
        self.route_served.iter_mut().for_each(|s| *s = false);
    }

    /// Advances every in-flight frame past the bit that just ended, frees
    /// finished frames, then settles wired header decisions. Cursors move
    /// before any decision so a frame ending on this boundary no longer
    /// counts as an output in flight.
    fn advance_frames(&mut self, t: f64) {
        let mut header_done: Vec<usize> = Vec::new();
        for i in 0..self.routers.len() {
            let Some(of) = &mut self.routers[i].outgoing else {
                continue;
            };
            if of.frame.advance() {
                let of = self.routers[i].outgoing.take().expect("frame in flight");
                if let LinkRef::Wired(k) = of.link {
                    self.wired[k].accepted = false;
                }
            } else if of.frame.bits_sent() == HEADER_BITS {
                header_done.push(i);
            }
        }
        for i in header_done {
            let Some(of) = &self.routers[i].outgoing else {
                continue;
            };
            let LinkRef::Wired(k) = of.link else {
                continue;
            };
            let address = of.frame.address();
            let dst = self.wired[k].dst;
            let matches = address == self.routers[dst].address;
            let busy = self.routers[dst].outgoing.is_some();
            let accepted = matches && !busy;
            self.wired[k].accepted = accepted;
            let router = self.routers[dst].id.clone();
            let address = address.to_string();
            if accepted {
                if let Some(route) = self.wired_route[k] {
                    self.route_served[route] = true;
                }
                self.trace.push_event(TraceEvent::PacketAccepted {
                    time: t,
                    router,
                    address,
                });
            } else if matches {
                self.trace.push_event(TraceEvent::PacketDeferred {
                    time: t,
                    router,
                    address,
                });
            } else {
                self.trace.push_event(TraceEvent::PacketRejected {
                    time: t,
                    router,
                    address,
                });
            }
        }
    }

    /// Feeds every wireless receiver the bit that just ended, recorded at
    /// the middle of the bit period.
    fn receiver_bits(&mut self, t: f64) {
        for i in 0..self.routers.len() {
            if self.routers[i].rx.is_none() {
                continue;
            }
            let bit = self.routers[i].pending_bit;
            let busy = self.routers[i].outgoing.is_some();
            let r = &mut self.routers[i];
            let rx = r.rx.as_mut().expect("checked above");
            let before = rx.mode();
            let step = rx.step_bit(bit, busy);
            let after = rx.mode();
            let router = r.id.clone();
            if let Some(decision) = step.decision {
                let event = match decision {
                    RxDecision::Accepted(a) => {
                        if let Some(edge) = self.routers[i].rx_edge {
                            if let Some(route) = self.wireless_route[edge] {
                                self.route_served[route] = true;
                            }
                        }
                        TraceEvent::PacketAccepted {
                            time: t,
                            router: router.clone(),
                            address: a.to_string(),
                        }
                    }
                    RxDecision::Rejected(a) => TraceEvent::PacketRejected {
                        time: t,
                        router: router.clone(),
                        address: a.to_string(),
                    },
                    RxDecision::Deferred(a) => TraceEvent::PacketDeferred {
                        time: t,
                        router: router.clone(),
                        address: a.to_string(),
                    },
                };
                self.trace.push_event(event);
            }
            if before != after {
                self.trace.push_event(TraceEvent::ModeChanged {
                    time: t,
                    router,
                    from: before,
                    to: after,
                });
            }
        }
    }

    fn input_latched(&self, i: usize) -> bool {
        let wireless_in = self.routers[i]
            .rx
            .as_ref()
            .map(|rx| rx.mode().rectifier_on())
            .unwrap_or(false);
        wireless_in || self.wired.iter().any(|w| w.dst == i && w.accepted)
    }

    /// Starts new frames: the fixed schedule first, then demand routes.
    fn issuance(&mut self, t: f64, bit_now: u64) {
        while let Some(&(at, src, dst, link)) = self.schedule.front() {
            if at > bit_now || self.routers[src].outgoing.is_some() || self.input_latched(src) {
                break;
            }
            self.schedule.pop_front();
            self.issue_frame(src, dst, link, t);
        }
        for s in 0..self.routers.len() {
            if self.routers[s].routes_from.is_empty()
                || self.routers[s].outgoing.is_some()
                || self.input_latched(s)
            {
                continue;
            }
            let candidates: Vec<(u32, bool)> = self.routers[s]
                .routes_from
                .iter()
                .map(|&ri| {
                    let route = &self.routes[ri];
                    let engaged = match &route.fallback {
                        Some(fb) => fb.timer.engaged(),
                        None => true,
                    };
                    (route.rank, engaged && self.routers[route.dst].demand)
                })
                .collect();
            let Some(winner) = arbitrate(&candidates) else {
                continue;
            };
            let ri = self.routers[s].routes_from[winner];
            if let Some(floor) = self.routers[s].output_floor {
                if !output_permitted(self.routers[s].voltage(), floor) {
                    continue;
                }
            }
            let (dst, link) = (self.routes[ri].dst, self.routes[ri].link);
            self.issue_frame(s, dst, link, t);
        }
    }

    fn issue_frame(&mut self, src: usize, dst: usize, link: LinkRef, t: f64) {
        let frame = BitFrame::encode(self.routers[dst].address, self.bit_width);
        if let LinkRef::Wired(k) = link {
            self.wired[k].accepted = false;
        }
        let event = TraceEvent::PacketSent {
            time: t,
            source: self.routers[src].id.clone(),
            dest: self.routers[dst].id.clone(),
            address: self.routers[dst].address.to_string(),
            source_voltage: self.routers[src].voltage(),
        };
        self.routers[src].outgoing = Some(OutFlight {
            frame: OutgoingFrame::new(frame),
            link,
        });
        self.trace.push_event(event);
    }

    /// One explicit step over `[t, t + dt)`: envelopes advance toward the
    /// bit currently on the air, mid-bit samples feed the demodulators, and
    /// all power flows integrate against start-of-tick voltages.
    fn integrate(&mut self, tick: u64, spb: u64) {
        let dt = self.dt;
        let mid = tick % spb == spb / 2;
        for i in 0..self.routers.len() {
            self.v[i] = self.routers[i].voltage();
            self.i_in[i] = 0.0;
            self.i_out[i] = 0.0;
            self.i_load[i] = 0.0;
            self.p_wl_in[i] = 0.0;
            self.p_wl_out[i] = 0.0;
            self.loss_w[i] = 0.0;
        }

        for e in &mut self.wireless {
            let driven_bit = self.routers[e.src]
                .outgoing
                .as_ref()
                .filter(|of| of.link.is_wireless())
                .map(|of| of.frame.current_bit())
                .unwrap_or(false);
            if mid {
                self.routers[e.dst].pending_bit = demodulate_bit(e.envelope, 1.0, &self.demod);
            }
            let target = if driven_bit {
                e.model.drive_level(self.v[e.src])
            } else {
                0.0
            };
            e.envelope = envelope_step(e.envelope, target, dt, e.model.envelope_tau);

            if driven_bit {
                let nominal = e.model.received_power(self.v[e.src]);
                let receiving = self.routers[e.dst]
                    .rx
                    .as_ref()
                    .map(|rx| rx.mode().rectifier_on())
                    .unwrap_or(false);
                let (delivered, drain) = if receiving {
                    (nominal, e.model.loaded_drain(nominal))
                } else {
                    (0.0, e.model.unloaded_drain(nominal))
                };
                self.p_wl_in[e.dst] += delivered;
                self.p_wl_out[e.src] += drain;
                self.loss_w[e.src] += drain - delivered;
            }
        }

        for (k, w) in self.wired.iter().enumerate() {
            let carrying = w.accepted
                && self.routers[w.src]
                    .outgoing
                    .as_ref()
                    .map(|of| of.link == LinkRef::Wired(k) && of.frame.in_payload())
                    .unwrap_or(false);
            if carrying {
                let i = w.link.current(self.v[w.src], self.v[w.dst]);
                self.i_out[w.src] += i;
                self.i_in[w.dst] += i;
                self.loss_w[w.src] += (self.v[w.src] - self.v[w.dst]) * i;
            }
        }

        for i in 0..self.routers.len() {
            if let Some(r_load) = self.routers[i].load_resistance {
                self.i_load[i] = self.v[i] / r_load;
            }
            let r = &mut self.routers[i];
            r.energy_in += (self.v[i] * self.i_in[i] + self.p_wl_in[i]) * dt;
            r.energy_out += (self.v[i] * self.i_out[i] + self.p_wl_out[i]) * dt;
            r.energy_load += self.v[i] * self.i_load[i] * dt;
            r.energy_loss += self.loss_w[i] * dt;
            if let Some(cap) = &mut r.cap {
                cap.step(self.i_in[i], self.i_out[i] + self.i_load[i], dt);
                let net = self.p_wl_in[i] - self.p_wl_out[i];
                if net != 0.0 {
                    cap.inject_power(net, dt);
                }
            }
        }
    }

    fn sample_row(&mut self, t: f64) {
        let samples: Vec<RouterSample> = (0..self.routers.len())
            .map(|i| {
                let r = &self.routers[i];
                RouterSample {
                    voltage: r.voltage(),
                    energy_in: r.energy_in,
                    energy_out: r.energy_out,
                    energy_load: r.energy_load,
                    energy_loss: r.energy_loss,
                    input_closed: self.input_latched(i),
                    output_active: r.outgoing.is_some(),
                }
            })
            .collect();
        self.trace.push_sample(t, &samples);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::FRAME_BITS;

    fn addr(s: &str) -> Address {
        s.parse().unwrap()
    }

    fn cfg(duration: f64) -> SimConfig {
        SimConfig {
            duration,
            scenario_name: "engine-test".to_string(),
            ..SimConfig::default()
        }
    }

    #[test]
    fn empty_topology_runs_to_completion() {
        let topo = Topology::default();
        let trace = run(&topo, &cfg(1e-3)).unwrap();
        assert_eq!(trace.samples.len(), 101);
        assert!(trace.events.is_empty());
        assert_eq!(trace.columns, vec!["time_s".to_string()]);
    }

    #[test]
    fn zero_duration_yields_one_row() {
        let topo = Topology {
            routers: vec![RouterSpec::storage("a", addr("0001"), 1e-3, 10.0)],
            ..Topology::default()
        };
        let trace = run(&topo, &cfg(0.0)).unwrap();
        assert_eq!(trace.samples.len(), 1);
        assert_eq!(trace.value(0, "a.V"), 10.0);
        assert!(trace.events.is_empty());
    }

    #[test]
    fn odd_steps_per_bit_is_rejected() {
        let topo = Topology::default();
        let bad = SimConfig {
            dt: 20e-6,
            ..cfg(1e-3)
        };
        assert!(matches!(run(&topo, &bad), Err(EngineError::Config(_))));
    }

    #[test]
    fn non_integer_steps_per_bit_is_rejected() {
        let topo = Topology::default();
        let bad = SimConfig {
            dt: 3e-6,
            ..cfg(1e-3)
        };
        assert!(matches!(run(&topo, &bad), Err(EngineError::Config(_))));
    }

    #[test]
    fn duplicate_addresses_are_rejected() {
        let topo = Topology {
            routers: vec![
                RouterSpec::storage("a", addr("0001"), 1e-3, 10.0),
                RouterSpec::storage("b", addr("0001"), 1e-3, 10.0),
            ],
            ..Topology::default()
        };
        assert!(matches!(
            run(&topo, &cfg(0.0)),
            Err(EngineError::Topology(_))
        ));
    }

    #[test]
    fn second_wireless_input_is_rejected() {
        let topo = Topology {
            routers: vec![
                RouterSpec::rail("s1", addr("0001"), 12.0),
                RouterSpec::rail("s2", addr("0010"), 12.0),
                RouterSpec::storage("r", addr("0011"), 1e-3, 0.0),
            ],
            wireless_links: vec![
                WirelessLinkSpec {
                    id: "a".into(),
                    source: "s1".into(),
                    dest: "r".into(),
                    model: WirelessLinkModel::default(),
                },
                WirelessLinkSpec {
                    id: "b".into(),
                    source: "s2".into(),
                    dest: "r".into(),
                    model: WirelessLinkModel::default(),
                },
            ],
            ..Topology::default()
        };
        assert!(matches!(
            run(&topo, &cfg(0.0)),
            Err(EngineError::Topology(_))
        ));
    }

    /// A lone storage with a resistive load must track the analytic RC decay.
    #[test]
    fn engine_reproduces_rc_discharge() {
        let r_load = 47.0;
        let c = 1e-3;
        let rc = r_load * c;
        let topo = Topology {
            routers: vec![RouterSpec::storage("a", addr("0001"), c, 10.0).with_load(r_load)],
            ..Topology::default()
        };
        let trace = run(&topo, &cfg(rc)).unwrap();
        let last = trace.samples.len() - 1;
        let v_end = trace.value(last, "a.V");
        let exact = 10.0 * (-1.0f64).exp();
        assert!(
            (v_end - exact).abs() / exact < 0.005,
            "v_end {} vs {}",
            v_end,
            exact
        );
        let e_load = trace.value(last, "a.e_load");
        let delta_e = 0.5 * c * (10.0 * 10.0 - v_end * v_end);
        assert!((e_load - delta_e).abs() / delta_e < 0.005);
    }

    fn one_frame_topology() -> Topology {
        Topology {
            routers: vec![
                RouterSpec::rail("ws", addr("1110"), 12.0),
                RouterSpec::storage("r1", addr("0001"), 1e-3, 0.0),
            ],
            wireless_links: vec![WirelessLinkSpec {
                id: "air1".into(),
                source: "ws".into(),
                dest: "r1".into(),
                model: WirelessLinkModel::default(),
            }],
            schedule: vec![ScheduledFrame {
                source: "ws".into(),
                dest: "r1".into(),
                at_bit: 0,
            }],
            ..Topology::default()
        }
    }

    /// One scheduled frame delivers exactly the payload-window energy at the
    /// coupling model's power level, and the receiver's events line up with
    /// the frame structure.
    #[test]
    fn single_frame_delivers_analytic_energy() {
        let topo = one_frame_topology();
        let trace = run(&topo, &cfg(10.1e-3)).unwrap();

        let sent: Vec<_> = trace
            .events
            .iter()
            .filter(|e| matches!(e, TraceEvent::PacketSent { .. }))
            .collect();
        assert_eq!(sent.len(), 1);
        assert_eq!(sent[0].time(), 0.0);

        let accepted: Vec<_> = trace
            .events
            .iter()
            .filter(|e| matches!(e, TraceEvent::PacketAccepted { .. }))
            .collect();
        assert_eq!(accepted.len(), 1);
        assert!((accepted[0].time() - 7e-4).abs() < 1e-12);

        // 93 payload bits of 100 us at 0.5 W scaled by (12/9)^2.
        let p = 0.5 * (12.0f64 / 9.0).powi(2);
        let expect = p * 93.0 * 100e-6;
        let last = trace.samples.len() - 1;
        let e_in = trace.value(last, "r1.e_in");
        assert!((e_in - expect).abs() < 1e-9, "e_in {} vs {}", e_in, expect);
        let v_end = trace.value(last, "r1.V");
        let v_expect = (2.0 * expect / 1e-3).sqrt();
        assert!((v_end - v_expect).abs() < 1e-9);

        // The source drained the loaded share plus unloaded header highs.
        let e_out = trace.value(last, "ws.e_out");
        assert!(e_out > expect / 0.8 - 1e-9);
        let e_loss = trace.value(last, "ws.e_loss");
        assert!((e_out - e_in - e_loss).abs() < 1e-9);

        // Switch columns: the receiver's input latch shows in the samples
        // and no router ever samples with input and output both active.
        let s_rx = trace.column_index("r1.S_rx").unwrap();
        let latched = trace.samples.iter().filter(|row| row[s_rx] == 1.0).count();
        assert!(latched > 900, "payload latch spans most of the frame");
        for row in &trace.samples {
            for r in ["ws", "r1"] {
                let s = row[trace.column_index(&format!("{}.S_rx", r)).unwrap()];
                let o = row[trace.column_index(&format!("{}.out", r)).unwrap()];
                assert!(s * o == 0.0, "input and output both closed on {}", r);
            }
        }
    }

    #[test]
    fn foreign_frame_charges_nothing() {
        let mut topo = one_frame_topology();
        topo.routers
            .push(RouterSpec::storage("r2", addr("0010"), 1e-3, 0.0));
        topo.wireless_links.push(WirelessLinkSpec {
            id: "air2".into(),
            source: "ws".into(),
            dest: "r2".into(),
            model: WirelessLinkModel::default(),
        });
        let trace = run(&topo, &cfg(10.1e-3)).unwrap();
        let last = trace.samples.len() - 1;
        assert!(trace.value(last, "r1.e_in") > 0.0);
        assert_eq!(trace.value(last, "r2.e_in"), 0.0);
        assert_eq!(trace.value(last, "r2.V"), 0.0);
        let rejected = trace
            .events
            .iter()
            .any(|e| matches!(e, TraceEvent::PacketRejected { router, .. } if router == "r2"));
        assert!(rejected);
    }

    /// Two schedule entries for one source cannot overlap; the second waits
    /// for the line to free and starts on the next boundary.
    #[test]
    fn scheduled_frames_queue_behind_the_source() {
        let mut topo = one_frame_topology();
        topo.schedule.push(ScheduledFrame {
            source: "ws".into(),
            dest: "r1".into(),
            at_bit: 50,
        });
        let trace = run(&topo, &cfg(30e-3)).unwrap();
        let sent: Vec<f64> = trace
            .events
            .iter()
            .filter(|e| matches!(e, TraceEvent::PacketSent { .. }))
            .map(|e| e.time())
            .collect();
        assert_eq!(sent.len(), 2);
        assert_eq!(sent[0], 0.0);
        assert!((sent[1] - FRAME_BITS as f64 * 100e-6).abs() < 1e-12);
    }

    /// A router with its own frame in flight defers an incoming frame for
    /// its address and takes no payload energy from it.
    #[test]
    fn transmitting_router_defers_its_own_frame() {
        let topo = Topology {
            routers: vec![
                RouterSpec::rail("ws", addr("1110"), 12.0),
                RouterSpec::storage("mid", addr("0001"), 1e-3, 12.0),
                RouterSpec::storage("sink", addr("0010"), 1e-3, 0.0),
            ],
            wireless_links: vec![WirelessLinkSpec {
                id: "air".into(),
                source: "ws".into(),
                dest: "mid".into(),
                model: WirelessLinkModel::default(),
            }],
            wired_links: vec![WiredLinkSpec {
                id: "w".into(),
                source: "mid".into(),
                dest: "sink".into(),
                link: WiredLink::default(),
            }],
            schedule: vec![
                ScheduledFrame {
                    source: "ws".into(),
                    dest: "mid".into(),
                    at_bit: 0,
                },
                ScheduledFrame {
                    source: "mid".into(),
                    dest: "sink".into(),
                    at_bit: 0,
                },
            ],
            ..Topology::default()
        };
        let trace = run(&topo, &cfg(15e-3)).unwrap();
        let deferred = trace
            .events
            .iter()
            .any(|e| matches!(e, TraceEvent::PacketDeferred { router, .. } if router == "mid"));
        assert!(deferred);
        let last = trace.samples.len() - 1;
        assert_eq!(trace.value(last, "mid.e_in"), 0.0);
        assert!(trace.value(last, "sink.e_in") > 0.0);
    }

    /// Identical runs serialize to identical bytes, scripted demand included.
    #[test]
    fn reruns_are_byte_identical() {
        let topo = Topology {
            routers: vec![
                RouterSpec::rail("src", addr("0001"), 15.0),
                RouterSpec::storage("dst", addr("0010"), 10e-3, 9.0)
                    .with_load(100.0)
                    .with_scripted_demand(0.05, 0.05),
            ],
            wired_links: vec![WiredLinkSpec {
                id: "w".into(),
                source: "src".into(),
                dest: "dst".into(),
                link: WiredLink::default(),
            }],
            routes: vec![RouteSpec::new("feed", "w", 0)],
            ..Topology::default()
        };
        let config = SimConfig {
            seed: 7,
            ..cfg(50e-3)
        };
        let a = run(&topo, &config).unwrap();
        let b = run(&topo, &config).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert!(a
            .events
            .iter()
            .any(|e| matches!(e, TraceEvent::PacketSent { .. })));
    }

    /// Supplied energy must equal stored delta plus load plus loss, to well
    /// under the discretization budget.
    #[test]
    fn energy_bookkeeping_closes() {
        let topo = Topology {
            routers: vec![
                RouterSpec::rail("m", addr("0001"), 15.0),
                RouterSpec::storage("t", addr("0010"), 15e-3, 9.0)
                    .with_load(47.0)
                    .with_threshold(9.0),
            ],
            wired_links: vec![WiredLinkSpec {
                id: "w".into(),
                source: "m".into(),
                dest: "t".into(),
                link: WiredLink::default(),
            }],
            routes: vec![RouteSpec::new("feed", "w", 0)],
            ..Topology::default()
        };
        let trace = run(&topo, &cfg(100e-3)).unwrap();
        let last = trace.samples.len() - 1;
        let supplied = trace.value(last, "m.e_out");
        assert!(supplied > 0.0, "the route must have fired");
        let c = 15e-3;
        let dv = 0.5 * c * (trace.value(last, "t.V").powi(2) - trace.value(0, "t.V").powi(2));
        let load = trace.value(last, "t.e_load");
        let loss = trace.value(last, "m.e_loss") + trace.value(last, "t.e_loss");
        let closure = (supplied - (dv + load + loss)).abs();
        assert!(
            closure <= 1e-4 * supplied.max(1e-9),
            "closure {} of supplied {}",
            closure,
            supplied
        );
    }

    /// The demand route stops issuing once the destination recovers past
    /// threshold plus hysteresis, and resumes when it sags again.
    #[test]
    fn demand_route_respects_hysteresis() {
        let topo = Topology {
            routers: vec![
                RouterSpec::rail("m", addr("0001"), 15.0),
                RouterSpec::storage("t", addr("0010"), 15e-3, 8.8)
                    .with_load(47.0)
                    .with_threshold(9.0),
            ],
            wired_links: vec![WiredLinkSpec {
                id: "w".into(),
                source: "m".into(),
                dest: "t".into(),
                link: WiredLink::default(),
            }],
            routes: vec![RouteSpec::new("feed", "w", 0)],
            ..Topology::default()
        };
        let trace = run(&topo, &cfg(400e-3)).unwrap();
        let demand_changes: Vec<bool> = trace
            .events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::DemandChanged { asserted, .. } => Some(*asserted),
                _ => None,
            })
            .collect();
        assert!(
            demand_changes.len() >= 3,
            "demand must cycle: {:?}",
            demand_changes
        );
        assert_eq!(demand_changes[0], true);
        assert_eq!(demand_changes[1], false);
        // While demand is low no frames are issued.
        let mut asserted = false;
        let mut violations = 0;
        for e in &trace.events {
            match e {
                TraceEvent::DemandChanged { asserted: a, .. } => asserted = *a,
                TraceEvent::PacketSent { .. } if !asserted => violations += 1,
                _ => {}
            }
        }
        assert_eq!(violations, 0);
    }
}
