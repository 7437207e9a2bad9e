//! Discrete-event simulation of the reporting pipeline.
//!
//! Nodes sample on the T_N grid and send each reading at once. Static nodes
//! reach the coordinator over the fixed short-range link. A mobile node
//! hands its reading to the nearest static node in short-range reach (which
//! forwards it to the coordinator) or, with nobody around, sends it
//! straight to the server over the wide-area link. The coordinator uplinks
//! its buffer every T_I. Each hop is lost independently with the link's
//! `loss_prob`; there are no retransmissions.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::domain::{haversine_distance, GeoPoint, Measurement, NodeId, NodeKind, Quantity, ReportBatch, Timestamp};
use crate::field::FieldError;
use crate::indexes::{ApparentTemperatureModel, IndexEngine, IndexValue, ThermalModel};
use crate::rng::stream_rng;
use crate::scenario::{LinkModel, Network, Scenario};

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    SampleTick,
    UplinkTick,
    Delivery(Delivery),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Delivery {
    ToCoordinator(Measurement, Route),
    ToServer(Measurement, Route),
    Batch(ReportBatch),
}

#[derive(Debug)]
struct Scheduled {
    time_ms: i64,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // reversed, so the max-heap pops the earliest event first
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time_ms, other.seq).cmp(&(self.time_ms, self.seq))
    }
}

/// Time-ordered event queue. Events scheduled for the same millisecond
/// come out in insertion order.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Scheduled>,
    next_seq: u64,
}

impl EventQueue {
    pub fn new() -> EventQueue {
        EventQueue::default()
    }

    pub fn push(&mut self, time_ms: i64, event: Event) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Scheduled { time_ms, seq, event });
    }

    pub fn pop(&mut self) -> Option<(i64, Event)> {
        self.heap.pop().map(|s| (s.time_ms, s.event))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DeliveryOutcome {
    DeliveredToCoordinator,
    DeliveredToServer,
    Lost,
}

/// How a reading left its node.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Route {
    /// Static node straight to the coordinator.
    Direct,
    /// Mobile node through a static node in short-range reach.
    Relay(NodeId),
    /// Mobile node to the server over the wide-area link.
    WideArea,
}

impl Route {
    pub fn label(&self) -> String {
        match self {
            Route::Direct => "coordinator".to_string(),
            Route::Relay(id) => format!("relay:{id}"),
            Route::WideArea => "wide_area".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteDecision {
    pub outcome: DeliveryOutcome,
    pub route: Route,
    pub latency_s: f64,
}

/// Positions of the static nodes plus link parameters.
#[derive(Debug, Clone)]
pub struct Topology {
    pub coordinator: NodeId,
    pub coordinator_position: GeoPoint,
    pub static_nodes: Vec<(NodeId, GeoPoint)>,
    pub kinds: BTreeMap<NodeId, NodeKind>,
    pub network: Network,
}

impl Topology {
    pub fn from_scenario(s: &Scenario) -> Topology {
        let mut static_nodes: Vec<(NodeId, GeoPoint)> = s
            .nodes
            .iter()
            .filter_map(|n| n.descriptor.home_position.map(|p| (n.descriptor.node_id.clone(), p)))
            .collect();
        static_nodes.sort_by(|a, b| a.0.cmp(&b.0));
        Topology {
            coordinator: s.coordinator.clone(),
            coordinator_position: s.coordinator_position(),
            static_nodes,
            kinds: s.nodes.iter().map(|n| (n.descriptor.node_id.clone(), n.descriptor.kind)).collect(),
            network: s.network,
        }
    }

    fn position_of(&self, id: &NodeId) -> Option<GeoPoint> {
        self.static_nodes.iter().find(|(n, _)| n == id).map(|(_, p)| *p)
    }

    /// Nearest static node within `range_m` of `p`, ties to the lower id.
    pub fn nearest_static(&self, p: GeoPoint, range_m: f64) -> Option<&NodeId> {
        let mut best: Option<(&NodeId, f64)> = None;
        for (id, q) in &self.static_nodes {
            let d = haversine_distance(p, *q);
            if d <= range_m && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((id, d));
            }
        }
        best.map(|(id, _)| id)
    }
}

fn hop_survives(link: &LinkModel, rng: &mut ChaCha8Rng) -> bool {
    // one draw per hop keeps the stream aligned whatever the probabilities
    let u: f64 = rng.random();
    u >= link.loss_prob
}

/// Decides where a fresh reading goes and whether it gets there.
pub fn route_measurement(m: &Measurement, topo: &Topology, rng: &mut ChaCha8Rng) -> RouteDecision {
    let net = &topo.network;
    let lost = |route| RouteDecision {
        outcome: DeliveryOutcome::Lost,
        route,
        latency_s: 0.0,
    };
    let to_coordinator = |from: &NodeId, latency_s: f64, route: Route, rng: &mut ChaCha8Rng| {
        if *from == topo.coordinator {
            return RouteDecision {
                outcome: DeliveryOutcome::DeliveredToCoordinator,
                route,
                latency_s,
            };
        }
        let link = &net.short_range_fixed;
        let reachable = topo
            .position_of(from)
            .is_some_and(|p| haversine_distance(p, topo.coordinator_position) <= link.range_m);
        if reachable && hop_survives(link, rng) {
            RouteDecision {
                outcome: DeliveryOutcome::DeliveredToCoordinator,
                route,
                latency_s: latency_s + link.latency_s,
            }
        } else {
            lost(route)
        }
    };

    match topo.kinds.get(&m.node_id) {
        Some(NodeKind::Mobile) => {
            let link = &net.short_range_mobile;
            match topo.nearest_static(m.position, link.range_m) {
                Some(relay) => {
                    let route = Route::Relay(relay.clone());
                    if hop_survives(link, rng) {
                        to_coordinator(relay, link.latency_s, route, rng)
                    } else {
                        lost(route)
                    }
                }
                None => {
                    let link = &net.wide_area;
                    if hop_survives(link, rng) {
                        RouteDecision {
                            outcome: DeliveryOutcome::DeliveredToServer,
                            route: Route::WideArea,
                            latency_s: link.latency_s,
                        }
                    } else {
                        lost(Route::WideArea)
                    }
                }
            }
        }
        Some(_) => to_coordinator(&m.node_id, 0.0, Route::Direct, rng),
        None => lost(Route::Direct),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("no measurements buffered for this uplink")]
pub struct EmptyBatch;

/// Takes every buffered reading stamped before `uplink_time` out of
/// `buffer`, sorted by (timestamp, node, quantity). Readings that reached
/// the coordinator after their own window closed ride along with the next
/// uplink.
pub fn coordinator_uplink(
    coordinator_id: &NodeId,
    uplink_time: Timestamp,
    buffer: &mut Vec<Measurement>,
) -> Result<ReportBatch, EmptyBatch> {
    let (mut due, keep): (Vec<_>, Vec<_>) = buffer.drain(..).partition(|m| m.timestamp < uplink_time);
    *buffer = keep;
    if due.is_empty() {
        return Err(EmptyBatch);
    }
    due.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    Ok(ReportBatch {
        coordinator_id: coordinator_id.clone(),
        uplink_time,
        measurements: due,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LossPoint {
    NodeLink,
    Uplink,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fate {
    Delivered { received_ms: i64 },
    Lost(LossPoint),
}

/// Final fate of one reading.
#[derive(Debug, Clone, PartialEq)]
pub struct DeliveryRecord {
    pub sample_time: Timestamp,
    pub node_id: NodeId,
    pub quantity: Quantity,
    pub route: Route,
    pub fate: Fate,
}

fn format_ms(ms: i64) -> String {
    let secs = ms.div_euclid(1000);
    let iso = Timestamp(secs).to_iso8601();
    format!("{}.{:03}Z", iso.trim_end_matches('Z'), ms.rem_euclid(1000))
}

impl DeliveryRecord {
    /// `sample time,node,quantity,route,fate,receipt time`; the receipt
    /// time is empty for lost readings.
    pub fn to_record(&self) -> String {
        let (fate, received) = match self.fate {
            Fate::Delivered { received_ms } => ("delivered", format_ms(received_ms)),
            Fate::Lost(LossPoint::NodeLink) => ("lost_link", String::new()),
            Fate::Lost(LossPoint::Uplink) => ("lost_uplink", String::new()),
        };
        format!(
            "{},{},{},{},{},{}",
            self.sample_time.to_iso8601(),
            self.node_id,
            self.quantity.code(),
            self.route.label(),
            fate,
            received
        )
    }
}

/// One coordinator uplink attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct UplinkRecord {
    pub uplink_time: Timestamp,
    pub size: usize,
    pub lost: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub emitted: u64,
    pub delivered: u64,
    pub lost: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NodeStats {
    pub per_quantity: BTreeMap<Quantity, Counts>,
}

impl NodeStats {
    pub fn total(&self) -> Counts {
        self.per_quantity.values().fold(Counts::default(), |acc, c| Counts {
            emitted: acc.emitted + c.emitted,
            delivered: acc.delivered + c.delivered,
            lost: acc.lost + c.lost,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    /// Readings in the order the server received them.
    pub received: Vec<Measurement>,
    pub delivery_log: Vec<DeliveryRecord>,
    pub uplinks: Vec<UplinkRecord>,
    pub index_updates: Vec<IndexValue>,
    pub stats: BTreeMap<NodeId, NodeStats>,
}

impl SimOutput {
    pub fn totals(&self) -> Counts {
        self.stats.values().map(NodeStats::total).fold(Counts::default(), |acc, c| Counts {
            emitted: acc.emitted + c.emitted,
            delivered: acc.delivered + c.delivered,
            lost: acc.lost + c.lost,
        })
    }

    pub fn loss_rate(&self) -> f64 {
        let t = self.totals();
        if t.emitted == 0 {
            0.0
        } else {
            t.lost as f64 / t.emitted as f64
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Field(#[from] FieldError),
}

fn ms(t: Timestamp) -> i64 {
    t.0 * 1000
}

fn latency_ms(s: f64) -> i64 {
    (s * 1000.0).round() as i64
}

struct Sim<'a> {
    scenario: &'a Scenario,
    topo: Topology,
    queue: EventQueue,
    net_rng: ChaCha8Rng,
    buffer: Vec<Measurement>,
    in_flight_to_coordinator: usize,
    engine: IndexEngine,
    out: SimOutput,
}

impl Sim<'_> {
    fn count(&mut self, m: &Measurement) -> &mut Counts {
        self.out
            .stats
            .entry(m.node_id.clone())
            .or_default()
            .per_quantity
            .entry(m.quantity)
            .or_default()
    }

    fn lose(&mut self, m: &Measurement, route: Route, at: LossPoint) {
        self.count(m).lost += 1;
        self.out.delivery_log.push(DeliveryRecord {
            sample_time: m.timestamp,
            node_id: m.node_id.clone(),
            quantity: m.quantity,
            route,
            fate: Fate::Lost(at),
        });
    }

    fn receive(&mut self, m: Measurement, route: Route, now_ms: i64) {
        self.count(&m).delivered += 1;
        self.out.delivery_log.push(DeliveryRecord {
            sample_time: m.timestamp,
            node_id: m.node_id.clone(),
            quantity: m.quantity,
            route,
            fate: Fate::Delivered { received_ms: now_ms },
        });
        if self.topo.kinds.get(&m.node_id) != Some(&NodeKind::Mobile) {
            self.engine.ingest(&m);
        }
        self.out.received.push(m);
    }

    fn last_uplink(&self) -> Timestamp {
        let ti = self.scenario.uplink_period_s;
        let windows = (self.scenario.duration_s + ti - 1) / ti;
        self.scenario.start.offset(windows * ti)
    }
}

/// Runs `scenario` with the apparent-temperature comfort model.
pub fn run(scenario: &Scenario) -> Result<SimOutput, SimError> {
    run_with_model(scenario, Box::new(ApparentTemperatureModel))
}

pub fn run_with_model(scenario: &Scenario, model: Box<dyn ThermalModel + Send + Sync>) -> Result<SimOutput, SimError> {
    let mut nodes = scenario.node_states();
    // routes for relayed readings, keyed like the coordinator buffer
    let mut routes: BTreeMap<(Timestamp, NodeId, Quantity), Route> = BTreeMap::new();
    let mut sim = Sim {
        scenario,
        topo: Topology::from_scenario(scenario),
        queue: EventQueue::new(),
        net_rng: stream_rng(scenario.seed, &["network"]),
        buffer: Vec::new(),
        in_flight_to_coordinator: 0,
        engine: IndexEngine::new(model),
        out: SimOutput {
            received: Vec::new(),
            delivery_log: Vec::new(),
            uplinks: Vec::new(),
            index_updates: Vec::new(),
            stats: BTreeMap::new(),
        },
    };
    let end = scenario.end();
    let last_uplink = sim.last_uplink();
    let tn = scenario.sample_period_s;
    let ti = scenario.uplink_period_s;

    if scenario.start < end {
        sim.queue.push(ms(scenario.start), Event::SampleTick);
    }
    if scenario.start.offset(ti) <= last_uplink {
        sim.queue.push(ms(scenario.start.offset(ti)), Event::UplinkTick);
    }

    while let Some((now_ms, event)) = sim.queue.pop() {
        match event {
            Event::SampleTick => {
                let t = Timestamp(now_ms.div_euclid(1000));
                for node in nodes.iter_mut() {
                    if t < node.powered_since {
                        continue;
                    }
                    for m in node.sample(&scenario.field, t)? {
                        sim.count(&m).emitted += 1;
                        let decision = route_measurement(&m, &sim.topo, &mut sim.net_rng);
                        let at = now_ms + latency_ms(decision.latency_s);
                        match decision.outcome {
                            DeliveryOutcome::Lost => sim.lose(&m, decision.route, LossPoint::NodeLink),
                            DeliveryOutcome::DeliveredToCoordinator => {
                                sim.in_flight_to_coordinator += 1;
                                sim.queue
                                    .push(at, Event::Delivery(Delivery::ToCoordinator(m, decision.route)));
                            }
                            DeliveryOutcome::DeliveredToServer => {
                                sim.queue.push(at, Event::Delivery(Delivery::ToServer(m, decision.route)));
                            }
                        }
                    }
                }
                let next = t.offset(tn);
                if next < end {
                    sim.queue.push(ms(next), Event::SampleTick);
                }
            }
            Event::Delivery(Delivery::ToCoordinator(m, route)) => {
                sim.in_flight_to_coordinator -= 1;
                routes.insert((m.timestamp, m.node_id.clone(), m.quantity), route);
                sim.buffer.push(m);
            }
            Event::Delivery(Delivery::ToServer(m, route)) => sim.receive(m, route, now_ms),
            Event::Delivery(Delivery::Batch(batch)) => {
                let uplink_time = batch.uplink_time;
                for m in batch.measurements {
                    let route = routes
                        .remove(&(m.timestamp, m.node_id.clone(), m.quantity))
                        .unwrap_or(Route::Direct);
                    sim.receive(m, route, now_ms);
                }
                let updates = sim.engine.update(uplink_time);
                sim.out.index_updates.extend(updates);
            }
            Event::UplinkTick => {
                let t = Timestamp(now_ms.div_euclid(1000));
                let coordinator = scenario.coordinator.clone();
                match coordinator_uplink(&coordinator, t, &mut sim.buffer) {
                    Ok(batch) => {
                        let link = sim.topo.network.wide_area;
                        let delivered = hop_survives(&link, &mut sim.net_rng);
                        sim.out.uplinks.push(UplinkRecord {
                            uplink_time: t,
                            size: batch.measurements.len(),
                            lost: !delivered,
                        });
                        if delivered {
                            sim.queue
                                .push(now_ms + latency_ms(link.latency_s), Event::Delivery(Delivery::Batch(batch)));
                        } else {
                            for m in batch.measurements {
                                let route = routes
                                    .remove(&(m.timestamp, m.node_id.clone(), m.quantity))
                                    .unwrap_or(Route::Direct);
                                sim.lose(&m, route, LossPoint::Uplink);
                            }
                        }
                    }
                    Err(EmptyBatch) => sim.out.uplinks.push(UplinkRecord {
                        uplink_time: t,
                        size: 0,
                        lost: false,
                    }),
                }
                let next = t.offset(ti);
                if next <= last_uplink || !sim.buffer.is_empty() || sim.in_flight_to_coordinator > 0 {
                    sim.queue.push(ms(next), Event::UplinkTick);
                }
            }
        }
    }
    Ok(sim.out)
}
