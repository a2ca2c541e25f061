//! Fixed-step spatial-queue engine.
//!
//! Each link holds vehicles in two stages: a free-flow traversal stage and a
//! FIFO exit queue. A link never holds more vehicles than its storage
//! capacity; a full link blocks discharge from upstream (spill-back).
//! Vehicles leave the network when they discharge onto their destination
//! stub.
//!
//! A step at clock `t` runs, in order: trip injection, meter release,
//! traversal-to-queue promotion, queue discharge (links in ascending id),
//! gridlock relief, then the clock advances by `dt`.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::sync::Arc;

use ordered::OrdF64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctrl::{Controller, MeterCommand, Observation, RateBounds};
use crate::demand::{DemandProfile, FutureDemand, Trip, TripClass};
use crate::error::SimError;
use crate::metrics::{self, Snapshot};
use crate::net::{LinkId, LinkKind, Network, NodeId, Region};

mod ordered {
    /// Total-ordered f64 for the Dijkstra heap.
    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct OrdF64(pub f64);

    impl Eq for OrdF64 {}

    impl PartialOrd for OrdF64 {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }

    impl Ord for OrdF64 {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            self.0.total_cmp(&other.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Step length, seconds.
    pub dt: f64,
    /// Discharge rate per lane while permitted, veh/s.
    pub saturation_flow: f64,
    /// Upper bound of the per-link route cost perturbation.
    pub route_noise: f64,
    /// A head vehicle blocked by a full downstream link for this long may
    /// take part in a gridlock rotation, seconds.
    pub stuck_time: f64,
    pub seed: u64,
    /// Recount every vehicle after each step.
    pub audit: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 1.0,
            saturation_flow: 0.5,
            route_noise: 0.3,
            stuck_time: 15.0,
            seed: 1,
            audit: true,
        }
    }
}

/// Dijkstra over `costs`, passing only through intersections.
pub fn shortest_path(
    net: &Network,
    origin: NodeId,
    destination: NodeId,
    costs: &[f64],
) -> Result<Vec<LinkId>, SimError> {
    let n = net.nodes().len();
    let mut dist = vec![f64::INFINITY; n];
    let mut via: Vec<Option<LinkId>> = vec![None; n];
    let mut heap = BinaryHeap::new();
    dist[origin.0] = 0.0;
    heap.push(Reverse((OrdF64(0.0), origin.0)));
    while let Some(Reverse((OrdF64(d), u))) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        if u == destination.0 {
            break;
        }
        if u != origin.0 && !net.is_transit(NodeId(u)) {
            continue;
        }
        for &l in net.out_links(NodeId(u)) {
            let v = net.link(l).to.0;
            let nd = d + costs[l.0];
            if nd < dist[v] {
                dist[v] = nd;
                via[v] = Some(l);
                heap.push(Reverse((OrdF64(nd), v)));
            }
        }
    }
    if !dist[destination.0].is_finite() {
        return Err(SimError::Unreachable {
            from: origin,
            to: destination,
        });
    }
    let mut route = Vec::new();
    let mut at = destination;
    while at != origin {
        let l = via[at.0].expect("settled node has a predecessor");
        route.push(l);
        at = net.link(l).from;
    }
    route.reverse();
    Ok(route)
}

/// Shortest path under free-flow times scaled by `1 + ε`, with ε drawn
/// uniformly from `[0, noise)` for every link.
pub fn assign_route<R: Rng>(
    net: &Network,
    origin: NodeId,
    destination: NodeId,
    rng: &mut R,
    noise: f64,
) -> Result<Vec<LinkId>, SimError> {
    let costs: Vec<f64> = net
        .links()
        .iter()
        .map(|l| {
            let eps = if noise > 0.0 { rng.gen::<f64>() * noise } else { 0.0 };
            l.free_flow_time() * (1.0 + eps)
        })
        .collect();
    shortest_path(net, origin, destination, &costs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VehiclePhase {
    /// Held outside the network: internal origin queue or meter queue.
    Waiting,
    Traversing,
    Queued,
    Done,
}

#[derive(Debug, Clone)]
pub struct Vehicle {
    pub trip: usize,
    pub route: Vec<LinkId>,
    pub route_index: usize,
    pub link_entry_time: f64,
    pub phase: VehiclePhase,
}

impl Vehicle {
    pub fn current_link(&self) -> LinkId {
        self.route[self.route_index]
    }
}

/// Per-trip presence accounting. Time since `open_since` has not yet been
/// attributed; it belongs inside the protected region when `open_inside`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub trip_id: usize,
    pub generation_time: f64,
    pub exit_time: Option<f64>,
    pub inside_s: f64,
    pub outside_s: f64,
    pub open_since: f64,
    pub open_inside: bool,
}

impl TripRecord {
    fn switch(&mut self, t: f64, inside: bool) {
        if inside == self.open_inside {
            return;
        }
        self.close(t);
        self.open_inside = inside;
    }

    fn close(&mut self, t: f64) {
        let span = t - self.open_since;
        if self.open_inside {
            self.inside_s += span;
        } else {
            self.outside_s += span;
        }
        self.open_since = t;
    }
}

#[derive(Debug, Clone, Default)]
pub struct LinkState {
    /// `(vehicle, earliest exit time)`, non-decreasing in exit time.
    pub traversing: VecDeque<(u32, f64)>,
    pub queue: VecDeque<u32>,
    credit: f64,
    blocked_since: Option<f64>,
}

impl LinkState {
    pub fn occupancy(&self) -> usize {
        self.traversing.len() + self.queue.len()
    }
}

#[derive(Debug, Clone)]
pub struct MeterState {
    pub link: LinkId,
    pub min_rate: f64,
    pub max_rate: f64,
    pub current_rate: f64,
    pub bypass: bool,
    pub next_release_time: f64,
    last_release_time: Option<f64>,
    pub pending: VecDeque<u32>,
    pub released: u64,
}

impl MeterState {
    pub fn headway(&self) -> f64 {
        3600.0 / self.current_rate
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepEvents {
    pub generated: usize,
    pub released: usize,
    pub moved: usize,
    pub completed: usize,
    pub gridlock_moves: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleSummary {
    pub index: usize,
    pub observation: Observation,
    pub command: MeterCommand,
    pub completed: usize,
    pub before: Snapshot,
    pub after: Snapshot,
}

impl CycleSummary {
    pub fn meter_rate(&self) -> Option<f64> {
        match self.command {
            MeterCommand::Bypass => None,
            MeterCommand::Rate(r) => Some(r),
        }
    }
}

/// Signal control of one incoming link: plan index and permitted-phase mask.
#[derive(Debug, Clone, Copy)]
struct LinkSignal {
    plan: usize,
    mask: u64,
}

#[derive(Debug, Clone)]
pub struct SimState {
    net: Arc<Network>,
    config: SimConfig,
    trips: Vec<Trip>,
    forecast: Option<DemandProfile>,
    rng: ChaCha8Rng,
    pub clock: f64,
    links: Vec<LinkState>,
    meters: Vec<MeterState>,
    signal_of: Vec<Option<LinkSignal>>,
    phase: Vec<usize>,
    /// Queue of waiting vehicles per internal origin, indexed like `internal_od`.
    origin_queues: Vec<VecDeque<u32>>,
    origin_slot: Vec<Option<usize>>,
    meter_slot: Vec<Option<usize>>,
    vehicles: Vec<Vehicle>,
    records: Vec<TripRecord>,
    completed: Vec<(usize, f64)>,
    next_trip: usize,
    in_network: usize,
    waiting: usize,
    protected_vkt: f64,
    protected_lane_km: f64,
    feeder_lane_km: f64,
    gridlock_moves: usize,
    last_decision_count: f64,
    last_total_rate: f64,
    cycle_index: usize,
}

impl SimState {
    /// Empty network at clock 0, meters at their maximum rate, signals in
    /// phase 0, every trip pending.
    pub fn init(net: Arc<Network>, mut trips: Vec<Trip>, config: SimConfig) -> Result<Self, SimError> {
        if !(config.dt > 0.0) || !(config.saturation_flow > 0.0) {
            return Err(SimError::Input("dt and saturation_flow must be > 0".into()));
        }
        trips.sort_by(|a, b| a.generation_time.total_cmp(&b.generation_time).then(a.id.cmp(&b.id)));
        let n_nodes = net.nodes().len();
        let mut origin_slot = vec![None; n_nodes];
        for (i, od) in net.internal_od().iter().enumerate() {
            origin_slot[od.0] = Some(i);
        }
        let mut meter_slot = vec![None; n_nodes];
        let meters: Vec<MeterState> = net
            .meters()
            .iter()
            .enumerate()
            .map(|(i, m)| {
                meter_slot[net.link(m.link).from.0] = Some(i);
                MeterState {
                    link: m.link,
                    min_rate: m.min_rate,
                    max_rate: m.max_rate,
                    current_rate: m.max_rate,
                    bypass: false,
                    next_release_time: 0.0,
                    last_release_time: None,
                    pending: VecDeque::new(),
                    released: 0,
                }
            })
            .collect();
        let mut signal_of: Vec<Option<LinkSignal>> = vec![None; net.links().len()];
        for (p, plan) in net.signals().iter().enumerate() {
            for (k, phase) in plan.phases.iter().enumerate() {
                for l in &phase.permitted {
                    let s = signal_of[l.0].get_or_insert(LinkSignal { plan: p, mask: 0 });
                    s.mask |= 1 << k;
                }
            }
        }
        for t in &trips {
            let ok_origin = match t.class {
                TripClass::Endogenous => origin_slot[t.origin.0].is_some(),
                TripClass::Exogenous => meter_slot[t.origin.0].is_some(),
            };
            if !ok_origin || origin_slot.get(t.destination.0).copied().flatten().is_none() {
                return Err(SimError::Input(format!("trip {} has an invalid origin or destination", t.id)));
            }
        }
        let records = trips
            .iter()
            .map(|t| TripRecord {
                trip_id: t.id,
                generation_time: t.generation_time,
                exit_time: None,
                inside_s: 0.0,
                outside_s: 0.0,
                open_since: t.generation_time,
                open_inside: t.class == TripClass::Endogenous,
            })
            .collect();
        let meter_count = meters.len();
        let max_rate = meters.first().map_or(0.0, |m| m.max_rate);
        Ok(SimState {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            clock: 0.0,
            links: vec![LinkState::default(); net.links().len()],
            phase: vec![0; net.signals().len()],
            origin_queues: vec![VecDeque::new(); net.internal_od().len()],
            vehicles: Vec::with_capacity(trips.len()),
            records,
            completed: Vec::new(),
            next_trip: 0,
            in_network: 0,
            waiting: 0,
            protected_vkt: 0.0,
            protected_lane_km: net.lane_km(Region::Protected),
            feeder_lane_km: net.lane_km(Region::Feeder),
            gridlock_moves: 0,
            last_decision_count: 0.0,
            last_total_rate: max_rate * meter_count as f64,
            cycle_index: 0,
            forecast: None,
            meters,
            signal_of,
            origin_slot,
            meter_slot,
            trips,
            config,
            net,
        })
    }

    /// Enables the future-demand fields of observations.
    pub fn with_forecast(mut self, profile: DemandProfile) -> Self {
        self.forecast = Some(profile);
        self
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn trips(&self) -> &[Trip] {
        &self.trips
    }

    pub fn link_state(&self, id: LinkId) -> &LinkState {
        &self.links[id.0]
    }

    pub fn meters(&self) -> &[MeterState] {
        &self.meters
    }

    pub fn vehicles(&self) -> &[Vehicle] {
        &self.vehicles
    }

    pub fn records(&self) -> &[TripRecord] {
        &self.records
    }

    /// `(trip id, exit time)` in completion order.
    pub fn completed(&self) -> &[(usize, f64)] {
        &self.completed
    }

    pub fn generated(&self) -> usize {
        self.next_trip
    }

    pub fn in_network(&self) -> usize {
        self.in_network
    }

    pub fn waiting(&self) -> usize {
        self.waiting
    }

    pub fn gridlock_moves(&self) -> usize {
        self.gridlock_moves
    }

    pub fn bounds(&self) -> RateBounds {
        let m = self.meters.first();
        RateBounds {
            min_rate: m.map_or(crate::net::DEFAULT_MIN_RATE, |m| m.min_rate),
            max_rate: m.map_or(crate::net::DEFAULT_MAX_RATE, |m| m.max_rate),
            meters: self.meters.len(),
        }
    }

    /// Every trip generated, delivered, and nothing left waiting.
    pub fn is_finished(&self) -> bool {
        self.next_trip == self.trips.len() && self.in_network == 0 && self.waiting == 0
    }

    pub fn snapshot(&self) -> Snapshot {
        let mut protected = 0usize;
        let mut feeder = 0usize;
        for (l, s) in self.net.links().iter().zip(&self.links) {
            match l.region {
                Region::Protected => protected += s.occupancy(),
                Region::Feeder => feeder += s.occupancy(),
            }
        }
        let internal_waiting: usize = self.origin_queues.iter().map(VecDeque::len).sum();
        let meter_waiting: usize = self.meters.iter().map(|m| m.pending.len()).sum();
        Snapshot {
            clock: self.clock,
            protected_count: protected,
            protected_lane_km: self.protected_lane_km,
            feeder_count: feeder,
            feeder_lane_km: self.feeder_lane_km,
            internal_waiting,
            meter_waiting,
            completed: self.completed.len(),
            generated: self.next_trip,
            protected_vkt: self.protected_vkt,
        }
    }

    /// Sets every meter to `rate` clamped to its bounds and re-derives the
    /// release schedule from the new headway.
    pub fn set_meter_rate(&mut self, rate: f64) {
        let clock = self.clock;
        for m in &mut self.meters {
            m.current_rate = if rate.is_nan() {
                m.min_rate
            } else {
                rate.clamp(m.min_rate, m.max_rate)
            };
            m.bypass = false;
            m.next_release_time = match m.last_release_time {
                Some(last) => (last + m.headway()).max(clock),
                None => clock,
            };
        }
    }

    /// Deactivates metering: held vehicles enter whenever storage allows.
    pub fn set_bypass(&mut self) {
        for m in &mut self.meters {
            m.bypass = true;
        }
    }

    fn apply(&mut self, cmd: MeterCommand) {
        match cmd {
            MeterCommand::Bypass => {
                self.set_bypass();
                self.last_total_rate = self.bounds().total_max();
            }
            MeterCommand::Rate(r) => {
                self.set_meter_rate(r);
                let applied = self.meters.first().map_or(0.0, |m| m.current_rate);
                self.last_total_rate = applied * self.meters.len() as f64;
            }
        }
    }

    /// Observation for a decision taken now, forecasting `window` seconds.
    pub fn observe(&self, window: f64) -> Observation {
        let snap = self.snapshot();
        let future = match &self.forecast {
            Some(p) => p.future_demand(self.clock, window).unwrap_or_default(),
            None => FutureDemand::default(),
        };
        Observation {
            clock: self.clock,
            inner_density: metrics::inner_density(&snap).unwrap_or(0.0),
            feeder_density: metrics::feeder_density(&snap, true).unwrap_or(0.0),
            protected_count: snap.protected_count as f64,
            prev_protected_count: self.last_decision_count,
            prev_total_rate: self.last_total_rate,
            future,
        }
    }

    fn occupancy(&self, id: LinkId) -> usize {
        self.links[id.0].occupancy()
    }

    fn has_room(&self, id: LinkId) -> bool {
        self.occupancy(id) < self.net.link(id).storage_capacity
    }

    /// Puts vehicle `v` on the traversal stage of its current route link.
    fn enter(&mut self, v: u32, t: f64) {
        let veh = &mut self.vehicles[v as usize];
        let link = self.net.link(veh.route[veh.route_index]);
        veh.link_entry_time = t;
        veh.phase = VehiclePhase::Traversing;
        let inside = link.region == Region::Protected;
        self.records[veh.trip].switch(t, inside);
        self.links[link.id.0]
            .traversing
            .push_back((v, t + link.free_flow_time()));
    }

    fn inject(&mut self, t: f64, ev: &mut StepEvents) -> Result<(), SimError> {
        while self.next_trip < self.trips.len() && self.trips[self.next_trip].generation_time <= t {
            let idx = self.next_trip;
            let trip = self.trips[idx];
            let route = assign_route(
                &self.net,
                trip.origin,
                trip.destination,
                &mut self.rng,
                self.config.route_noise,
            )?;
            let v = self.vehicles.len() as u32;
            self.vehicles.push(Vehicle {
                trip: idx,
                route,
                route_index: 0,
                link_entry_time: t,
                phase: VehiclePhase::Waiting,
            });
            match trip.class {
                TripClass::Endogenous => {
                    let slot = self.origin_slot[trip.origin.0].expect("checked at init");
                    self.origin_queues[slot].push_back(v);
                }
                TripClass::Exogenous => {
                    let slot = self.meter_slot[trip.origin.0].expect("checked at init");
                    self.meters[slot].pending.push_back(v);
                }
            }
            self.waiting += 1;
            self.next_trip += 1;
            ev.generated += 1;
        }
        for slot in 0..self.origin_queues.len() {
            while let Some(&v) = self.origin_queues[slot].front() {
                let first = self.vehicles[v as usize].route[0];
                if !self.has_room(first) {
                    break;
                }
                self.origin_queues[slot].pop_front();
                self.waiting -= 1;
                self.in_network += 1;
                self.enter(v, t);
            }
        }
        Ok(())
    }

    fn release_meters(&mut self, t: f64, ev: &mut StepEvents) {
        for i in 0..self.meters.len() {
            let link = self.meters[i].link;
            loop {
                let m = &self.meters[i];
                let due = m.bypass || t >= m.next_release_time;
                if !due || m.pending.is_empty() || !self.has_room(link) {
                    break;
                }
                let m = &mut self.meters[i];
                let v = m.pending.pop_front().expect("non-empty");
                if !m.bypass {
                    m.last_release_time = Some(m.next_release_time);
                    m.next_release_time += m.headway();
                }
                m.released += 1;
                self.waiting -= 1;
                self.in_network += 1;
                ev.released += 1;
                self.enter(v, t);
            }
            let m = &mut self.meters[i];
            if m.next_release_time < t {
                m.next_release_time = t;
            }
        }
    }

    fn promote(&mut self, t: f64) {
        for (i, s) in self.links.iter_mut().enumerate() {
            while let Some(&(v, exit)) = s.traversing.front() {
                if exit > t {
                    break;
                }
                s.traversing.pop_front();
                s.queue.push_back(v);
                self.vehicles[v as usize].phase = VehiclePhase::Queued;
                let link = &self.net.links()[i];
                if link.region == Region::Protected {
                    self.protected_vkt += link.length / 1000.0;
                }
            }
        }
    }

    fn complete(&mut self, v: u32, t: f64) {
        let veh = &mut self.vehicles[v as usize];
        veh.phase = VehiclePhase::Done;
        let rec = &mut self.records[veh.trip];
        rec.close(t);
        rec.exit_time = Some(t);
        self.completed.push((rec.trip_id, t));
        self.in_network -= 1;
    }

    fn discharge(&mut self, t: f64, ev: &mut StepEvents) {
        let dt = self.config.dt;
        for (p, plan) in self.net.signals().iter().enumerate() {
            self.phase[p] = plan.phase_at(t);
        }
        for i in 0..self.links.len() {
            let permitted = match self.signal_of[i] {
                Some(s) => s.mask & (1 << self.phase[s.plan]) != 0,
                None => true,
            };
            if !permitted {
                self.links[i].credit = 0.0;
                continue;
            }
            let lanes = f64::from(self.net.links()[i].lanes);
            let per_step = self.config.saturation_flow * lanes * dt;
            let s = &mut self.links[i];
            s.credit = (s.credit + per_step).min(per_step.max(1.0));
            while self.links[i].credit >= 1.0 - 1e-9 {
                let Some(&v) = self.links[i].queue.front() else {
                    break;
                };
                let veh = &self.vehicles[v as usize];
                let next = veh.route[veh.route_index + 1];
                if self.net.link(next).kind == LinkKind::DestinationStub {
                    self.pop_head(i);
                    self.complete(v, t);
                    ev.completed += 1;
                } else if self.has_room(next) {
                    self.pop_head(i);
                    self.vehicles[v as usize].route_index += 1;
                    self.enter(v, t);
                    ev.moved += 1;
                } else {
                    self.links[i].blocked_since.get_or_insert(t);
                    break;
                }
                self.links[i].credit -= 1.0;
            }
        }
    }

    fn pop_head(&mut self, i: usize) -> u32 {
        let s = &mut self.links[i];
        s.blocked_since = None;
        s.queue.pop_front().expect("non-empty queue")
    }

    /// Rotates cycles of long-blocked head vehicles, each moving into the
    /// next (full) link of the cycle. Occupancies are unchanged.
    fn relieve_gridlock(&mut self, t: f64, ev: &mut StepEvents) {
        let n = self.links.len();
        let mut want: Vec<Option<usize>> = vec![None; n];
        let mut any = false;
        for (i, s) in self.links.iter().enumerate() {
            let Some(since) = s.blocked_since else { continue };
            if t - since < self.config.stuck_time {
                continue;
            }
            if let Some(&v) = s.queue.front() {
                let veh = &self.vehicles[v as usize];
                want[i] = Some(veh.route[veh.route_index + 1].0);
                any = true;
            }
        }
        if !any {
            return;
        }
        // 0 = unvisited, 1 = on current path, 2 = finished
        let mut color = vec![0u8; n];
        let mut cycles: Vec<Vec<usize>> = Vec::new();
        for start in 0..n {
            if want[start].is_none() || color[start] != 0 {
                continue;
            }
            let mut path = Vec::new();
            let mut at = start;
            loop {
                if color[at] == 1 {
                    let pos = path.iter().position(|&x| x == at).expect("on path");
                    cycles.push(path[pos..].to_vec());
                    break;
                }
                if color[at] == 2 {
                    break;
                }
                color[at] = 1;
                path.push(at);
                match want[at] {
                    Some(next) => at = next,
                    None => break,
                }
            }
            for p in path {
                color[p] = 2;
            }
        }
        for cycle in cycles {
            let heads: Vec<u32> = cycle.iter().map(|&l| self.pop_head(l)).collect();
            for v in heads {
                self.vehicles[v as usize].route_index += 1;
                self.enter(v, t);
                ev.gridlock_moves += 1;
                self.gridlock_moves += 1;
            }
        }
    }

    /// Recounts every vehicle and checks conservation and storage.
    pub fn audit(&self) -> Result<(), SimError> {
        let mut in_network = 0usize;
        for (l, s) in self.net.links().iter().zip(&self.links) {
            if s.occupancy() > l.storage_capacity {
                return Err(SimError::Storage {
                    link: l.id,
                    clock: self.clock,
                    occupancy: s.occupancy(),
                    capacity: l.storage_capacity,
                });
            }
            in_network += s.occupancy();
        }
        let waiting: usize = self.origin_queues.iter().map(VecDeque::len).sum::<usize>()
            + self.meters.iter().map(|m| m.pending.len()).sum::<usize>();
        let completed = self.completed.len();
        if self.next_trip != in_network + waiting + completed
            || in_network != self.in_network
            || waiting != self.waiting
        {
            return Err(SimError::Conservation {
                clock: self.clock,
                generated: self.next_trip,
                in_network,
                waiting,
                completed,
            });
        }
        Ok(())
    }

    /// Advances the simulation by one step of `config.dt`.
    pub fn step(&mut self) -> Result<StepEvents, SimError> {
        let t = self.clock;
        let mut ev = StepEvents::default();
        self.inject(t, &mut ev)?;
        self.release_meters(t, &mut ev);
        self.promote(t);
        self.discharge(t, &mut ev);
        self.relieve_gridlock(t, &mut ev);
        self.clock = t + self.config.dt;
        if self.config.audit {
            self.audit()?;
        }
        Ok(ev)
    }

    /// Queries `controller` once, applies its command, and steps through one
    /// control cycle of `cycle` seconds.
    pub fn run_cycle(
        &mut self,
        controller: &mut dyn Controller,
        cycle: f64,
    ) -> Result<CycleSummary, SimError> {
        let steps = (cycle / self.config.dt).round();
        if !(steps >= 1.0) || (steps * self.config.dt - cycle).abs() > 1e-9 {
            return Err(SimError::Input(format!(
                "cycle {cycle} s is not a positive multiple of dt {}",
                self.config.dt
            )));
        }
        let observation = self.observe(cycle);
        let command = controller.decide(&observation);
        self.apply_decision(observation, command, steps as usize)
    }

    /// Same as [`run_cycle`](Self::run_cycle) with a decision taken elsewhere.
    pub fn apply_decision(
        &mut self,
        observation: Observation,
        command: MeterCommand,
        steps: usize,
    ) -> Result<CycleSummary, SimError> {
        self.apply(command);
        self.last_decision_count = observation.protected_count;
        let before = self.snapshot();
        let mut completed = 0;
        for _ in 0..steps {
            completed += self.step()?.completed;
        }
        let after = self.snapshot();
        let index = self.cycle_index;
        self.cycle_index += 1;
        Ok(CycleSummary {
            index,
            observation,
            command: match command {
                MeterCommand::Bypass => MeterCommand::Bypass,
                MeterCommand::Rate(_) => {
                    MeterCommand::Rate(self.meters.first().map_or(0.0, |m| m.current_rate))
                }
            },
            completed,
            before,
            after,
        })
    }

    /// Runs whole cycles until every trip is delivered or `max_time` passes.
    pub fn run_to_end(
        &mut self,
        controller: &mut dyn Controller,
        cycle: f64,
        max_time: f64,
    ) -> Result<RunOutput, SimError> {
        let mut cycles = Vec::new();
        while !self.is_finished() && self.clock < max_time {
            cycles.push(self.run_cycle(controller, cycle)?);
        }
        Ok(RunOutput {
            truncated: !self.is_finished(),
            cycles,
            end_time: self.clock,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub cycles: Vec<CycleSummary>,
    pub truncated: bool,
    pub end_time: f64,
}

/// One row of the per-cycle state trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub cycle: usize,
    pub clock: f64,
    pub inner_density: f64,
    pub feeder_density: f64,
    pub completed: usize,
    pub meter_rate: Option<f64>,
}

pub fn trace_rows(cycles: &[CycleSummary]) -> Vec<TraceRow> {
    cycles
        .iter()
        .map(|c| TraceRow {
            cycle: c.index,
            clock: c.before.clock,
            inner_density: c.observation.inner_density,
            feeder_density: c.observation.feeder_density,
            completed: c.completed,
            meter_rate: c.meter_rate(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctrl::{FixedRate, NoControl};
    use crate::demand::{generate_trips, DemandProfile};
    use crate::net::{build_grid, GridSpec, Link, Meter, Node, NodeKind};

    fn desk() -> Arc<Network> {
        Arc::new(
            build_grid(&GridSpec {
                rows: 3,
                cols: 3,
                link_length: 150.0,
                lanes: 2,
                feeder_count: 8,
                internal_od_count: 16,
                cycle: 96.0,
            })
            .unwrap(),
        )
    }

    /// feeder origin -> A -> B -> destination point, no signals.
    fn corridor() -> Arc<Network> {
        let nodes = vec![
            Node { id: NodeId(0), kind: NodeKind::Intersection { row: 0, col: 0 } },
            Node { id: NodeId(1), kind: NodeKind::Intersection { row: 0, col: 1 } },
            Node { id: NodeId(2), kind: NodeKind::FeederOrigin },
            Node { id: NodeId(3), kind: NodeKind::InternalOd },
        ];
        let mk = |id, from, to, lanes, region, kind| {
            Link::new(LinkId(id), NodeId(from), NodeId(to), 170.0, lanes, region, kind, 13.89)
        };
        let links = vec![
            mk(0, 0, 1, 2, Region::Protected, LinkKind::Grid),
            mk(1, 2, 0, 2, Region::Feeder, LinkKind::Feeder),
            mk(2, 1, 3, 1, Region::Protected, LinkKind::DestinationStub),
            mk(3, 3, 1, 1, Region::Protected, LinkKind::OriginStub),
        ];
        let meters = vec![Meter { link: LinkId(1), min_rate: 50.0, max_rate: 300.0 }];
        Arc::new(
            Network::from_parts(nodes, links, meters, vec![], vec![NodeId(3)], vec![NodeId(2)])
                .unwrap(),
        )
    }

    fn exo(id: usize, t: f64) -> Trip {
        Trip {
            id,
            origin: NodeId(2),
            destination: NodeId(3),
            generation_time: t,
            class: TripClass::Exogenous,
        }
    }

    #[test]
    fn empty_trip_list_finishes_immediately() {
        let mut s = SimState::init(desk(), vec![], SimConfig::default()).unwrap();
        assert!(s.is_finished());
        let out = s.run_to_end(&mut NoControl, 96.0, 16_200.0).unwrap();
        assert!(out.cycles.is_empty());
        assert!(!out.truncated);
    }

    #[test]
    fn init_holds_all_trips_pending() {
        let net = Arc::new(build_grid(&GridSpec::default()).unwrap());
        let trips = generate_trips(&DemandProfile::default(), &net, 1).unwrap();
        let s = SimState::init(net, trips, SimConfig::default()).unwrap();
        assert_eq!(s.trips().len(), 17_000);
        assert_eq!(s.generated(), 0);
        assert!(s.meters().iter().all(|m| m.current_rate == 300.0 && !m.bypass));
        s.audit().unwrap();
    }

    #[test]
    fn single_vehicle_trace() {
        let mut s = SimState::init(corridor(), vec![exo(0, 0.0)], SimConfig::default()).unwrap();
        s.set_bypass();
        // t=0: released onto the feeder, 170 / 13.89 = 12.24 s of traversal.
        s.step().unwrap();
        assert_eq!(s.link_state(LinkId(1)).traversing.len(), 1);
        for _ in 1..13 {
            s.step().unwrap();
            assert_eq!(s.link_state(LinkId(1)).queue.len(), 0);
        }
        // t=13: queued and discharged onto the grid link in the same step.
        s.step().unwrap();
        assert_eq!(s.link_state(LinkId(0)).traversing.len(), 1);
        assert_eq!(s.vehicles()[0].link_entry_time, 13.0);
        while !s.is_finished() {
            s.step().unwrap();
        }
        assert_eq!(s.completed(), &[(0, 26.0)]);
        let r = s.records()[0];
        assert!((r.inside_s - 13.0).abs() < 1e-12 && (r.outside_s - 13.0).abs() < 1e-12);
    }

    #[test]
    fn meter_at_300_releases_every_12_s() {
        let trips = (0..40).map(|i| exo(i, 0.0)).collect();
        let mut s = SimState::init(corridor(), trips, SimConfig::default()).unwrap();
        s.set_meter_rate(300.0);
        let mut times = Vec::new();
        for _ in 0..120 {
            let t = s.clock;
            if s.step().unwrap().released > 0 {
                times.push(t);
            }
        }
        assert_eq!(times, (0..10).map(|k| 12.0 * k as f64).collect::<Vec<_>>());
    }

    #[test]
    fn rate_is_clamped() {
        let mut s = SimState::init(corridor(), vec![], SimConfig::default()).unwrap();
        s.set_meter_rate(10.0);
        assert_eq!(s.meters()[0].current_rate, 50.0);
        assert_eq!(s.meters()[0].headway(), 72.0);
        s.set_meter_rate(1e9);
        assert_eq!(s.meters()[0].headway(), 12.0);
    }

    #[test]
    fn rate_175_cumulative_releases() {
        let trips = (0..100).map(|i| exo(i, 0.0)).collect();
        let mut s = SimState::init(corridor(), trips, SimConfig::default()).unwrap();
        s.set_meter_rate(175.0);
        for _ in 0..600 {
            s.step().unwrap();
        }
        // release instants are ceil(k * 3600/175) for k = 0, 1, ...; count those < 600
        let h = 3600.0 / 175.0;
        let expected = (0..).take_while(|k| (*k as f64 * h).ceil() < 600.0).count() as u64;
        assert_eq!(s.meters()[0].released, expected);
        assert_eq!(expected, 30);
    }

    #[test]
    fn full_downstream_blocks_transfer() {
        let trips = (0..200).map(|i| exo(i, 0.0)).collect();
        let mut s = SimState::init(corridor(), trips, SimConfig::default()).unwrap();
        s.set_bypass();
        // Fill the grid link by hand and keep its queue from draining.
        let cap = s.network().link(LinkId(0)).storage_capacity;
        for k in 0..cap {
            s.links[0].traversing.push_back((u32::MAX - k as u32, f64::INFINITY));
        }
        s.config.audit = false;
        for _ in 0..40 {
            let ev = s.step().unwrap();
            assert_eq!(ev.moved, 0);
            assert_eq!(s.link_state(LinkId(0)).occupancy(), cap);
        }
    }

    #[test]
    fn zero_noise_matches_bfs_hop_count_on_uniform_grid() {
        let net = desk();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &o in net.internal_od() {
            for &d in net.internal_od() {
                if o == d {
                    continue;
                }
                let route = assign_route(&net, o, d, &mut rng, 0.0).unwrap();
                assert_eq!(net.link(route[0]).from, o);
                assert_eq!(net.link(*route.last().unwrap()).to, d);
                for w in route.windows(2) {
                    assert_eq!(net.link(w[0]).to, net.link(w[1]).from);
                }
                // uniform link lengths: shortest path = Manhattan distance + 2 stubs
                let pos = |n: NodeId| match net.node(n).kind {
                    NodeKind::Intersection { row, col } => (row as i64, col as i64),
                    _ => unreachable!(),
                };
                let a = pos(net.link(route[0]).to);
                let b = pos(net.link(*route.last().unwrap()).from);
                let manhattan = (a.0 - b.0).abs() + (a.1 - b.1).abs();
                assert_eq!(route.len() as i64, manhattan + 2);
            }
        }
    }

    #[test]
    fn adjacent_nodes_single_link_route() {
        let net = desk();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = assign_route(&net, NodeId(0), NodeId(1), &mut rng, 0.3).unwrap();
        assert_eq!(r.len(), 1);
    }

    #[test]
    fn same_seed_same_route() {
        let net = desk();
        let (o, d) = (net.internal_od()[0], net.internal_od()[8]);
        let a = assign_route(&net, o, d, &mut ChaCha8Rng::seed_from_u64(7), 0.3).unwrap();
        let b = assign_route(&net, o, d, &mut ChaCha8Rng::seed_from_u64(7), 0.3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unreachable_is_an_error() {
        let net = Arc::new(desk().with_isolated_od());
        let d = *net.internal_od().last().unwrap();
        let r = assign_route(&net, net.internal_od()[0], d, &mut ChaCha8Rng::seed_from_u64(1), 0.0);
        assert!(matches!(r, Err(SimError::Unreachable { .. })));
    }

    #[test]
    fn run_cycle_executes_whole_cycle() {
        let mut s = SimState::init(desk(), vec![], SimConfig::default()).unwrap();
        let c = s.run_cycle(&mut FixedRate(120.0), 96.0).unwrap();
        assert_eq!(s.clock, 96.0);
        assert_eq!(c.completed, 0);
        assert_eq!(c.after.protected_count, 0);
        assert!(s.run_cycle(&mut NoControl, 95.5).is_err());
    }

    #[test]
    fn npc_run_delivers_every_trip() {
        let net = desk();
        let profile = DemandProfile::new(2.0, 1500, 800).unwrap();
        let trips = generate_trips(&profile, &net, 2).unwrap();
        let n = trips.len();
        let mut s = SimState::init(net, trips, SimConfig::default()).unwrap();
        let out = s.run_to_end(&mut NoControl, 96.0, 2.0 * profile.horizon()).unwrap();
        assert!(!out.truncated);
        assert_eq!(out.cycles.iter().map(|c| c.completed).sum::<usize>(), n);
    }

    #[test]
    fn meter_throughput_converges_to_rate() {
        let trips = (0..400).map(|i| exo(i, 0.0)).collect();
        let mut s = SimState::init(corridor(), trips, SimConfig::default()).unwrap();
        s.set_meter_rate(137.0);
        let window = 3600.0;
        for _ in 0..window as usize {
            s.step().unwrap();
        }
        let released = s.meters()[0].released as f64;
        assert!((released - 137.0).abs() <= 1.0, "released {released}");
    }
}
