//! Grid network with a single protected region, metered feeder links and
//! single-lane origin/destination stubs.
//!
//! Node layout: grid intersections come first (`row * cols + col`, row 0 is
//! the southern edge), followed by one external node per feeder link and one
//! node per internal origin/destination point.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::NetError;

/// Jam spacing per vehicle per lane, in meters.
pub const EFFECTIVE_VEHICLE_LENGTH: f64 = 7.0;
/// 50 km/h.
pub const DEFAULT_FREE_FLOW_SPEED: f64 = 13.89;
pub const DEFAULT_MIN_RATE: f64 = 50.0;
pub const DEFAULT_MAX_RATE: f64 = 300.0;
/// Green time per phase of the two-phase plan, seconds.
pub const DEFAULT_GREEN: f64 = 45.0;
/// All-red time following each green, seconds.
pub const DEFAULT_LOST_TIME: f64 = 3.0;
/// Stub attachments available per grid intersection (one per compass side).
pub const OD_SLOTS_PER_NODE: usize = 4;
pub const DOCUMENT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LinkId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "l{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Protected,
    Feeder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    /// Two-way street segment between adjacent intersections.
    Grid,
    /// Metered approach from outside the perimeter.
    Feeder,
    /// Internal origin point to its intersection.
    OriginStub,
    /// Intersection to an internal destination point.
    DestinationStub,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Intersection { row: usize, col: usize },
    FeederOrigin,
    InternalOd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub id: LinkId,
    pub from: NodeId,
    pub to: NodeId,
    pub length: f64,
    pub lanes: u32,
    pub region: Region,
    pub kind: LinkKind,
    pub free_flow_speed: f64,
    pub storage_capacity: usize,
}

impl Link {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: LinkId,
        from: NodeId,
        to: NodeId,
        length: f64,
        lanes: u32,
        region: Region,
        kind: LinkKind,
        free_flow_speed: f64,
    ) -> Self {
        Link {
            id,
            from,
            to,
            length,
            lanes,
            region,
            kind,
            free_flow_speed,
            storage_capacity: storage_capacity(length, lanes),
        }
    }

    pub fn free_flow_time(&self) -> f64 {
        self.length / self.free_flow_speed
    }

    pub fn lane_km(&self) -> f64 {
        self.length * f64::from(self.lanes) / 1000.0
    }
}

/// Vehicles a link can hold at jam spacing.
pub fn storage_capacity(length: f64, lanes: u32) -> usize {
    if !(length > 0.0) {
        return 0;
    }
    (length * f64::from(lanes) / EFFECTIVE_VEHICLE_LENGTH).floor() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub duration: f64,
    pub permitted: BTreeSet<LinkId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalPlan {
    pub node: NodeId,
    pub cycle: f64,
    pub phases: Vec<Phase>,
}

impl SignalPlan {
    /// Index of the phase active at `clock`.
    pub fn phase_at(&self, clock: f64) -> usize {
        let mut t = clock.rem_euclid(self.cycle);
        for (i, p) in self.phases.iter().enumerate() {
            if t < p.duration {
                return i;
            }
            t -= p.duration;
        }
        self.phases.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Meter {
    pub link: LinkId,
    pub min_rate: f64,
    pub max_rate: f64,
}

/// Arguments of [`build_grid`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub link_length: f64,
    pub lanes: u32,
    pub feeder_count: usize,
    pub internal_od_count: usize,
    pub cycle: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            rows: 5,
            cols: 5,
            link_length: 170.0,
            lanes: 2,
            feeder_count: 24,
            internal_od_count: 100,
            cycle: 96.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NetworkDoc {
    version: u32,
    nodes: Vec<Node>,
    links: Vec<Link>,
    meters: Vec<Meter>,
    signals: Vec<SignalPlan>,
    internal_od: Vec<NodeId>,
    feeder_origins: Vec<NodeId>,
}

/// Immutable network description. Adjacency is derived on construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkDoc", into = "NetworkDoc")]
pub struct Network {
    nodes: Vec<Node>,
    links: Vec<Link>,
    meters: Vec<Meter>,
    signals: Vec<SignalPlan>,
    internal_od: Vec<NodeId>,
    feeder_origins: Vec<NodeId>,
    out_links: Vec<Vec<LinkId>>,
    in_links: Vec<Vec<LinkId>>,
}

impl TryFrom<NetworkDoc> for Network {
    type Error = NetError;

    fn try_from(doc: NetworkDoc) -> Result<Self, NetError> {
        if doc.version != DOCUMENT_VERSION {
            return Err(NetError::Version(doc.version));
        }
        Network::from_parts(
            doc.nodes,
            doc.links,
            doc.meters,
            doc.signals,
            doc.internal_od,
            doc.feeder_origins,
        )
    }
}

impl From<Network> for NetworkDoc {
    fn from(net: Network) -> Self {
        NetworkDoc {
            version: DOCUMENT_VERSION,
            nodes: net.nodes,
            links: net.links,
            meters: net.meters,
            signals: net.signals,
            internal_od: net.internal_od,
            feeder_origins: net.feeder_origins,
        }
    }
}

impl Network {
    /// Assembles a network from raw parts. Only referential integrity is
    /// checked here; semantic checks live in [`validate`].
    pub fn from_parts(
        nodes: Vec<Node>,
        links: Vec<Link>,
        meters: Vec<Meter>,
        signals: Vec<SignalPlan>,
        internal_od: Vec<NodeId>,
        feeder_origins: Vec<NodeId>,
    ) -> Result<Self, NetError> {
        for (i, n) in nodes.iter().enumerate() {
            if n.id.0 != i {
                return Err(NetError::Reference(format!("node {} stored at index {i}", n.id)));
            }
        }
        let mut out_links = vec![Vec::new(); nodes.len()];
        let mut in_links = vec![Vec::new(); nodes.len()];
        for (i, l) in links.iter().enumerate() {
            if l.id.0 != i {
                return Err(NetError::Reference(format!("link {} stored at index {i}", l.id)));
            }
            if l.from.0 >= nodes.len() || l.to.0 >= nodes.len() {
                return Err(NetError::Reference(format!("link {} has an unknown endpoint", l.id)));
            }
            out_links[l.from.0].push(l.id);
            in_links[l.to.0].push(l.id);
        }
        let link_ok = |id: &LinkId| id.0 < links.len();
        let node_ok = |id: &NodeId| id.0 < nodes.len();
        if !meters.iter().all(|m| link_ok(&m.link)) {
            return Err(NetError::Reference("meter on unknown link".into()));
        }
        for s in &signals {
            if !node_ok(&s.node) || !s.phases.iter().all(|p| p.permitted.iter().all(link_ok)) {
                return Err(NetError::Reference(format!("signal plan at {} is dangling", s.node)));
            }
        }
        if !internal_od.iter().chain(&feeder_origins).all(node_ok) {
            return Err(NetError::Reference("unknown origin/destination node".into()));
        }
        Ok(Network {
            nodes,
            links,
            meters,
            signals,
            internal_od,
            feeder_origins,
            out_links,
            in_links,
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link(&self, id: LinkId) -> &Link {
        &self.links[id.0]
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn meters(&self) -> &[Meter] {
        &self.meters
    }

    pub fn signals(&self) -> &[SignalPlan] {
        &self.signals
    }

    pub fn internal_od(&self) -> &[NodeId] {
        &self.internal_od
    }

    pub fn feeder_origins(&self) -> &[NodeId] {
        &self.feeder_origins
    }

    pub fn out_links(&self, node: NodeId) -> &[LinkId] {
        &self.out_links[node.0]
    }

    pub fn in_links(&self, node: NodeId) -> &[LinkId] {
        &self.in_links[node.0]
    }

    /// Total lane-km of the links in `region`.
    pub fn lane_km(&self, region: Region) -> f64 {
        self.links
            .iter()
            .filter(|l| l.region == region)
            .map(Link::lane_km)
            .sum()
    }

    /// Whether a route may pass through `node` without starting or ending
    /// there. Only intersections are transit nodes.
    pub fn is_transit(&self, node: NodeId) -> bool {
        matches!(self.nodes[node.0].kind, NodeKind::Intersection { .. })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, NetError> {
        serde_json::from_str(text).map_err(|e| NetError::Parse(e.to_string()))
    }

    /// Returns a copy without the meter on `link`. Used to construct invalid
    /// instances for validation tests and tooling.
    pub fn without_meter(&self, link: LinkId) -> Network {
        let mut copy = self.clone();
        copy.meters.retain(|m| m.link != link);
        copy
    }

    /// Returns a copy with one extra internal point that has no stubs.
    pub fn with_isolated_od(&self) -> Network {
        let mut copy = self.clone();
        let id = NodeId(copy.nodes.len());
        copy.nodes.push(Node {
            id,
            kind: NodeKind::InternalOd,
        });
        copy.out_links.push(Vec::new());
        copy.in_links.push(Vec::new());
        copy.internal_od.push(id);
        copy
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    South,
    East,
    North,
    West,
}

impl Side {
    const ALL: [Side; 4] = [Side::South, Side::East, Side::North, Side::West];

    /// Boundary intersections along this side, in walking order.
    fn nodes(self, rows: usize, cols: usize) -> Vec<(usize, usize)> {
        match self {
            Side::South => (0..cols).map(|c| (0, c)).collect(),
            Side::East => (0..rows).map(|r| (r, cols - 1)).collect(),
            Side::North => (0..cols).rev().map(|c| (rows - 1, c)).collect(),
            Side::West => (0..rows).rev().map(|r| (r, 0)).collect(),
        }
    }

    fn is_north_south(self) -> bool {
        matches!(self, Side::South | Side::North)
    }
}

/// Builds the grid network: `rows × cols` signalized intersections joined by
/// two-way links, `feeder_count` metered feeders spread evenly over the four
/// sides, and `internal_od_count` internal points attached round-robin to
/// intersections through single-lane stubs.
pub fn build_grid(spec: &GridSpec) -> Result<Network, NetError> {
    let GridSpec {
        rows,
        cols,
        link_length,
        lanes,
        feeder_count,
        internal_od_count,
        cycle,
    } = *spec;
    if rows < 2 || cols < 2 {
        return Err(NetError::Bound(format!("rows and cols must be >= 2, got {rows}x{cols}")));
    }
    if !(link_length > 0.0) || lanes == 0 {
        return Err(NetError::Bound("link_length must be > 0 and lanes >= 1".into()));
    }
    if feeder_count == 0 || feeder_count % 4 != 0 {
        return Err(NetError::Bound(format!(
            "feeder_count must be a positive multiple of 4, got {feeder_count}"
        )));
    }
    let per_side = feeder_count / 4;
    if per_side > 2 * rows.min(cols) {
        return Err(NetError::Bound(format!(
            "feeder_count {feeder_count} exceeds two feeders per boundary intersection"
        )));
    }
    let slots = rows * cols * OD_SLOTS_PER_NODE;
    if internal_od_count == 0 || internal_od_count > slots {
        return Err(NetError::Bound(format!(
            "internal_od_count must be in 1..={slots}, got {internal_od_count}"
        )));
    }
    let lost = 2.0 * DEFAULT_LOST_TIME;
    if !(cycle > lost) {
        return Err(NetError::Bound(format!("cycle must exceed {lost} s of lost time")));
    }

    let grid_id = |r: usize, c: usize| NodeId(r * cols + c);
    let mut nodes: Vec<Node> = (0..rows * cols)
        .map(|i| Node {
            id: NodeId(i),
            kind: NodeKind::Intersection {
                row: i / cols,
                col: i % cols,
            },
        })
        .collect();
    let mut links: Vec<Link> = Vec::new();
    // Per intersection: incoming links permitted in the N-S and E-W phases.
    let mut ns_in: Vec<BTreeSet<LinkId>> = vec![BTreeSet::new(); rows * cols];
    let mut ew_in: Vec<BTreeSet<LinkId>> = vec![BTreeSet::new(); rows * cols];

    let push_link = |links: &mut Vec<Link>, from, to, ln, region, kind| {
        let id = LinkId(links.len());
        links.push(Link::new(
            id,
            from,
            to,
            link_length,
            ln,
            region,
            kind,
            DEFAULT_FREE_FLOW_SPEED,
        ));
        id
    };

    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                let (a, b) = (grid_id(r, c), grid_id(r, c + 1));
                let east = push_link(&mut links, a, b, lanes, Region::Protected, LinkKind::Grid);
                let west = push_link(&mut links, b, a, lanes, Region::Protected, LinkKind::Grid);
                ew_in[b.0].insert(east);
                ew_in[a.0].insert(west);
            }
            if r + 1 < rows {
                let (a, b) = (grid_id(r, c), grid_id(r + 1, c));
                let north = push_link(&mut links, a, b, lanes, Region::Protected, LinkKind::Grid);
                let south = push_link(&mut links, b, a, lanes, Region::Protected, LinkKind::Grid);
                ns_in[b.0].insert(north);
                ns_in[a.0].insert(south);
            }
        }
    }

    let mut feeder_origins = Vec::with_capacity(feeder_count);
    let mut meters = Vec::with_capacity(feeder_count);
    for side in Side::ALL {
        let along = side.nodes(rows, cols);
        for k in 0..per_side {
            let (r, c) = along[k % along.len()];
            let target = grid_id(r, c);
            let origin = NodeId(nodes.len());
            nodes.push(Node {
                id: origin,
                kind: NodeKind::FeederOrigin,
            });
            let id = push_link(&mut links, origin, target, lanes, Region::Feeder, LinkKind::Feeder);
            if side.is_north_south() {
                ns_in[target.0].insert(id);
            } else {
                ew_in[target.0].insert(id);
            }
            feeder_origins.push(origin);
            meters.push(Meter {
                link: id,
                min_rate: DEFAULT_MIN_RATE,
                max_rate: DEFAULT_MAX_RATE,
            });
        }
    }

    let mut internal_od = Vec::with_capacity(internal_od_count);
    for k in 0..internal_od_count {
        let target = NodeId(k % (rows * cols));
        let od = NodeId(nodes.len());
        nodes.push(Node {
            id: od,
            kind: NodeKind::InternalOd,
        });
        push_link(&mut links, od, target, 1, Region::Protected, LinkKind::OriginStub);
        push_link(&mut links, target, od, 1, Region::Protected, LinkKind::DestinationStub);
        internal_od.push(od);
    }

    let green = (cycle - lost) / 2.0;
    let signals = (0..rows * cols)
        .map(|i| SignalPlan {
            node: NodeId(i),
            cycle,
            phases: vec![
                Phase {
                    duration: green,
                    permitted: ns_in[i].clone(),
                },
                Phase {
                    duration: DEFAULT_LOST_TIME,
                    permitted: BTreeSet::new(),
                },
                Phase {
                    duration: green,
                    permitted: ew_in[i].clone(),
                },
                Phase {
                    duration: DEFAULT_LOST_TIME,
                    permitted: BTreeSet::new(),
                },
            ],
        })
        .collect();

    let net = Network::from_parts(nodes, links, meters, signals, internal_od, feeder_origins)?;
    let violations = validate(&net);
    if let Some(v) = violations.first() {
        return Err(NetError::Invalid(v.to_string()));
    }
    Ok(net)
}

/// All links of `region`, ascending.
pub fn region_links(net: &Network, region: Region) -> BTreeSet<LinkId> {
    net.links
        .iter()
        .filter(|l| l.region == region)
        .map(|l| l.id)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NonPositiveLength(LinkId),
    NoLanes(LinkId),
    StorageMismatch { link: LinkId, stored: usize, expected: usize },
    RegionMismatch(LinkId),
    UnmeteredFeeder(LinkId),
    DuplicateMeter(LinkId),
    MeterOnProtected(LinkId),
    MeterBounds(LinkId),
    CycleMismatch { node: NodeId, sum: f64, cycle: f64 },
    ProtectedNotStronglyConnected,
    UnreachableDestination(NodeId),
    StrandedOrigin(NodeId),
    FeederCannotReach(NodeId),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonPositiveLength(l) => write!(f, "non-positive length on {l}"),
            Violation::NoLanes(l) => write!(f, "zero lanes on {l}"),
            Violation::StorageMismatch {
                link,
                stored,
                expected,
            } => write!(f, "storage capacity {stored} on {link}, expected {expected}"),
            Violation::RegionMismatch(l) => write!(f, "region does not match link kind on {l}"),
            Violation::UnmeteredFeeder(l) => write!(f, "unmetered feeder {l}"),
            Violation::DuplicateMeter(l) => write!(f, "more than one meter on {l}"),
            Violation::MeterOnProtected(l) => write!(f, "meter on non-feeder link {l}"),
            Violation::MeterBounds(l) => write!(f, "meter bounds invalid on {l}"),
            Violation::CycleMismatch { node, sum, cycle } => {
                write!(f, "phases at {node} sum to {sum} s, cycle is {cycle} s")
            }
            Violation::ProtectedNotStronglyConnected => {
                write!(f, "protected intersections are not strongly connected")
            }
            Violation::UnreachableDestination(n) => write!(f, "internal point {n} is unreachable"),
            Violation::StrandedOrigin(n) => write!(f, "internal point {n} cannot reach any destination"),
            Violation::FeederCannotReach(n) => write!(f, "feeder origin {n} reaches no destination"),
        }
    }
}

/// Nodes reachable from `start`, passing only through intersections.
fn reachable_from(net: &Network, start: NodeId) -> Vec<bool> {
    let mut seen = vec![false; net.nodes.len()];
    let mut queue = VecDeque::from([start]);
    seen[start.0] = true;
    while let Some(n) = queue.pop_front() {
        if n != start && !net.is_transit(n) {
            continue;
        }
        for &l in net.out_links(n) {
            let to = net.links[l.0].to;
            if !seen[to.0] {
                seen[to.0] = true;
                queue.push_back(to);
            }
        }
    }
    seen
}

/// Checks every structural invariant; an empty list means the network is valid.
pub fn validate(net: &Network) -> Vec<Violation> {
    let mut out = Vec::new();
    for l in &net.links {
        if !(l.length > 0.0) {
            out.push(Violation::NonPositiveLength(l.id));
        }
        if l.lanes == 0 {
            out.push(Violation::NoLanes(l.id));
        }
        let expected = storage_capacity(l.length, l.lanes);
        if l.storage_capacity != expected {
            out.push(Violation::StorageMismatch {
                link: l.id,
                stored: l.storage_capacity,
                expected,
            });
        }
        let feeder_kind = l.kind == LinkKind::Feeder;
        if feeder_kind != (l.region == Region::Feeder) {
            out.push(Violation::RegionMismatch(l.id));
        }
    }

    let mut meter_count = vec![0usize; net.links.len()];
    for m in &net.meters {
        meter_count[m.link.0] += 1;
        if net.links[m.link.0].region != Region::Feeder {
            out.push(Violation::MeterOnProtected(m.link));
        }
        if !(m.min_rate > 0.0 && m.min_rate <= m.max_rate) {
            out.push(Violation::MeterBounds(m.link));
        }
    }
    for l in net.links.iter().filter(|l| l.region == Region::Feeder) {
        match meter_count[l.id.0] {
            0 => out.push(Violation::UnmeteredFeeder(l.id)),
            1 => {}
            _ => out.push(Violation::DuplicateMeter(l.id)),
        }
    }

    for s in &net.signals {
        let sum: f64 = s.phases.iter().map(|p| p.duration).sum();
        if (sum - s.cycle).abs() > 1e-9 {
            out.push(Violation::CycleMismatch {
                node: s.node,
                sum,
                cycle: s.cycle,
            });
        }
    }

    let intersections: Vec<NodeId> = net
        .nodes
        .iter()
        .filter(|n| net.is_transit(n.id))
        .map(|n| n.id)
        .collect();
    if let Some(&first) = intersections.first() {
        let fwd = reachable_from(net, first);
        // Reverse reachability over grid links only.
        let mut back = vec![false; net.nodes.len()];
        let mut queue = VecDeque::from([first]);
        back[first.0] = true;
        while let Some(n) = queue.pop_front() {
            for &l in net.in_links(n) {
                let from = net.links[l.0].from;
                if net.is_transit(from) && !back[from.0] {
                    back[from.0] = true;
                    queue.push_back(from);
                }
            }
        }
        if !intersections.iter().all(|n| fwd[n.0] && back[n.0]) {
            out.push(Violation::ProtectedNotStronglyConnected);
        }
        for &od in &net.internal_od {
            if !fwd[od.0] {
                out.push(Violation::UnreachableDestination(od));
            }
        }
    }

    let is_dest: Vec<bool> = {
        let mut v = vec![false; net.nodes.len()];
        for &od in &net.internal_od {
            v[od.0] = true;
        }
        v
    };
    for &od in &net.internal_od {
        let seen = reachable_from(net, od);
        if !net.internal_od.iter().any(|&d| d != od && seen[d.0]) {
            out.push(Violation::StrandedOrigin(od));
        }
    }
    for &o in &net.feeder_origins {
        let seen = reachable_from(net, o);
        if !seen.iter().zip(&is_dest).any(|(&s, &d)| s && d) {
            out.push(Violation::FeederCannotReach(o));
        }
    }
    out
}
