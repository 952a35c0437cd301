//! Network graph built from a [`Config`]: indexed links, nodes, routes, and
//! detectors, signal timings with demand-proportional green splits, and the
//! conflict structure of every coordinated node.
//!
//! Conflicts are derived from compass geometry. Each movement at a node is
//! classified by its entry heading and turn direction; pairs of movements
//! that merge into one lane are rear-end conflicts, pairs whose paths cross
//! are lateral conflicts. Junction nodes must come out conflict-free.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::behavior::{MovementSignal, SignalState};
use crate::config::{Config, GreenSpec, Heading, LinkClass, NodeKind, RouteGroup};
use crate::coordination::{Conflict, ConflictZone};
use crate::error::CoreError;
use crate::ids::{DetectorId, LinkId, NodeId, RouteId, ZoneId};

pub const MIN_GREEN: f64 = 7.0;

#[derive(Debug, Clone)]
pub struct Link {
    pub id: LinkId,
    pub name: String,
    pub from: NodeId,
    pub to: NodeId,
    pub length: f64,
    pub lanes: u8,
    pub class: LinkClass,
    pub free_speed: f64,
    pub heading: Heading,
    pub heading_in: Heading,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: NodeId,
    pub name: String,
    pub kind: NodeKind,
    /// Extent of the conflict box past the stop line, m.
    pub zone_length: f64,
}

/// One coordinated or signal-controlled crossing on a route, in route arc
/// coordinates (cumulative distance from the route start).
#[derive(Debug, Clone)]
pub struct RouteZone {
    /// Index into [`Network::zones`].
    pub zone: usize,
    /// Arc where the control zone begins.
    pub window_start: f64,
    /// Arc at the stop line.
    pub box_entry: f64,
    /// Arc where the conflict box ends.
    pub box_exit: f64,
    /// Valid entry lanes, each with its zone approach index.
    pub lanes: Vec<(u8, usize)>,
}

#[derive(Debug, Clone)]
pub struct Route {
    pub id: RouteId,
    pub name: String,
    pub group: RouteGroup,
    pub links: Vec<LinkId>,
    /// Arc at the start of each link; `offsets[0] == 0`.
    pub offsets: Vec<f64>,
    pub length: f64,
    /// veh/h at demand multiplier 1.0
    pub volume: f64,
    /// Lanes of the first link from which the second link is reachable.
    pub spawn_lanes: Vec<u8>,
    /// Coordinated crossings in arc order.
    pub zones: Vec<RouteZone>,
}

impl Route {
    /// Index of the link containing arc position `arc`, with the offset into
    /// that link. The route end maps onto the last link.
    pub fn link_at(&self, arc: f64) -> (usize, f64) {
        for i in (0..self.links.len()).rev() {
            if arc >= self.offsets[i] {
                return (i, arc - self.offsets[i]);
            }
        }
        (0, arc)
    }
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub id: DetectorId,
    pub name: String,
    pub link: LinkId,
    pub position: f64,
    /// Lanes `0..lanes` are counted; turn bays above are not.
    pub lanes: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZoneApproach {
    pub link: LinkId,
    pub lane: u8,
    /// Yields to conflicting majors under gap-acceptance control.
    pub minor: bool,
}

#[derive(Debug, Clone)]
pub struct ZoneInfo {
    pub id: ZoneId,
    pub node: NodeId,
    pub zone_length: f64,
    pub approaches: Vec<ZoneApproach>,
    /// Row-major symmetric matrix over approaches.
    conflicts: Vec<Conflict>,
}

impl ZoneInfo {
    pub fn conflict_between(&self, a: usize, b: usize) -> Conflict {
        self.conflicts[a * self.approaches.len() + b]
    }

    pub fn approach_index(&self, link: LinkId, lane: u8) -> Option<usize> {
        self.approaches.iter().position(|a| a.link == link && a.lane == lane)
    }

    pub fn to_conflict_zone(&self, control_length: f64) -> Result<ConflictZone, CoreError> {
        let n = self.approaches.len();
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let c = self.conflict_between(i, j);
                if c != Conflict::None {
                    pairs.push((i, j, c));
                }
            }
        }
        ConflictZone::new(self.id, self.zone_length, vec![control_length; n], &pairs)
    }
}

#[derive(Debug, Clone)]
pub struct PhaseTiming {
    /// Cycle time of green onset.
    pub green_on: f64,
    pub green_off: f64,
    pub yellow: f64,
    pub all_red: f64,
    pub movements: Vec<(LinkId, LinkId)>,
}

#[derive(Debug, Clone)]
pub struct SignalTiming {
    pub node: NodeId,
    pub cycle: f64,
    pub offset: f64,
    pub phases: Vec<PhaseTiming>,
}

/// A lane-to-lane movement through a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct Movement {
    from: LinkId,
    from_lane: u8,
    to: LinkId,
    to_lane: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Turn {
    Straight,
    Left,
    Right,
}

fn heading_vec(h: Heading) -> (i8, i8) {
    match h {
        Heading::N => (0, 1),
        Heading::S => (0, -1),
        Heading::E => (1, 0),
        Heading::W => (-1, 0),
    }
}

fn turn_between(entry: Heading, exit: Heading) -> Option<Turn> {
    let (x1, y1) = heading_vec(entry);
    let (x2, y2) = heading_vec(exit);
    let dot = x1 * x2 + y1 * y2;
    let cross = x1 * y2 - y1 * x2;
    match (dot, cross) {
        (1, _) => Some(Turn::Straight),
        (_, 1) => Some(Turn::Left),
        (_, -1) => Some(Turn::Right),
        _ => None,
    }
}

fn conflict_rank(c: Conflict) -> u8 {
    match c {
        Conflict::None => 0,
        Conflict::SameLane => 1,
        Conflict::Lateral => 2,
    }
}

#[derive(Debug)]
pub struct Network {
    pub links: Vec<Link>,
    pub nodes: Vec<Node>,
    pub routes: Vec<Route>,
    pub detectors: Vec<Detector>,
    pub signals: Vec<SignalTiming>,
    pub zones: Vec<ZoneInfo>,
    pub defaults: crate::config::Defaults,
    pub headways: crate::config::Headways,
    pub limits: crate::config::LimitsSpec,
    link_by_name: HashMap<String, LinkId>,
    node_by_name: HashMap<String, NodeId>,
    route_by_name: HashMap<String, RouteId>,
    connections: HashMap<(LinkId, LinkId), Vec<(u8, u8)>>,
    movement_signals: HashMap<(LinkId, LinkId), MovementSignal>,
    signal_by_node: HashMap<NodeId, usize>,
    zone_by_node: HashMap<NodeId, usize>,
}

impl Network {
    pub fn link(&self, id: LinkId) -> &Link {
        &self.links[id.index()]
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.index()]
    }

    pub fn route(&self, id: RouteId) -> &Route {
        &self.routes[id.index()]
    }

    pub fn link_named(&self, name: &str) -> Option<&Link> {
        self.link_by_name.get(name).map(|&id| self.link(id))
    }

    pub fn node_named(&self, name: &str) -> Option<&Node> {
        self.node_by_name.get(name).map(|&id| self.node(id))
    }

    pub fn route_named(&self, name: &str) -> Option<&Route> {
        self.route_by_name.get(name).map(|&id| self.route(id))
    }

    pub fn lane_map(&self, from: LinkId, to: LinkId) -> Option<&[(u8, u8)]> {
        self.connections.get(&(from, to)).map(|v| v.as_slice())
    }

    /// Lane on `to` reached from `lane` on `from`.
    pub fn next_lane(&self, from: LinkId, lane: u8, to: LinkId) -> Option<u8> {
        self.lane_map(from, to)?
            .iter()
            .find(|&&(f, _)| f == lane)
            .map(|&(_, t)| t)
    }

    pub fn signal_at(&self, node: NodeId) -> Option<&SignalTiming> {
        self.signal_by_node.get(&node).map(|&i| &self.signals[i])
    }

    pub fn zone_at(&self, node: NodeId) -> Option<usize> {
        self.zone_by_node.get(&node).copied()
    }

    pub fn movement_signal(&self, from: LinkId, to: LinkId) -> Option<&MovementSignal> {
        self.movement_signals.get(&(from, to))
    }

    /// Signal state and remaining time for a controlled movement.
    pub fn signal_state(
        &self,
        from: LinkId,
        to: LinkId,
        t: f64,
    ) -> Result<(SignalState, f64), CoreError> {
        let sig = self.movement_signals.get(&(from, to)).ok_or_else(|| {
            CoreError::validation(format!(
                "no signal controls movement {}>{}",
                self.link(from).name,
                self.link(to).name
            ))
        })?;
        let node = self.link(from).to;
        let offset = self.signal_at(node).map(|s| s.offset).unwrap_or(0.0);
        Ok(sig.state_at(t - offset))
    }

    /// Base demand volumes in route id order, veh/h.
    pub fn volumes(&self) -> Vec<f64> {
        self.routes.iter().map(|r| r.volume).collect()
    }

    pub fn vehicle_limits(&self, headway: f64) -> crate::dynamics::VehicleLimits {
        crate::dynamics::VehicleLimits {
            u_min: self.limits.u_min,
            u_max: self.limits.u_max,
            v_min: self.limits.v_min,
            v_max: self.limits.v_max,
            standstill: self.limits.standstill,
            headway,
        }
    }

    pub fn build(cfg: &Config) -> Result<Network, CoreError> {
        let mut node_by_name = HashMap::new();
        let mut nodes = Vec::with_capacity(cfg.nodes.len());
        for (i, n) in cfg.nodes.iter().enumerate() {
            let id = NodeId(i as u16);
            if node_by_name.insert(n.name.clone(), id).is_some() {
                return Err(CoreError::validation(format!("duplicate node {}", n.name)));
            }
            let zone_length = n.zone_length.unwrap_or(match n.kind {
                NodeKind::Merge => 40.0,
                _ => 20.0,
            });
            nodes.push(Node { id, name: n.name.clone(), kind: n.kind, zone_length });
        }

        let mut link_by_name = HashMap::new();
        let mut links = Vec::with_capacity(cfg.links.len());
        for (i, l) in cfg.links.iter().enumerate() {
            let id = LinkId(i as u16);
            if link_by_name.insert(l.name.clone(), id).is_some() {
                return Err(CoreError::validation(format!("duplicate link {}", l.name)));
            }
            let from = *node_by_name
                .get(&l.from)
                .ok_or_else(|| CoreError::validation(format!("link {}: unknown node {}", l.name, l.from)))?;
            let to = *node_by_name
                .get(&l.to)
                .ok_or_else(|| CoreError::validation(format!("link {}: unknown node {}", l.name, l.to)))?;
            links.push(Link {
                id,
                name: l.name.clone(),
                from,
                to,
                length: l.length,
                lanes: l.lanes,
                class: l.class,
                free_speed: l.free_speed,
                heading: l.heading,
                heading_in: l.heading_in.unwrap_or(l.heading),
            });
        }

        // Explicit lane connections; identity maps fill in for route pairs
        // that have no entry.
        let mut connections: HashMap<(LinkId, LinkId), Vec<(u8, u8)>> = HashMap::new();
        for c in &cfg.connections {
            let from = *link_by_name
                .get(&c.from)
                .ok_or_else(|| CoreError::validation(format!("connection: unknown link {}", c.from)))?;
            let to = *link_by_name
                .get(&c.to)
                .ok_or_else(|| CoreError::validation(format!("connection: unknown link {}", c.to)))?;
            if links[from.index()].to != links[to.index()].from {
                return Err(CoreError::validation(format!(
                    "connection {}>{} does not meet at a node",
                    c.from, c.to
                )));
            }
            if c.lanes.is_empty() {
                return Err(CoreError::validation(format!("connection {}>{} has no lanes", c.from, c.to)));
            }
            for &(f, t) in &c.lanes {
                if f >= links[from.index()].lanes || t >= links[to.index()].lanes {
                    return Err(CoreError::validation(format!(
                        "connection {}>{}: lane ({f},{t}) out of range",
                        c.from, c.to
                    )));
                }
            }
            if connections.insert((from, to), c.lanes.clone()).is_some() {
                return Err(CoreError::validation(format!("duplicate connection {}>{}", c.from, c.to)));
            }
        }

        // Demand, keyed per route for the route table.
        let mut volume_by_route: HashMap<&str, f64> = HashMap::new();
        for d in &cfg.demand {
            if volume_by_route.insert(d.route.as_str(), d.volume).is_some() {
                return Err(CoreError::validation(format!("duplicate demand for {}", d.route)));
            }
        }

        let mut route_by_name = HashMap::new();
        let mut routes = Vec::with_capacity(cfg.routes.len());
        for (i, r) in cfg.routes.iter().enumerate() {
            let id = RouteId(i as u16);
            if route_by_name.insert(r.name.clone(), id).is_some() {
                return Err(CoreError::validation(format!("duplicate route {}", r.name)));
            }
            if r.links.is_empty() {
                return Err(CoreError::validation(format!("route {} has no links", r.name)));
            }
            let link_ids: Vec<LinkId> = r
                .links
                .iter()
                .map(|n| {
                    link_by_name
                        .get(n)
                        .copied()
                        .ok_or_else(|| CoreError::validation(format!("route {}: unknown link {n}", r.name)))
                })
                .collect::<Result<_, _>>()?;
            let mut offsets = Vec::with_capacity(link_ids.len());
            let mut arc = 0.0;
            for (k, &lid) in link_ids.iter().enumerate() {
                offsets.push(arc);
                arc += links[lid.index()].length;
                if k + 1 < link_ids.len() {
                    let next = link_ids[k + 1];
                    if links[lid.index()].to != links[next.index()].from {
                        return Err(CoreError::validation(format!(
                            "route {}: {} and {} are not connected",
                            r.name,
                            links[lid.index()].name,
                            links[next.index()].name
                        )));
                    }
                    // Materialize the identity map where nothing is declared.
                    connections.entry((lid, next)).or_insert_with(|| {
                        let n = links[lid.index()].lanes.min(links[next.index()].lanes);
                        (0..n).map(|l| (l, l)).collect()
                    });
                }
            }
            if nodes[links[link_ids[0].index()].from.index()].kind != NodeKind::Terminus
                || nodes[links[link_ids[link_ids.len() - 1].index()].to.index()].kind != NodeKind::Terminus
            {
                return Err(CoreError::validation(format!(
                    "route {} must start and end at a terminus",
                    r.name
                )));
            }
            for &lid in &link_ids[..link_ids.len() - 1] {
                if nodes[links[lid.index()].to.index()].kind == NodeKind::Terminus {
                    return Err(CoreError::validation(format!(
                        "route {} passes through terminus {}",
                        r.name,
                        nodes[links[lid.index()].to.index()].name
                    )));
                }
            }
            let classes: Vec<LinkClass> =
                link_ids.iter().map(|l| links[l.index()].class).collect();
            match crate::metrics::classify_route(&classes) {
                Some(derived) if derived == r.group => {}
                Some(derived) => {
                    return Err(CoreError::validation(format!(
                        "route {} is declared {} but its links make it {}",
                        r.name,
                        r.group.as_str(),
                        derived.as_str()
                    )));
                }
                None => {
                    return Err(CoreError::validation(format!(
                        "route {} has only ramp links and cannot be classified",
                        r.name
                    )));
                }
            }
            let spawn_lanes: Vec<u8> = if link_ids.len() == 1 {
                (0..links[link_ids[0].index()].lanes).collect()
            } else {
                let mut lanes: Vec<u8> = connections[&(link_ids[0], link_ids[1])]
                    .iter()
                    .map(|&(f, _)| f)
                    .collect();
                lanes.sort_unstable();
                lanes.dedup();
                lanes
            };
            routes.push(Route {
                id,
                name: r.name.clone(),
                group: r.group.clone(),
                links: link_ids,
                offsets,
                length: arc,
                volume: volume_by_route.remove(r.name.as_str()).unwrap_or(0.0),
                spawn_lanes,
                zones: Vec::new(),
            });
        }
        if let Some(orphan) = volume_by_route.keys().next() {
            return Err(CoreError::validation(format!("demand for unknown route {orphan}")));
        }

        // Lane movements per node, from route usage.
        let mut movements_at: HashMap<NodeId, Vec<Movement>> = HashMap::new();
        for r in &routes {
            for pair in r.links.windows(2) {
                let node = links[pair[0].index()].to;
                for &(f, t) in &connections[&(pair[0], pair[1])] {
                    movements_at.entry(node).or_default().push(Movement {
                        from: pair[0],
                        from_lane: f,
                        to: pair[1],
                        to_lane: t,
                    });
                }
            }
        }
        for ms in movements_at.values_mut() {
            ms.sort_unstable();
            ms.dedup();
        }
        for (node, ms) in &movements_at {
            for m in ms {
                let entry = links[m.from.index()].heading;
                let exit = links[m.to.index()].heading_in;
                if turn_between(entry, exit).is_none() {
                    return Err(CoreError::validation(format!(
                        "u-turn movement {}>{} at {}",
                        links[m.from.index()].name,
                        links[m.to.index()].name,
                        nodes[node.index()].name
                    )));
                }
            }
        }

        let movement_conflict = |a: &Movement, b: &Movement| -> Conflict {
            if a.from == b.from {
                return Conflict::None;
            }
            if a.to == b.to && a.to_lane == b.to_lane {
                return Conflict::SameLane;
            }
            let ea = links[a.from.index()].heading;
            let eb = links[b.from.index()].heading;
            let ta = turn_between(ea, links[a.to.index()].heading_in).unwrap();
            let tb = turn_between(eb, links[b.to.index()].heading_in).unwrap();
            let (xa, ya) = heading_vec(ea);
            let (xb, yb) = heading_vec(eb);
            match xa * xb + ya * yb {
                1 => Conflict::None,
                -1 => {
                    let crossing = (ta == Turn::Left && tb == Turn::Straight)
                        || (tb == Turn::Left && ta == Turn::Straight);
                    if crossing {
                        Conflict::Lateral
                    } else {
                        Conflict::None
                    }
                }
                _ => {
                    if ta == Turn::Right || tb == Turn::Right {
                        Conflict::None
                    } else {
                        Conflict::Lateral
                    }
                }
            }
        };

        // Junctions carry diverging traffic only.
        for (node, ms) in &movements_at {
            if nodes[node.index()].kind != NodeKind::Junction {
                continue;
            }
            for (i, a) in ms.iter().enumerate() {
                for b in &ms[i + 1..] {
                    if movement_conflict(a, b) != Conflict::None {
                        return Err(CoreError::validation(format!(
                            "junction {} has conflicting movements {}>{} and {}>{}",
                            nodes[node.index()].name,
                            links[a.from.index()].name,
                            links[a.to.index()].name,
                            links[b.from.index()].name,
                            links[b.to.index()].name
                        )));
                    }
                }
            }
        }

        // Conflict zones at signal-, stop-, and merge-controlled nodes.
        let mut zones = Vec::new();
        let mut zone_by_node = HashMap::new();
        for node in &nodes {
            let coordinated = matches!(
                node.kind,
                NodeKind::Signalized | NodeKind::StopControlled | NodeKind::Merge
            );
            if !coordinated {
                continue;
            }
            let ms = movements_at.get(&node.id).cloned().unwrap_or_default();
            if ms.is_empty() {
                return Err(CoreError::validation(format!("no movements at {}", node.name)));
            }
            let mut approaches: Vec<ZoneApproach> = Vec::new();
            for m in &ms {
                let link = &links[m.from.index()];
                let minor = link.class == LinkClass::Ramp
                    || (node.kind == NodeKind::StopControlled && link.lanes == 1);
                let a = ZoneApproach { link: m.from, lane: m.from_lane, minor };
                if !approaches.contains(&a) {
                    approaches.push(a);
                }
            }
            let n = approaches.len();
            let mut conflicts = vec![Conflict::None; n * n];
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let mut best = Conflict::None;
                    for a in ms.iter().filter(|m| {
                        m.from == approaches[i].link && m.from_lane == approaches[i].lane
                    }) {
                        for b in ms.iter().filter(|m| {
                            m.from == approaches[j].link && m.from_lane == approaches[j].lane
                        }) {
                            let c = movement_conflict(a, b);
                            if conflict_rank(c) > conflict_rank(best) {
                                best = c;
                            }
                        }
                    }
                    conflicts[i * n + j] = best;
                }
            }
            let idx = zones.len();
            zones.push(ZoneInfo {
                id: ZoneId(idx as u16),
                node: node.id,
                zone_length: node.zone_length,
                approaches,
                conflicts,
            });
            zone_by_node.insert(node.id, idx);
        }

        // Route crossing windows, in arc coordinates.
        let control = cfg.defaults.control_zone_length;
        for r in &mut routes {
            let mut prev_exit = 0.0;
            for k in 1..r.links.len() {
                let node = links[r.links[k - 1].index()].to;
                let Some(&zi) = zone_by_node.get(&node) else { continue };
                let zone = &zones[zi];
                let box_entry = r.offsets[k];
                let box_exit = box_entry + zone.zone_length;
                let window_start = box_entry - control;
                if window_start < prev_exit {
                    return Err(CoreError::validation(format!(
                        "route {}: control zone before {} overlaps the previous crossing",
                        r.name,
                        nodes[node.index()].name
                    )));
                }
                let mut lanes = Vec::new();
                for &(f, _) in &connections[&(r.links[k - 1], r.links[k])] {
                    let a = zone.approach_index(r.links[k - 1], f).ok_or_else(|| {
                        CoreError::consistency(format!(
                            "approach ({}, {f}) missing at {}",
                            links[r.links[k - 1].index()].name,
                            nodes[node.index()].name
                        ))
                    })?;
                    lanes.push((f, a));
                }
                r.zones.push(RouteZone { zone: zi, window_start, box_entry, box_exit, lanes });
                prev_exit = box_exit;
            }
        }

        // Per-lane demand shares, for proportional green splits.
        let mut lane_share: HashMap<Movement, f64> = HashMap::new();
        for r in &routes {
            for pair in r.links.windows(2) {
                let lanes = &connections[&(pair[0], pair[1])];
                let share = r.volume / lanes.len() as f64;
                for &(f, t) in lanes {
                    *lane_share
                        .entry(Movement { from: pair[0], from_lane: f, to: pair[1], to_lane: t })
                        .or_default() += share;
                }
            }
        }

        let mut signals = Vec::new();
        let mut signal_by_node = HashMap::new();
        let mut movement_signals: HashMap<(LinkId, LinkId), MovementSignal> = HashMap::new();
        for plan in &cfg.signal_plans {
            let node = *node_by_name
                .get(&plan.node)
                .ok_or_else(|| CoreError::validation(format!("signal plan at unknown node {}", plan.node)))?;
            if nodes[node.index()].kind != NodeKind::Signalized {
                return Err(CoreError::validation(format!("{} is not signalized", plan.node)));
            }
            let node_movements = movements_at.get(&node).cloned().unwrap_or_default();
            let mut phase_movements: Vec<Vec<(LinkId, LinkId)>> = Vec::new();
            for ph in &plan.phases {
                let mut resolved = Vec::new();
                for mv in &ph.movements {
                    let (from_name, to_name) = mv
                        .split_once('>')
                        .ok_or_else(|| CoreError::validation(format!("movement {mv:?} is not from>to")))?;
                    let from = *link_by_name
                        .get(from_name)
                        .ok_or_else(|| CoreError::validation(format!("movement {mv}: unknown link {from_name}")))?;
                    let to = *link_by_name
                        .get(to_name)
                        .ok_or_else(|| CoreError::validation(format!("movement {mv}: unknown link {to_name}")))?;
                    if !node_movements.iter().any(|m| m.from == from && m.to == to) {
                        return Err(CoreError::validation(format!(
                            "movement {mv} is not used at {}",
                            plan.node
                        )));
                    }
                    resolved.push((from, to));
                }
                phase_movements.push(resolved);
            }
            // Every movement through the node must be served by some phase.
            for m in &node_movements {
                let served = phase_movements
                    .iter()
                    .flatten()
                    .any(|&(f, t)| f == m.from && t == m.to);
                if !served {
                    return Err(CoreError::validation(format!(
                        "movement {}>{} at {} appears in no phase",
                        links[m.from.index()].name,
                        links[m.to.index()].name,
                        plan.node
                    )));
                }
            }
            // A phase must not serve two movements that cross.
            for (pi, served) in phase_movements.iter().enumerate() {
                let in_phase: Vec<&Movement> = node_movements
                    .iter()
                    .filter(|m| served.iter().any(|&(f, t)| f == m.from && t == m.to))
                    .collect();
                for (i, a) in in_phase.iter().enumerate() {
                    for b in &in_phase[i + 1..] {
                        if movement_conflict(a, b) == Conflict::Lateral {
                            return Err(CoreError::validation(format!(
                                "phase {} at {} serves crossing movements {}>{} and {}>{}",
                                pi + 1,
                                plan.node,
                                links[a.from.index()].name,
                                links[a.to.index()].name,
                                links[b.from.index()].name,
                                links[b.to.index()].name
                            )));
                        }
                    }
                }
            }

            // Green splits: fixed phases keep their value, auto phases divide
            // the remaining green in proportion to their busiest lane.
            let lost: f64 = plan.phases.iter().map(|p| p.yellow + p.all_red).sum();
            let mut budget = plan.cycle - lost;
            let mut crits = vec![0.0; plan.phases.len()];
            let mut auto = vec![false; plan.phases.len()];
            for (pi, ph) in plan.phases.iter().enumerate() {
                match &ph.green {
                    GreenSpec::Fixed(g) => budget -= g,
                    GreenSpec::Auto(_) => {
                        auto[pi] = true;
                        let mut lane_totals: HashMap<(LinkId, u8), f64> = HashMap::new();
                        for m in &node_movements {
                            let served = phase_movements[pi]
                                .iter()
                                .any(|&(f, t)| f == m.from && t == m.to);
                            if served {
                                *lane_totals.entry((m.from, m.from_lane)).or_default() +=
                                    lane_share.get(m).copied().unwrap_or(0.0);
                            }
                        }
                        crits[pi] = lane_totals.values().fold(0.0, |a: f64, &b| a.max(b));
                    }
                }
            }
            let mut greens = vec![0.0; plan.phases.len()];
            for (pi, ph) in plan.phases.iter().enumerate() {
                if let GreenSpec::Fixed(g) = ph.green {
                    greens[pi] = g;
                }
            }
            // Phases pinned at the minimum green drop out of the pool.
            let mut pinned = vec![false; plan.phases.len()];
            loop {
                let pool: f64 = budget
                    - greens
                        .iter()
                        .zip(&auto)
                        .zip(&pinned)
                        .filter(|((_, &a), &p)| a && p)
                        .map(|((g, _), _)| *g)
                        .sum::<f64>();
                let crit_sum: f64 = crits
                    .iter()
                    .zip(&auto)
                    .zip(&pinned)
                    .filter(|((_, &a), &p)| a && !p)
                    .map(|((c, _), _)| *c)
                    .sum();
                if crit_sum <= 0.0 {
                    break;
                }
                let mut repinned = false;
                for pi in 0..greens.len() {
                    if auto[pi] && !pinned[pi] {
                        let g = pool * crits[pi] / crit_sum;
                        if g < MIN_GREEN {
                            greens[pi] = MIN_GREEN;
                            pinned[pi] = true;
                            repinned = true;
                        } else {
                            greens[pi] = g;
                        }
                    }
                }
                if !repinned {
                    break;
                }
            }
            for (pi, &g) in greens.iter().enumerate() {
                if g < MIN_GREEN - 1e-9 {
                    return Err(CoreError::validation(format!(
                        "phase {} at {} gets {g:.1} s of green; cycle too short",
                        pi + 1,
                        plan.node
                    )));
                }
            }
            let total: f64 = greens.iter().sum::<f64>() + lost;
            if (total - plan.cycle).abs() > 1e-6 {
                return Err(CoreError::validation(format!(
                    "signal plan at {} sums to {total:.3} s against a {:.3} s cycle",
                    plan.node, plan.cycle
                )));
            }

            let mut phases = Vec::with_capacity(plan.phases.len());
            let mut clock = 0.0;
            for (pi, ph) in plan.phases.iter().enumerate() {
                let timing = PhaseTiming {
                    green_on: clock,
                    green_off: clock + greens[pi],
                    yellow: ph.yellow,
                    all_red: ph.all_red,
                    movements: phase_movements[pi].clone(),
                };
                clock = timing.green_off + ph.yellow + ph.all_red;
                for &(f, t) in &timing.movements {
                    let sig = movement_signals.entry((f, t)).or_insert(MovementSignal {
                        cycle: plan.cycle,
                        green: Vec::new(),
                        yellow: ph.yellow,
                    });
                    sig.green.push((timing.green_on, timing.green_off));
                }
                phases.push(timing);
            }
            let idx = signals.len();
            signals.push(SignalTiming { node, cycle: plan.cycle, offset: plan.offset, phases });
            if signal_by_node.insert(node, idx).is_some() {
                return Err(CoreError::validation(format!("two signal plans at {}", plan.node)));
            }
        }
        for node in &nodes {
            if node.kind == NodeKind::Signalized && !signal_by_node.contains_key(&node.id) {
                return Err(CoreError::validation(format!("{} has no signal plan", node.name)));
            }
        }
        for sig in movement_signals.values_mut() {
            sig.green.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        }

        let mut detectors = Vec::with_capacity(cfg.detectors.len());
        for (i, d) in cfg.detectors.iter().enumerate() {
            let link = *link_by_name
                .get(&d.link)
                .ok_or_else(|| CoreError::validation(format!("detector {}: unknown link {}", d.name, d.link)))?;
            let l = &links[link.index()];
            if !(d.position >= 0.0 && d.position <= l.length) {
                return Err(CoreError::validation(format!("detector {} is off its link", d.name)));
            }
            if d.lanes == 0 || d.lanes > l.lanes {
                return Err(CoreError::validation(format!("detector {}: bad lane count", d.name)));
            }
            detectors.push(Detector {
                id: DetectorId(i as u16),
                name: d.name.clone(),
                link,
                position: d.position,
                lanes: d.lanes,
            });
        }

        Ok(Network {
            links,
            nodes,
            routes,
            detectors,
            signals,
            zones,
            defaults: cfg.defaults.clone(),
            headways: cfg.headways.clone(),
            limits: cfg.limits.clone(),
            link_by_name,
            node_by_name,
            route_by_name,
            connections,
            movement_signals,
            signal_by_node,
            zone_by_node,
        })
    }
}

/// Poisson arrival counts for one step, one entry per route in id order.
/// `volumes` are veh/h at multiplier 1.0.
pub fn sample_arrivals<R: Rng>(
    volumes: &[f64],
    multiplier: f64,
    dt: f64,
    rng: &mut R,
) -> Vec<u32> {
    volumes
        .iter()
        .map(|&v| {
            let lambda = v * multiplier * dt / 3600.0;
            if lambda <= 0.0 {
                return 0;
            }
            let poisson = Poisson::new(lambda).expect("positive rate");
            poisson.sample(rng) as u32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> Network {
        Network::build(&Config::default_corridor()).expect("default corridor builds")
    }

    fn approach(net: &Network, zone: &ZoneInfo, link: &str, lane: u8) -> usize {
        let id = net.link_named(link).unwrap().id;
        zone.approach_index(id, lane)
            .unwrap_or_else(|| panic!("no approach ({link}, {lane})"))
    }

    #[test]
    fn default_corridor_inventory() {
        let net = net();
        assert_eq!(net.links.len(), 34);
        assert_eq!(net.nodes.len(), 19);
        assert_eq!(net.routes.len(), 22);
        assert_eq!(net.detectors.len(), 6);
        assert_eq!(net.signals.len(), 2);
        assert_eq!(net.zones.len(), 6);
        let count = |k: NodeKind| net.nodes.iter().filter(|n| n.kind == k).count();
        assert_eq!(count(NodeKind::Signalized), 2);
        assert_eq!(count(NodeKind::StopControlled), 1);
        assert_eq!(count(NodeKind::Merge), 3);
        assert_eq!(count(NodeKind::Junction), 3);
        assert_eq!(count(NodeKind::Terminus), 10);
    }

    #[test]
    fn group_mean_trip_lengths() {
        let net = net();
        let mean = |g: RouteGroup| {
            let (mut wl, mut w) = (0.0, 0.0);
            for r in &net.routes {
                if std::mem::discriminant(&r.group) == std::mem::discriminant(&g) {
                    wl += r.volume * r.length;
                    w += r.volume;
                }
            }
            wl / w
        };
        let cases = [
            (RouteGroup::Local, 1700.0),
            (RouteGroup::Highway, 1500.0),
            (RouteGroup::LocalToHighway, 1700.0),
            (RouteGroup::HighwayToLocal, 2000.0),
        ];
        for (g, target) in cases {
            let m = mean(g.clone());
            assert!(
                (m - target).abs() <= 0.10 * target,
                "{g:?} mean {m:.1} m is not within 10% of {target}"
            );
        }
    }

    #[test]
    fn route_arcs_and_crossing_windows() {
        let net = net();
        let r = net.route_named("ew_we").unwrap();
        assert_eq!(r.offsets, vec![0.0, 700.0, 1050.0, 1400.0]);
        assert_eq!(r.length, 2000.0);
        assert_eq!(r.zones.len(), 3);
        let z0 = &r.zones[0];
        assert_eq!((z0.window_start, z0.box_entry, z0.box_exit), (550.0, 700.0, 720.0));
        assert_eq!(z0.lanes.len(), 2);
        let z1 = &r.zones[1];
        assert_eq!((z1.window_start, z1.box_entry, z1.box_exit), (900.0, 1050.0, 1070.0));
        let z2 = &r.zones[2];
        assert_eq!((z2.window_start, z2.box_entry, z2.box_exit), (1250.0, 1400.0, 1420.0));

        let (i, off) = r.link_at(1100.0);
        assert_eq!(i, 2);
        assert!((off - 50.0).abs() < 1e-12);
        let (i, off) = r.link_at(2000.0);
        assert_eq!(i, 3);
        assert!((off - 600.0).abs() < 1e-12);
    }

    #[test]
    fn spawn_lanes_follow_first_connection() {
        let net = net();
        assert_eq!(net.route_named("w_to_n").unwrap().spawn_lanes, vec![2]);
        assert_eq!(net.route_named("l2h_e").unwrap().spawn_lanes, vec![0]);
        assert_eq!(net.route_named("hw_we").unwrap().spawn_lanes, vec![0, 1, 2, 3]);
    }

    #[test]
    fn crossing_conflicts_at_the_main_intersection() {
        let net = net();
        let zi = net.zone_at(net.node_named("i1").unwrap().id).unwrap();
        let z = &net.zones[zi];
        assert_eq!(z.approaches.len(), 10);
        let eb0 = approach(&net, z, "w_i1_eb", 0);
        let eb_bay = approach(&net, z, "w_i1_eb", 2);
        let wb0 = approach(&net, z, "u_i1_wb", 0);
        let wb1 = approach(&net, z, "u_i1_wb", 1);
        let sb0 = approach(&net, z, "n_i1_sb", 0);
        let nb0 = approach(&net, z, "rtn_i1_nb", 0);
        let nb_bay = approach(&net, z, "rtn_i1_nb", 2);
        assert_eq!(z.conflict_between(eb0, sb0), Conflict::Lateral);
        assert_eq!(z.conflict_between(eb0, nb0), Conflict::Lateral);
        assert_eq!(z.conflict_between(eb0, wb0), Conflict::None);
        assert_eq!(z.conflict_between(eb_bay, wb0), Conflict::Lateral);
        assert_eq!(z.conflict_between(eb_bay, nb0), Conflict::Lateral);
        assert_eq!(z.conflict_between(nb_bay, wb1), Conflict::SameLane);
        assert_eq!(z.conflict_between(nb_bay, wb0), Conflict::Lateral);
        // The outer southbound lane carries both the through and the right
        // turn; the crossing relation wins over the shared-lane merge.
        assert_eq!(z.conflict_between(sb0, wb0), Conflict::Lateral);
        for a in 0..z.approaches.len() {
            for b in 0..z.approaches.len() {
                assert_eq!(z.conflict_between(a, b), z.conflict_between(b, a));
            }
        }
    }

    #[test]
    fn minor_street_merges_without_crossing() {
        let net = net();
        let zi = net.zone_at(net.node_named("u").unwrap().id).unwrap();
        let z = &net.zones[zi];
        assert_eq!(z.approaches.len(), 6);
        for a in &z.approaches {
            let single = net.link(a.link).lanes == 1;
            assert_eq!(a.minor, single, "{}", net.link(a.link).name);
        }
        for a in 0..z.approaches.len() {
            for b in 0..z.approaches.len() {
                assert_ne!(z.conflict_between(a, b), Conflict::Lateral);
            }
        }
        let mn = approach(&net, z, "mn_u_sb", 0);
        let wb0 = approach(&net, z, "i2_u_wb", 0);
        let wb1 = approach(&net, z, "i2_u_wb", 1);
        assert_eq!(z.conflict_between(mn, wb0), Conflict::SameLane);
        assert_eq!(z.conflict_between(mn, wb1), Conflict::None);
    }

    #[test]
    fn ramp_merges_touch_only_the_outer_lane() {
        let net = net();
        let zi = net.zone_at(net.node_named("m_eb").unwrap().id).unwrap();
        let z = &net.zones[zi];
        assert_eq!(z.approaches.len(), 5);
        let ramp = approach(&net, z, "on_eb", 0);
        assert!(z.approaches[ramp].minor);
        for lane in 0..4 {
            let main = approach(&net, z, "deb_meb", lane);
            let expect = if lane == 0 { Conflict::SameLane } else { Conflict::None };
            assert_eq!(z.conflict_between(ramp, main), expect, "lane {lane}");
        }
    }

    #[test]
    fn ramp_terminal_crossings() {
        let net = net();
        let zi = net.zone_at(net.node_named("rt_n").unwrap().id).unwrap();
        let z = &net.zones[zi];
        assert_eq!(z.approaches.len(), 6);
        let off_e = approach(&net, z, "off_eb", 0);
        let off_w = approach(&net, z, "off_wb", 0);
        let nb0 = approach(&net, z, "rts_rtn_nb", 0);
        let nb1 = approach(&net, z, "rts_rtn_nb", 1);
        let sb0 = approach(&net, z, "i1_rtn_sb", 0);
        // The eastbound off-ramp merges right into the inner northbound lane
        // and turns left across it toward the southbound side.
        assert_eq!(z.conflict_between(off_e, nb1), Conflict::SameLane);
        assert_eq!(z.conflict_between(off_e, nb0), Conflict::Lateral);
        assert_eq!(z.conflict_between(off_e, sb0), Conflict::Lateral);
        assert_eq!(z.conflict_between(off_w, nb0), Conflict::Lateral);
        assert_eq!(z.conflict_between(off_e, off_w), Conflict::None);
        assert_eq!(z.conflict_between(nb0, sb0), Conflict::None);
    }

    #[test]
    fn junction_with_a_crossing_movement_is_rejected() {
        let mut cfg = Config::default_corridor();
        // Without the curl the loop ramp reads as a left turn across the
        // southbound lanes at its junction.
        let ramp = cfg.links.iter_mut().find(|l| l.name == "on_wb").unwrap();
        ramp.heading_in = None;
        let err = Network::build(&cfg).unwrap_err().to_string();
        assert!(err.contains("junction"), "{err}");
    }

    #[test]
    fn green_splits_follow_critical_lanes() {
        let net = net();
        let i1 = net.signal_at(net.node_named("i1").unwrap().id).unwrap();
        assert_eq!(i1.phases.len(), 4);
        let greens: Vec<f64> = i1.phases.iter().map(|p| p.green_off - p.green_on).collect();
        // Critical lane volumes 185 / 100 / 240 / 200 share 70 s of green.
        let crits = [185.0, 100.0, 240.0, 200.0];
        let sum: f64 = crits.iter().sum();
        for (g, c) in greens.iter().zip(crits) {
            assert!((g - 70.0 * c / sum).abs() < 1e-9, "green {g}");
        }
        let total: f64 =
            i1.phases.iter().map(|p| p.green_off - p.green_on + p.yellow + p.all_red).sum();
        assert!((total - i1.cycle).abs() < 1e-9);
        for p in &i1.phases {
            assert!(p.green_off - p.green_on >= MIN_GREEN);
        }

        let i2 = net.signal_at(net.node_named("i2").unwrap().id).unwrap();
        let g: Vec<f64> = i2.phases.iter().map(|p| p.green_off - p.green_on).collect();
        assert!((g[0] - 65.0 * 185.0 / 785.0).abs() < 1e-9);
        assert!((g[1] - 65.0 * 600.0 / 785.0).abs() < 1e-9);
    }

    #[test]
    fn signal_states_walk_the_cycle() {
        let net = net();
        let eb = net.link_named("w_i1_eb").unwrap().id;
        let eb_out = net.link_named("i1_u_eb").unwrap().id;
        let left_out = net.link_named("i1_n_nb").unwrap().id;
        let i1 = net.signal_at(net.node_named("i1").unwrap().id).unwrap();
        let g0 = i1.phases[0].green_off;

        let (s, rem) = net.signal_state(eb, eb_out, 1.0).unwrap();
        assert_eq!(s, SignalState::Green);
        assert!((rem - (g0 - 1.0)).abs() < 1e-9);
        let (s, _) = net.signal_state(eb, eb_out, g0 + 1.0).unwrap();
        assert_eq!(s, SignalState::Yellow);
        let (s, _) = net.signal_state(eb, eb_out, g0 + 4.5).unwrap();
        assert_eq!(s, SignalState::Red);
        // Wraps into the next cycle's green.
        let (s, _) = net.signal_state(eb, eb_out, i1.cycle + 1.0).unwrap();
        assert_eq!(s, SignalState::Green);

        let (s, rem) = net.signal_state(eb, left_out, 0.0).unwrap();
        assert_eq!(s, SignalState::Red);
        assert!((rem - i1.phases[1].green_on).abs() < 1e-9);
        let (s, _) = net.signal_state(eb, left_out, i1.phases[1].green_on + 0.5).unwrap();
        assert_eq!(s, SignalState::Green);

        // Movements at unsignalized nodes are uncontrolled.
        let on_eb = net.link_named("on_eb").unwrap().id;
        let meb_he = net.link_named("meb_he").unwrap().id;
        assert!(net.movement_signal(on_eb, meb_he).is_none());
        assert!(net.signal_state(on_eb, meb_he, 0.0).is_err());
    }

    #[test]
    fn signal_offset_shifts_states() {
        let mut cfg = Config::default_corridor();
        cfg.signal_plans[0].offset = 10.0;
        let net = Network::build(&cfg).unwrap();
        let eb = net.link_named("w_i1_eb").unwrap().id;
        let out = net.link_named("i1_u_eb").unwrap().id;
        let (_, rem) = net.signal_state(eb, out, 10.0).unwrap();
        let i1 = net.signal_at(net.node_named("i1").unwrap().id).unwrap();
        assert!((rem - i1.phases[0].green_off).abs() < 1e-9);
    }

    #[test]
    fn conflicting_greens_are_rejected() {
        let mut cfg = Config::default_corridor();
        // Fold the north-south through phase into the east-west phase.
        let plan = &mut cfg.signal_plans[0];
        let moved = plan.phases[2].movements.clone();
        plan.phases[0].movements.extend(moved.iter().cloned());
        let err = Network::build(&cfg).unwrap_err().to_string();
        assert!(err.contains("crossing movements"), "{err}");
    }

    #[test]
    fn disconnected_route_is_rejected() {
        let mut cfg = Config::default_corridor();
        cfg.routes[0].links.swap(1, 2);
        assert!(Network::build(&cfg).is_err());
    }

    #[test]
    fn conflict_zone_handoff_keeps_geometry() {
        let net = net();
        let zi = net.zone_at(net.node_named("i2").unwrap().id).unwrap();
        let z = &net.zones[zi];
        let cz = z.to_conflict_zone(150.0).unwrap();
        assert_eq!(cz.approach_count(), z.approaches.len());
        assert!((cz.planning_distance(0) - 170.0).abs() < 1e-12);
        for a in 0..z.approaches.len() {
            for b in 0..z.approaches.len() {
                if a != b {
                    assert_eq!(cz.conflict_between(a, b), z.conflict_between(a, b));
                }
            }
        }
    }

    #[test]
    fn no_arrivals_without_demand() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let counts = sample_arrivals(&[600.0, 1200.0], 0.0, 0.1, &mut rng);
        assert_eq!(counts, vec![0, 0]);
    }

    #[test]
    fn hourly_arrivals_match_the_rate()  {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut total = 0u32;
        for _ in 0..36_000 {
            total += sample_arrivals(&[1200.0], 1.0, 0.1, &mut rng)[0];
        }
        let sigma = (1200.0f64).sqrt();
        assert!(
            (total as f64 - 1200.0).abs() <= 3.0 * sigma,
            "hour total {total} outside 1200 +/- {:.0}",
            3.0 * sigma
        );
    }

    #[test]
    fn arrival_sampling_is_deterministic() {
        let volumes = vec![250.0, 3795.0, 120.0];
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..1000)
                .map(|_| sample_arrivals(&volumes, 1.3, 0.1, &mut rng))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(42), draw(42));
        assert_ne!(draw(42), draw(43));
    }

    #[test]
    fn arrival_mean_is_unbiased() {
        let mut totals = Vec::new();
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut total = 0u32;
            for _ in 0..36_000 {
                total += sample_arrivals(&[1200.0], 1.0, 0.1, &mut rng)[0];
            }
            totals.push(total as f64);
        }
        let mean = totals.iter().sum::<f64>() / totals.len() as f64;
        let se = (1200.0f64 / 20.0).sqrt();
        assert!((mean - 1200.0).abs() <= 2.0 * se, "mean {mean:.1}");
    }
}
