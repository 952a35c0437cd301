//! Scenario engine: demand, movement, control selection, and the safety
//! audits that gate every step.
//!
//! A step advances in a fixed order: sample arrivals, apply lane changes,
//! pick a control for every vehicle (coordinated plan inside an active
//! control zone, otherwise the behavioral models), integrate ascending by
//! vehicle id, process link and zone transitions, then audit and emit
//! metrics. The order is part of the contract: identical configuration and
//! seed reproduce identical event streams byte for byte.
//!
//! Control never stacks: a scheduled vehicle follows its plan capped by the
//! spacing controller (the safety governor); everyone else runs the
//! behavioral models plus virtual stop lines for signals, unserved lanes,
//! gap-acceptance yields, and unscheduled conflict-zone approaches.
//!
//! Breaches of physical invariants (overlapping vehicles, out-of-order
//! releases, teleports, broken conservation) abort the run with a state
//! dump. Spacing-rule and box-separation shortfalls are counted and
//! reported instead, so a degraded run still yields evidence.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::behavior::{
    car_following_accel, crossing_clear, lane_change_desired, signal_approach_accel, Approaching,
    CarFollowingParams, LaneChangeParams, Leader,
};
use crate::coordination::{Conflict, Coordinator};
use crate::dynamics::{self, clamp_control, safe_distance, VehicleLimits, VehicleState};
use crate::error::CoreError;
use crate::ids::{LinkId, RouteId, VehicleId};
use crate::metrics::{
    DetectorAggregator, FlowDensityPoint, ThroughputPoint, TripAccumulator, TripRecord,
    STOP_SPEED,
};
use crate::network::{sample_arrivals, Network};
use crate::optctrl::{min_transit_time, Trajectory};
use crate::sink::{
    write_flow_density, write_rows, write_summary, write_throughput, write_trips,
    TrajectorySample, TrajectoryWriter,
};

/// Extra clearance a spawning vehicle leaves beyond its braking needs, m.
const SPAWN_MARGIN: f64 = 0.5;
/// Firm but sub-maximal deceleration assumed available to absorb a speed
/// difference when judging spawn and merge gaps, m/s^2.
const AVOID_BRAKE: f64 = 4.5;
/// Slack subtracted from the leader gap inside the safety governor, m. Keeps
/// the governed equilibrium strictly wider than the spacing rule it guards.
const GOV_MARGIN: f64 = 0.5;
/// A scheduled vehicle this far behind its plan loses the slot, m.
const DRAG_LIMIT: f64 = 10.0;
/// Pause between fallback scheduling attempts, s.
const RETRY_INTERVAL: f64 = 0.5;
/// A retry accepts a slot no later than 1.5x the free-flow transit plus
/// this, s.
const RETRY_SLACK: f64 = 1.0;
/// Shortest remaining distance over which a plan is still worth making, m.
const MIN_ENTRY_DIST: f64 = 1.0;
/// Lane changes toward connectivity start this far before the dead end, m.
const MANDATORY_DISTANCE: f64 = 200.0;
/// Closer to the link end than this, a discretionary target must still
/// serve the route, m.
const ROUTE_VALID_DISTANCE: f64 = 300.0;
/// No lane changes in the first stretch of a link, where a follower still
/// on the upstream link would be invisible to the safety check, m.
const LC_MIN_POS: f64 = 50.0;
/// Extra room left ahead of a plan-holding vehicle when moving into its
/// lane, m.
const CUT_IN_MARGIN: f64 = 1.0;
/// Further cut-in allowance per unit of closing speed toward a plan
/// holder, s.
const CUT_IN_HORIZON: f64 = 1.2;
/// Yielding vehicles judge clearance once within this distance of the stop
/// line, m.
const GAP_EVAL_DIST: f64 = 15.0;
/// Acceleration a committed yielding vehicle is assumed to sustain while
/// crossing, m/s^2. Deliberately below the hard limit so the estimate errs
/// toward longer crossing times.
const COMMIT_ACCEL: f64 = 2.0;
/// Static slack added to every projected merge slot, m.
const CROSS_MARGIN: f64 = 2.0;
/// No moving into a junction approach lane across the last stretch before
/// an unsignalized node, m. A yielding driver who has judged that lane
/// clear cannot see a vehicle weaving into it late.
const NO_WEAVE_DISTANCE: f64 = 200.0;
/// How far upstream of a node gap scans can see, following lane
/// connectivity across link boundaries, m. Covers the widest projected
/// slot a crossing estimate can demand.
const SCAN_HORIZON: f64 = 450.0;
/// Time gap a crossing movement demands of conflicting traffic, s.
const T_CRIT: f64 = 6.0;
/// How far downstream the leader search walks across links, m.
const CF_LOOKAHEAD: f64 = 250.0;
/// Spacing between trajectory samples, s.
const SAMPLE_PERIOD: f64 = 1.0;
/// Aggregation window for detectors and throughput, s.
const WINDOW: f64 = 60.0;

/// Ground a follower at `v_behind` gains on a leader holding `v_ahead`
/// while braking to match it at [`AVOID_BRAKE`]. Zero when the follower is
/// no faster.
fn closure_distance(v_behind: f64, v_ahead: f64) -> f64 {
    let dv = (v_behind - v_ahead).max(0.0);
    dv * dv / (2.0 * AVOID_BRAKE)
}

/// Time to cover `dist` starting from `v0` under [`COMMIT_ACCEL`] capped at
/// `cap`, and the speed reached at the end.
fn crossing_estimate(v0: f64, dist: f64, cap: f64) -> (f64, f64) {
    let v0 = v0.clamp(0.0, cap);
    let d_accel = (cap * cap - v0 * v0) / (2.0 * COMMIT_ACCEL);
    if d_accel >= dist {
        let v_end = (v0 * v0 + 2.0 * COMMIT_ACCEL * dist).sqrt();
        ((v_end - v0) / COMMIT_ACCEL, v_end)
    } else {
        ((cap - v0) / COMMIT_ACCEL + (dist - d_accel) / cap, cap)
    }
}

/// Per zone approach, the lanes a scan must walk to see everything bound
/// for the node within [`SCAN_HORIZON`]: the approach lane itself plus the
/// upstream lanes feeding it, each with the distance from the node to the
/// segment's downstream end.
fn build_approach_scan(net: &Network) -> Vec<Vec<Vec<(LinkId, u8, f64)>>> {
    net.zones
        .iter()
        .map(|z| {
            z.approaches
                .iter()
                .map(|apr| {
                    let mut segs = vec![(apr.link, apr.lane, 0.0)];
                    let mut i = 0;
                    while i < segs.len() {
                        let (l, lane, off) = segs[i];
                        i += 1;
                        let reach = off + net.link(l).length;
                        if reach >= SCAN_HORIZON {
                            continue;
                        }
                        let from = net.link(l).from;
                        for f in &net.links {
                            if f.to != from {
                                continue;
                            }
                            if let Some(map) = net.lane_map(f.id, l) {
                                for &(fl, tl) in map {
                                    if tl == lane {
                                        segs.push((f.id, fl, reach));
                                    }
                                }
                            }
                        }
                    }
                    segs
                })
                .collect()
        })
        .collect()
}

/// One scenario cell: which driver population runs and which control layer
/// is active. Scenarios 1 and 2 are signalized baselines with human and
/// automated headways; 3 and 4 replace the signals with conflict-zone
/// coordination for the same two populations.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub scenario: u8,
    /// Desired time headway of the driver population, s.
    pub headway: f64,
    /// Control-zone length upstream of each conflict box, m.
    pub control_zone_length: f64,
    pub signals_enabled: bool,
    pub coordination_enabled: bool,
    pub demand_multiplier: f64,
    pub duration: f64,
    /// Initial stretch excluded from aggregate metrics, s.
    pub warmup: f64,
    pub dt: f64,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn for_scenario(scenario: u8, net: &Network) -> Result<Self, CoreError> {
        let (headway, coordination) = match scenario {
            1 => (net.headways.human, false),
            2 => (net.headways.av, false),
            3 => (net.headways.human, true),
            4 => (net.headways.av, true),
            _ => {
                return Err(CoreError::validation(format!(
                    "scenario must be 1..=4, got {scenario}"
                )))
            }
        };
        Ok(ScenarioConfig {
            scenario,
            headway,
            control_zone_length: net.defaults.control_zone_length,
            signals_enabled: !coordination,
            coordination_enabled: coordination,
            demand_multiplier: 1.0,
            duration: net.defaults.duration,
            warmup: net.defaults.warmup,
            dt: net.defaults.dt,
            seed: net.defaults.seed,
        })
    }

    pub fn with_demand(mut self, multiplier: f64) -> Self {
        self.demand_multiplier = multiplier;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_duration(mut self, duration: f64) -> Self {
        self.duration = duration;
        self
    }
}

/// A vehicle's relation to the next coordinated crossing on its route.
#[derive(Debug, Clone)]
enum ZoneProgress {
    /// Not yet inside the control window, or inside on a lane that cannot
    /// cross (held at the line until a lane change fixes that).
    Free,
    /// Inside the window without a slot: holds short of the box and retries.
    Fallback { next_retry: f64 },
    /// Owns a slot and tracks its plan until released at the box exit.
    Scheduled {
        /// Arc where the plan's position coordinate is zero.
        base_arc: f64,
        plan: Trajectory,
        entered_box: Option<f64>,
        exited_box: Option<f64>,
    },
}

#[derive(Debug)]
struct Vehicle {
    state: VehicleState,
    /// Index into the route's link list.
    link_idx: usize,
    /// Index into the route's zone list: the crossing currently governing
    /// or the next one downstream.
    next_zone: usize,
    zone: ZoneProgress,
    /// Earliest time of the next discretionary lane change.
    lc_ready_at: f64,
    /// A yielding vehicle that has judged its gap and begun crossing keeps
    /// going; clearance is not re-litigated mid-maneuver.
    go_committed: bool,
    acc: TripAccumulator,
}

/// A completed passage through a coordinated conflict zone, with the actual
/// box crossing times observed on the dt grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReleaseEvent {
    pub vehicle: u32,
    pub zone: usize,
    pub approach: usize,
    pub box_entry: f64,
    pub box_exit: f64,
}

/// Outcome counters of one run. `arrived` and `total_travel_time` cover
/// vehicles that departed after warmup; travel time includes the unfinished
/// remainder of vehicles still in the network when the run ends, and never
/// the wait at an origin gate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: u8,
    pub demand_multiplier: f64,
    pub seed: u64,
    pub duration: f64,
    pub entered: u64,
    pub exited: u64,
    pub in_network: u64,
    pub gate_queue: u64,
    pub arrived: u64,
    pub total_travel_time: f64,
    /// Spacing-rule shortfalls beyond tolerance behind scheduled vehicles.
    pub eq3_violations: u64,
    /// Conflict-box separations below the headway, observed at release.
    pub separation_violations: u64,
    /// Vehicle-steps spent at the hard braking floor.
    pub emergency_steps: u64,
    pub vehicle_steps: u64,
    /// Vehicle-steps at standstill inside a coordinated control window.
    pub zone_stop_steps: u64,
    pub coordination_failures: u64,
    pub lane_changes: u64,
    #[serde(skip)]
    pub trips: Vec<TripRecord>,
    #[serde(skip)]
    pub flow_density: Vec<FlowDensityPoint>,
    #[serde(skip)]
    pub throughput: Vec<ThroughputPoint>,
}

/// What zone bookkeeping decided for one vehicle, resolved before any state
/// is touched.
enum ZoneAction {
    Nothing,
    Demote,
    /// Ask the coordinator for a slot over `dist` meters of approach.
    Attempt {
        approach: usize,
        dist: f64,
        retrying: bool,
    },
    /// In the window on a lane with no crossing movement; re-check shortly.
    WrongLane { retrying: bool },
}

pub struct World<'n> {
    net: &'n Network,
    cfg: ScenarioConfig,
    limits: VehicleLimits,
    cf: CarFollowingParams,
    lc: LaneChangeParams,
    t: f64,
    step: u64,
    sample_every: u64,
    window_every: u64,
    rng: ChaCha8Rng,
    vehicles: BTreeMap<u32, Vehicle>,
    next_id: u32,
    /// Vehicle ids per link and lane, ascending by position on the link.
    occupancy: Vec<Vec<Vec<u32>>>,
    /// Link position by vehicle id; kept in lockstep with `occupancy` so
    /// ordering queries never walk the vehicle map.
    pos_cache: Vec<f64>,
    speed_cache: Vec<f64>,
    gates: Vec<VecDeque<f64>>,
    volumes: Vec<f64>,
    coordinators: Vec<Coordinator>,
    /// Scan segments per zone approach; see [`build_approach_scan`].
    approach_scan: Vec<Vec<Vec<(LinkId, u8, f64)>>>,
    /// Actual (box entry, box exit) of the last release per zone approach.
    last_occupancy: Vec<Vec<Option<(f64, f64)>>>,
    releases: Vec<ReleaseEvent>,
    aggregators: Vec<DetectorAggregator>,
    dets_on_link: Vec<Vec<usize>>,
    det_crossings: Vec<u32>,
    entered: u64,
    exited: u64,
    arrived: u64,
    total_travel_time: f64,
    trips: Vec<TripRecord>,
    flow_density: Vec<FlowDensityPoint>,
    throughput: Vec<ThroughputPoint>,
    eq3_violations: u64,
    separation_violations: u64,
    emergency_steps: u64,
    vehicle_steps: u64,
    zone_stop_steps: u64,
    lane_changes: u64,
    trajectories: Option<TrajectoryWriter>,
}

impl<'n> World<'n> {
    pub fn new(cfg: ScenarioConfig, net: &'n Network) -> Result<Self, CoreError> {
        if !(cfg.dt > 0.0) || !cfg.dt.is_finite() {
            return Err(CoreError::validation("dt must be positive"));
        }
        if !(cfg.headway > 0.0) {
            return Err(CoreError::validation("headway must be positive"));
        }
        if !(cfg.demand_multiplier >= 0.0) || !cfg.demand_multiplier.is_finite() {
            return Err(CoreError::validation(
                "demand multiplier must be non-negative",
            ));
        }
        if cfg.coordination_enabled
            && (cfg.control_zone_length - net.defaults.control_zone_length).abs() > 1e-9
        {
            return Err(CoreError::validation(
                "control zone length differs from the network's crossing windows",
            ));
        }
        let coordinators = if cfg.coordination_enabled {
            net.zones
                .iter()
                .map(|z| {
                    z.to_conflict_zone(cfg.control_zone_length)
                        .map(Coordinator::new)
                })
                .collect::<Result<Vec<_>, _>>()?
        } else {
            Vec::new()
        };
        let last_occupancy = net
            .zones
            .iter()
            .map(|z| vec![None; z.approaches.len()])
            .collect();
        let aggregators = net
            .detectors
            .iter()
            .map(|d| {
                DetectorAggregator::new(
                    &d.name,
                    d.lanes,
                    net.link(d.link).length / 1000.0,
                    WINDOW,
                    0.0,
                )
            })
            .collect();
        let mut dets_on_link = vec![Vec::new(); net.links.len()];
        for (i, d) in net.detectors.iter().enumerate() {
            dets_on_link[d.link.index()].push(i);
        }
        Ok(World {
            net,
            limits: net.vehicle_limits(cfg.headway),
            cf: CarFollowingParams::default(),
            lc: LaneChangeParams::default(),
            t: 0.0,
            step: 0,
            sample_every: (SAMPLE_PERIOD / cfg.dt).round().max(1.0) as u64,
            window_every: (WINDOW / cfg.dt).round().max(1.0) as u64,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            vehicles: BTreeMap::new(),
            next_id: 0,
            occupancy: net
                .links
                .iter()
                .map(|l| vec![Vec::new(); l.lanes as usize])
                .collect(),
            pos_cache: Vec::new(),
            speed_cache: Vec::new(),
            gates: vec![VecDeque::new(); net.routes.len()],
            volumes: net.volumes(),
            coordinators,
            approach_scan: build_approach_scan(net),
            last_occupancy,
            releases: Vec::new(),
            aggregators,
            dets_on_link,
            det_crossings: vec![0; net.detectors.len()],
            entered: 0,
            exited: 0,
            arrived: 0,
            total_travel_time: 0.0,
            trips: Vec::new(),
            flow_density: Vec::new(),
            throughput: Vec::new(),
            eq3_violations: 0,
            separation_violations: 0,
            emergency_steps: 0,
            vehicle_steps: 0,
            zone_stop_steps: 0,
            lane_changes: 0,
            trajectories: None,
            cfg,
        })
    }

    /// Stream per-second trajectory samples to a CSV file as the run
    /// advances.
    pub fn stream_trajectories(&mut self, path: &Path) -> Result<(), CoreError> {
        self.trajectories = Some(TrajectoryWriter::create(path)?);
        Ok(())
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn vehicle_count(&self) -> usize {
        self.vehicles.len()
    }

    pub fn entered(&self) -> u64 {
        self.entered
    }

    pub fn exited(&self) -> u64 {
        self.exited
    }

    pub fn gate_depth(&self) -> usize {
        self.gates.iter().map(|g| g.len()).sum()
    }

    pub fn queued_total(&self) -> usize {
        self.coordinators.iter().map(|c| c.len()).sum()
    }

    pub fn releases(&self) -> &[ReleaseEvent] {
        &self.releases
    }

    pub fn trips(&self) -> &[TripRecord] {
        &self.trips
    }

    pub fn arc_of(&self, vehicle: u32) -> Option<f64> {
        self.vehicles.get(&vehicle).map(|v| v.state.position)
    }

    pub fn speed_of(&self, vehicle: u32) -> Option<f64> {
        self.vehicles.get(&vehicle).map(|v| v.state.speed)
    }

    /// Place one vehicle at the start of a route right now, bypassing the
    /// demand gates. Diagnostic hook; arrivals normally come from sampling.
    pub fn seed_vehicle(&mut self, route: &str) -> Result<VehicleId, CoreError> {
        let r = self
            .net
            .route_named(route)
            .ok_or_else(|| CoreError::validation(format!("unknown route {route}")))?;
        let lane = *r
            .spawn_lanes
            .first()
            .ok_or_else(|| CoreError::consistency(format!("route {route} has no spawn lanes")))?;
        let link = r.links[0];
        let id = r.id;
        let v0 = self.net.link(link).free_speed.min(self.limits.v_max);
        Ok(self.place(id, link, lane, v0))
    }

    fn place(&mut self, route: RouteId, link: LinkId, lane: u8, v0: f64) -> VehicleId {
        let id = VehicleId(self.next_id);
        self.next_id += 1;
        let state = VehicleState {
            id,
            route,
            position: 0.0,
            speed: v0,
            accel: 0.0,
            lane,
            entry_time: self.t,
            zone_entry_time: None,
        };
        self.vehicles.insert(
            id.0,
            Vehicle {
                state,
                link_idx: 0,
                next_zone: 0,
                zone: ZoneProgress::Free,
                lc_ready_at: 0.0,
                go_committed: false,
                acc: TripAccumulator::new(self.t),
            },
        );
        self.pos_cache.push(0.0);
        self.speed_cache.push(v0);
        self.occupancy[link.index()][lane as usize].insert(0, id.0);
        self.entered += 1;
        id
    }

    pub fn run_steps(&mut self, steps: u64) -> Result<(), CoreError> {
        for _ in 0..steps {
            self.step_once()?;
        }
        Ok(())
    }

    pub fn step_once(&mut self) -> Result<(), CoreError> {
        self.spawn_arrivals();
        self.lane_change_pass();
        let controls = self.control_pass()?;
        self.integrate_pass(&controls)?;
        self.topology_pass()?;
        self.release_pass()?;
        self.audit_pass()?;
        self.metrics_pass()?;
        self.step += 1;
        self.t += self.cfg.dt;
        Ok(())
    }

    /// Wrap up the run: flush writers, charge unfinished post-warmup trips
    /// for their time so far, and hand back the summary.
    pub fn finish(mut self) -> Result<RunSummary, CoreError> {
        if let Some(w) = self.trajectories.take() {
            w.finish()?;
        }
        for v in self.vehicles.values() {
            if v.acc.departed + 1e-9 >= self.cfg.warmup {
                self.total_travel_time += self.t - v.acc.departed;
            }
        }
        Ok(RunSummary {
            scenario: self.cfg.scenario,
            demand_multiplier: self.cfg.demand_multiplier,
            seed: self.cfg.seed,
            duration: self.t,
            entered: self.entered,
            exited: self.exited,
            in_network: self.vehicles.len() as u64,
            gate_queue: self.gate_depth() as u64,
            arrived: self.arrived,
            total_travel_time: self.total_travel_time,
            eq3_violations: self.eq3_violations,
            separation_violations: self.separation_violations,
            emergency_steps: self.emergency_steps,
            vehicle_steps: self.vehicle_steps,
            zone_stop_steps: self.zone_stop_steps,
            coordination_failures: self.coordinators.iter().map(|c| c.failures).sum(),
            lane_changes: self.lane_changes,
            trips: self.trips,
            flow_density: self.flow_density,
            throughput: self.throughput,
        })
    }

    /// First vehicle strictly ahead on a lane of a link, as (id, link pos).
    fn ahead_on(&self, link: LinkId, lane: u8, pos: f64) -> Option<(u32, f64)> {
        let list = &self.occupancy[link.index()][lane as usize];
        let i = list.partition_point(|&o| self.pos_cache[o as usize] <= pos);
        list.get(i).map(|&o| (o, self.pos_cache[o as usize]))
    }

    /// Last vehicle strictly behind `pos` on a lane, as (id, link pos).
    fn behind_on(&self, link: LinkId, lane: u8, pos: f64) -> Option<(u32, f64)> {
        let list = &self.occupancy[link.index()][lane as usize];
        let i = list.partition_point(|&o| self.pos_cache[o as usize] < pos);
        i.checked_sub(1)
            .and_then(|k| list.get(k))
            .map(|&o| (o, self.pos_cache[o as usize]))
    }

    /// Nearest leader for a vehicle if it sat on `lane`, walking the route's
    /// downstream links until the lane stops being served or the lookahead
    /// runs out.
    fn leader_on_lane(&self, v: &Vehicle, lane: u8) -> Option<Leader> {
        let route = self.net.route(v.state.route);
        let mut link = route.links[v.link_idx];
        let mut lane = lane;
        let pos = v.state.position - route.offsets[v.link_idx];
        if let Some((o, p)) = self.ahead_on(link, lane, pos) {
            return Some(Leader {
                gap: p - pos,
                speed: self.speed_cache[o as usize],
            });
        }
        let mut carried = self.net.link(link).length - pos;
        for idx in v.link_idx + 1..route.links.len() {
            if carried > CF_LOOKAHEAD {
                return None;
            }
            let next = route.links[idx];
            lane = self.net.next_lane(link, lane, next)?;
            link = next;
            if let Some(&o) = self.occupancy[link.index()][lane as usize].first() {
                return Some(Leader {
                    gap: carried + self.pos_cache[o as usize],
                    speed: self.speed_cache[o as usize],
                });
            }
            carried += self.net.link(link).length;
        }
        None
    }

    fn leader_of(&self, v: &Vehicle) -> Option<Leader> {
        self.leader_on_lane(v, v.state.lane)
    }

    // --- phase: arrivals ---------------------------------------------------

    fn spawn_arrivals(&mut self) {
        let counts = sample_arrivals(
            &self.volumes,
            self.cfg.demand_multiplier,
            self.cfg.dt,
            &mut self.rng,
        );
        for (r, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                self.gates[r].push_back(self.t);
            }
        }
        for r in 0..self.gates.len() {
            while !self.gates[r].is_empty() {
                match self.spawn_slot(RouteId(r as u16)) {
                    Some((link, lane, v0)) => {
                        self.place(RouteId(r as u16), link, lane, v0);
                        self.gates[r].pop_front();
                    }
                    None => break,
                }
            }
        }
    }

    /// Spawn lane with the widest headroom that admits a vehicle at the
    /// link's free speed, if any. The entrant must be able to yield to its
    /// leader with firm but sub-maximal braking.
    fn spawn_slot(&self, route: RouteId) -> Option<(LinkId, u8, f64)> {
        let r = self.net.route(route);
        let link = r.links[0];
        let v0 = self.net.link(link).free_speed.min(self.limits.v_max);
        let mut best: Option<(u8, f64)> = None;
        for &lane in &r.spawn_lanes {
            let room = match self.occupancy[link.index()][lane as usize].first() {
                None => f64::INFINITY,
                Some(&lead) => {
                    let gap = self.pos_cache[lead as usize];
                    let ls = self.speed_cache[lead as usize];
                    let need = safe_distance(v0, &self.limits)
                        + closure_distance(v0, ls)
                        + SPAWN_MARGIN;
                    if gap < need {
                        continue;
                    }
                    gap
                }
            };
            if best.map_or(true, |(_, headroom)| room > headroom) {
                best = Some((lane, room));
            }
        }
        best.map(|(lane, _)| (link, lane, v0))
    }

    // --- phase: lane changes -----------------------------------------------

    fn lane_change_pass(&mut self) {
        let ids: Vec<u32> = self.vehicles.keys().copied().collect();
        for id in ids {
            let Some(target) = self.plan_lane_change(id) else {
                continue;
            };
            let (link, from) = {
                let v = &self.vehicles[&id];
                let route = self.net.route(v.state.route);
                (route.links[v.link_idx], v.state.lane)
            };
            let list = &mut self.occupancy[link.index()][from as usize];
            let k = list.iter().position(|&o| o == id).expect("occupant listed");
            list.remove(k);
            let pos = self.pos_cache[id as usize];
            let insert_at = {
                let tl = &self.occupancy[link.index()][target as usize];
                tl.partition_point(|&o| self.pos_cache[o as usize] <= pos)
            };
            self.occupancy[link.index()][target as usize].insert(insert_at, id);
            let v = self.vehicles.get_mut(&id).expect("vehicle exists");
            v.state.lane = target;
            v.lc_ready_at = self.t + self.lc.cooldown;
            v.go_committed = false;
            v.acc.lane_changes += 1;
            self.lane_changes += 1;
        }
    }

    fn plan_lane_change(&self, id: u32) -> Option<u8> {
        let v = &self.vehicles[&id];
        // A scheduled plan owns its lane until release.
        if matches!(v.zone, ZoneProgress::Scheduled { .. }) {
            return None;
        }
        let route = self.net.route(v.state.route);
        let link = self.net.link(route.links[v.link_idx]);
        let pos = v.state.position - route.offsets[v.link_idx];
        if pos < LC_MIN_POS {
            return None;
        }
        let dist_end = link.length - pos;
        let lane = v.state.lane;
        let next = route.links.get(v.link_idx + 1).copied();
        // Inside a coordination window only route-required moves remain
        // legal; elective drifting would perturb queued plans.
        let in_window = self.cfg.coordination_enabled
            && route
                .zones
                .get(v.next_zone)
                .is_some_and(|rz| v.state.position + 1e-9 >= rz.window_start);

        let mut candidates: Vec<(u8, bool)> = Vec::new();
        let unserved = next.is_some_and(|nl| self.net.next_lane(link.id, lane, nl).is_none());
        if unserved && dist_end <= MANDATORY_DISTANCE {
            // One step toward the nearest lane that still reaches the route.
            let nl = next.expect("unserved implies a next link");
            let sources = self.net.lane_map(link.id, nl)?;
            let nearest = sources
                .iter()
                .map(|&(f, _)| f)
                .min_by_key(|&f| (i16::from(f) - i16::from(lane)).unsigned_abs())?;
            let target = if nearest > lane {
                lane + 1
            } else {
                lane.checked_sub(1)?
            };
            candidates.push((target, true));
        } else if self.t >= v.lc_ready_at && !in_window {
            for target in [lane.wrapping_sub(1), lane.wrapping_add(1)] {
                if target >= link.lanes {
                    continue;
                }
                // Close to the link end, only lanes that keep the route
                // reachable are worth considering.
                if let Some(nl) = next {
                    if dist_end <= ROUTE_VALID_DISTANCE
                        && self.net.next_lane(link.id, target, nl).is_none()
                    {
                        continue;
                    }
                }
                if dist_end <= NO_WEAVE_DISTANCE
                    && self.net.zone_at(link.to).is_some_and(|zi| {
                        self.net.signal_at(link.to).is_none()
                            && self.net.zones[zi].approach_index(link.id, target).is_some()
                    })
                {
                    continue;
                }
                candidates.push((target, false));
            }
        }

        let v_free = link.free_speed.min(self.limits.v_max);
        let current_lead = self.leader_of(v);
        for (target, mandatory) in candidates {
            let target_lead = self.leader_on_lane(v, target);
            let lag_raw = self.behind_on(link.id, target, pos);
            let target_lag = lag_raw.map(|(o, p)| Leader {
                gap: pos - p,
                speed: self.speed_cache[o as usize],
            });
            // A plan holder cannot renegotiate its terminal time, so a move
            // ahead of one must leave its full desired distance plus room
            // for the speed difference to wash out.
            if let Some((lag_id, lag_pos)) = lag_raw {
                let lag = &self.vehicles[&lag_id];
                if matches!(
                    lag.zone,
                    ZoneProgress::Scheduled {
                        entered_box: None,
                        ..
                    }
                ) {
                    let ls = lag.state.speed;
                    let need = safe_distance(ls, &self.limits)
                        + CUT_IN_MARGIN
                        + CUT_IN_HORIZON * (ls - v.state.speed).max(0.0);
                    if pos - lag_pos < need {
                        continue;
                    }
                }
            }
            if lane_change_desired(
                v.state.speed,
                v_free,
                current_lead,
                target_lead,
                target_lag,
                mandatory,
                &self.lc,
                &self.limits,
                &self.limits,
            ) {
                return Some(target);
            }
        }
        None
    }

    // --- phase: control ----------------------------------------------------

    fn control_pass(&mut self) -> Result<Vec<(u32, f64, Option<f64>)>, CoreError> {
        let ids: Vec<u32> = self.vehicles.keys().copied().collect();
        let mut controls = Vec::with_capacity(ids.len());
        for &id in &ids {
            if self.cfg.coordination_enabled {
                self.zone_bookkeeping(id)?;
            } else {
                self.commitment_bookkeeping(id);
            }
            let (u, gap) = self.command(id)?;
            if u <= self.limits.u_min + 1e-9 {
                self.emergency_steps += 1;
            }
            controls.push((id, u, gap));
        }
        self.vehicle_steps += ids.len() as u64;
        Ok(controls)
    }

    /// Entry attempts, fallback retries, and drag demotion for the crossing
    /// the vehicle is approaching.
    fn zone_bookkeeping(&mut self, id: u32) -> Result<(), CoreError> {
        let t = self.t;
        let (action, zi, arc, speed) = {
            let v = &self.vehicles[&id];
            let route = self.net.route(v.state.route);
            let Some(rz) = route.zones.get(v.next_zone) else {
                return Ok(());
            };
            let arc = v.state.position;
            let link = route.links[v.link_idx];
            let action = match &v.zone {
                ZoneProgress::Free if arc + 1e-9 >= rz.window_start => {
                    self.entry_attempt(rz, link, v.state.lane, arc, false)
                }
                ZoneProgress::Free => ZoneAction::Nothing,
                ZoneProgress::Fallback { next_retry } if t + 1e-9 >= *next_retry => {
                    self.entry_attempt(rz, link, v.state.lane, arc, true)
                }
                ZoneProgress::Fallback { .. } => ZoneAction::Nothing,
                ZoneProgress::Scheduled {
                    base_arc,
                    plan,
                    entered_box: None,
                    ..
                } => {
                    let planned = base_arc
                        + plan
                            .position(t.clamp(plan.t0(), plan.tf()))
                            .expect("clamped into plan window");
                    if planned - arc > DRAG_LIMIT {
                        ZoneAction::Demote
                    } else {
                        ZoneAction::Nothing
                    }
                }
                ZoneProgress::Scheduled { .. } => ZoneAction::Nothing,
            };
            (action, rz.zone, arc, v.state.speed)
        };

        match action {
            ZoneAction::Nothing => Ok(()),
            ZoneAction::WrongLane { retrying } => {
                if retrying {
                    let v = self.vehicles.get_mut(&id).expect("vehicle exists");
                    v.zone = ZoneProgress::Fallback {
                        next_retry: t + RETRY_INTERVAL,
                    };
                }
                Ok(())
            }
            ZoneAction::Demote => {
                self.coordinators[zi].demote(VehicleId(id));
                let v = self.vehicles.get_mut(&id).expect("vehicle exists");
                v.zone = ZoneProgress::Fallback { next_retry: t };
                v.state.zone_entry_time = None;
                Ok(())
            }
            ZoneAction::Attempt {
                approach,
                dist,
                retrying,
            } => {
                // Plans respect the approach link's speed, not just the
                // vehicle envelope, so the governor never starves the plan.
                let mut plan_limits = self.limits;
                plan_limits.v_max = plan_limits.v_max.min(
                    self.net
                        .link(self.net.zones[zi].approaches[approach].link)
                        .free_speed,
                );
                // A vehicle still easing down from a faster upstream link
                // may cross into the window a shade over the cap; the plan
                // starts at the cap and the governor absorbs the surplus.
                let v0 = speed.min(plan_limits.v_max);
                if retrying {
                    let coord = &self.coordinators[zi];
                    let quote = coord.terminal_time(approach, t, v0, dist, &plan_limits);
                    let budget = t
                        + 1.5
                            * min_transit_time(v0, dist + coord.zone().zone_length, &plan_limits)
                        + RETRY_SLACK;
                    if quote > budget {
                        let v = self.vehicles.get_mut(&id).expect("vehicle exists");
                        v.zone = ZoneProgress::Fallback {
                            next_retry: t + RETRY_INTERVAL,
                        };
                        return Ok(());
                    }
                }
                let attempt: Result<Trajectory, CoreError> = self.coordinators[zi]
                    .try_enter(VehicleId(id), approach, t, v0, dist, &plan_limits)
                    .map(|e| e.trajectory);
                match attempt {
                    Ok(plan) => {
                        let v = self.vehicles.get_mut(&id).expect("vehicle exists");
                        v.zone = ZoneProgress::Scheduled {
                            base_arc: arc,
                            plan,
                            entered_box: None,
                            exited_box: None,
                        };
                        v.state.zone_entry_time = Some(t);
                        Ok(())
                    }
                    Err(CoreError::InfeasibleHorizon { .. }) => {
                        let v = self.vehicles.get_mut(&id).expect("vehicle exists");
                        v.zone = ZoneProgress::Fallback {
                            next_retry: t + RETRY_INTERVAL,
                        };
                        Ok(())
                    }
                    Err(e) => Err(self.abort(format!("scheduling rejected: {e}"), Some(id))),
                }
            }
        }
    }

    fn entry_attempt(
        &self,
        rz: &crate::network::RouteZone,
        link: LinkId,
        lane: u8,
        arc: f64,
        retrying: bool,
    ) -> ZoneAction {
        // Lane indices only identify an approach on the approach link
        // itself; a window that reaches onto the upstream link must wait.
        match rz.lanes.iter().find(|&&(l, _)| l == lane) {
            Some(&(_, approach))
                if self.net.zones[rz.zone].approaches[approach].link == link =>
            {
                ZoneAction::Attempt {
                    approach,
                    dist: (rz.box_entry - arc).clamp(MIN_ENTRY_DIST, self.cfg.control_zone_length),
                    retrying,
                }
            }
            _ => ZoneAction::WrongLane { retrying },
        }
    }

    /// Latches the go decision for a yielding vehicle at an unsignalized
    /// crossing. The gap is judged once, close to the line; a vehicle that
    /// has started moving into the junction cannot safely stop halfway, so
    /// the decision holds until it is across.
    fn commitment_bookkeeping(&mut self, id: u32) {
        let v = &self.vehicles[&id];
        if v.go_committed {
            return;
        }
        let route = self.net.route(v.state.route);
        let link = self.net.link(route.links[v.link_idx]);
        let dist_end = link.length - (v.state.position - route.offsets[v.link_idx]);
        if dist_end > GAP_EVAL_DIST {
            return;
        }
        let Some(zi) = self.net.zone_at(link.to) else {
            return;
        };
        if self.net.signal_at(link.to).is_some() {
            return;
        }
        let z = &self.net.zones[zi];
        let Some(a) = z.approach_index(link.id, v.state.lane) else {
            return;
        };
        if !z.approaches[a].minor {
            return;
        }
        let next = route.links.get(v.link_idx + 1).copied();
        if self.minor_clear(zi, a, v, dist_end, next) {
            self.vehicles.get_mut(&id).expect("vehicle exists").go_committed = true;
        }
    }

    /// Stop-line obstacle: the ordinary spacing response to a standing
    /// object `dist` ahead.
    fn hold_at(&self, dist: f64, speed: f64, v_free: f64) -> f64 {
        let line = Leader {
            gap: dist.max(0.05),
            speed: 0.0,
        };
        car_following_accel(speed, v_free, Some(line), &self.cf, &self.limits)
    }

    fn command(&self, id: u32) -> Result<(f64, Option<f64>), CoreError> {
        let v = &self.vehicles[&id];
        let route = self.net.route(v.state.route);
        let link = self.net.link(route.links[v.link_idx]);
        let pos = v.state.position - route.offsets[v.link_idx];
        let dist_end = link.length - pos;
        let speed = v.state.speed;
        let next = route.links.get(v.link_idx + 1).copied();
        let leader = self.leader_of(v);
        let gap = leader.map(|l| l.gap);

        let mut v_free = link.free_speed.min(self.limits.v_max);
        // Ease toward a slower downstream link instead of braking at the
        // boundary.
        if let Some(nl) = next {
            let nf = self.net.link(nl).free_speed.min(self.limits.v_max);
            if nf < v_free {
                v_free = v_free.min((nf * nf + 2.0 * self.cf.comfort_decel * dist_end).sqrt());
            }
        }

        if let ZoneProgress::Scheduled { plan, .. } = &v.zone {
            let u_plan = plan
                .accel((self.t + 0.5 * self.cfg.dt).clamp(plan.t0(), plan.tf()))
                .expect("clamped into plan window");
            let tight = leader.map(|l| Leader {
                gap: (l.gap - GOV_MARGIN).max(0.0),
                speed: l.speed,
            });
            let u_cf = car_following_accel(speed, v_free, tight, &self.cf, &self.limits);
            return Ok((clamp_control(u_plan.min(u_cf), &self.limits), gap));
        }

        let mut u = if self.cfg.signals_enabled
            && next.is_some_and(|nl| self.net.movement_signal(link.id, nl).is_some())
        {
            let nl = next.expect("checked above");
            let (state, remaining) = self.net.signal_state(link.id, nl, self.t)?;
            signal_approach_accel(
                state, remaining, dist_end, speed, v_free, leader, &self.cf, &self.limits,
            )
        } else {
            car_following_accel(speed, v_free, leader, &self.cf, &self.limits)
        };

        // A lane that does not continue onto the route's next link ends at a
        // wall slightly before the node.
        if next.is_some_and(|nl| self.net.next_lane(link.id, v.state.lane, nl).is_none()) {
            u = u.min(self.hold_at(dist_end - 0.5, speed, v_free));
        }

        if self.cfg.coordination_enabled {
            // Without a slot, the box boundary is a red light.
            if let Some(rz) = route.zones.get(v.next_zone) {
                let held = match v.zone {
                    ZoneProgress::Fallback { .. } => true,
                    ZoneProgress::Free => v.state.position + 1e-9 >= rz.window_start,
                    ZoneProgress::Scheduled { .. } => false,
                };
                if held {
                    u = u.min(self.hold_at(rz.box_entry - v.state.position, speed, v_free));
                }
            }
        } else if let Some(zi) = self.net.zone_at(link.to) {
            // Unsignalized crossings in the baselines run on gap acceptance:
            // minors roll up to the line and go when the majors leave room.
            if self.net.signal_at(link.to).is_none() {
                let z = &self.net.zones[zi];
                if let Some(a) = z.approach_index(link.id, v.state.lane) {
                    if z.approaches[a].minor && !v.go_committed {
                        u = u.min(self.hold_at(dist_end, speed, v_free));
                    }
                }
            }
        }

        Ok((clamp_control(u, &self.limits), gap))
    }

    /// Whether a yielding approach can commit to crossing. The move is
    /// judged at its predicted end, not its start: the ego's arrival at the
    /// node is estimated from a steady committed acceleration, conflicting
    /// traffic is projected over that horizon, and the slot the ego lands
    /// in must absorb both the desired spacing and the speed differences
    /// still to be washed out.
    fn minor_clear(
        &self,
        zone: usize,
        approach: usize,
        v: &Vehicle,
        ego_to_node: f64,
        next: Option<LinkId>,
    ) -> bool {
        let z = &self.net.zones[zone];
        let here = self.net.route(v.state.route).links[v.link_idx];
        let v_cap = self.net.link(here).free_speed.min(self.limits.v_max);
        let (tau, v_cross) = crossing_estimate(v.state.speed, ego_to_node, v_cap);
        let sus_horizon = self.limits.v_max * self.limits.v_max / (2.0 * AVOID_BRAKE);

        // A leader already on the receiving lane caps the speed the ego can
        // sustain past the node, and must itself leave room at crossing time.
        let mut v_sus = v_cross;
        if let Some(nl) = next {
            if let Some(tl) = self.net.next_lane(here, v.state.lane, nl) {
                if let Some(&o) = self.occupancy[nl.index()][tl as usize].first() {
                    let lv = self.speed_cache[o as usize];
                    let g = self.pos_cache[o as usize] + lv * tau;
                    let need = safe_distance(v_cross, &self.limits)
                        + closure_distance(v_cross, lv)
                        + CROSS_MARGIN;
                    if g < need {
                        return false;
                    }
                    if g <= sus_horizon {
                        v_sus = v_cross.min(lv);
                    }
                }
            }
        }

        let cutoff = self.limits.v_max * (T_CRIT + tau) + sus_horizon + 2.0 * GAP_EVAL_DIST;
        let mut crossing: Vec<Approaching> = Vec::new();
        for (j, apr) in z.approaches.iter().enumerate() {
            if j == approach || apr.minor {
                continue;
            }
            let conflict = z.conflict_between(approach, j);
            if conflict == Conflict::None {
                continue;
            }
            for &(sl, slane, off) in &self.approach_scan[zone][j] {
                if off > cutoff {
                    continue;
                }
                let seg_end = off + self.net.link(sl).length;
                let list = &self.occupancy[sl.index()][slane as usize];
                for &o in list.iter().rev() {
                    let d = seg_end - self.pos_cache[o as usize];
                    if d > cutoff {
                        break;
                    }
                    let os = self.speed_cache[o as usize];
                    match conflict {
                        Conflict::Lateral => crossing.push(Approaching { dist: d, speed: os }),
                        Conflict::SameLane => {
                            // Zipper rule in node coordinates at crossing
                            // time. Whoever ends up behind must also absorb
                            // any speed surplus over the one ahead.
                            let q = os * tau - d;
                            let ok = if q >= 0.0 {
                                q >= safe_distance(v_cross, &self.limits)
                                    + closure_distance(v_cross, os)
                                    + CROSS_MARGIN
                            } else {
                                -q >= safe_distance(os, &self.limits)
                                    + closure_distance(os, v_sus)
                                    + CROSS_MARGIN
                            };
                            if !ok {
                                return false;
                            }
                        }
                        Conflict::None => unreachable!("filtered above"),
                    }
                }
            }
        }
        crossing_clear(&crossing, T_CRIT)
    }

    // --- phase: integration ------------------------------------------------

    fn integrate_pass(&mut self, controls: &[(u32, f64, Option<f64>)]) -> Result<(), CoreError> {
        let dt = self.cfg.dt;
        let t_new = self.t + dt;
        let teleport_bound = self.limits.v_max * dt + 0.5 * self.limits.u_max * dt * dt + 1e-9;
        for &(id, u, gap) in controls {
            let (old_state, link, old_pos) = {
                let v = &self.vehicles[&id];
                let route = self.net.route(v.state.route);
                (
                    v.state,
                    route.links[v.link_idx],
                    v.state.position - route.offsets[v.link_idx],
                )
            };
            let new_state = dynamics::step(&old_state, u, dt, &self.limits)?;
            let dp = new_state.position - old_state.position;
            if dp > teleport_bound {
                return Err(self.abort(
                    format!("teleport: {dp:.3} m in one step exceeds {teleport_bound:.3} m"),
                    Some(id),
                ));
            }
            let new_pos = old_pos + dp;
            for k in 0..self.dets_on_link[link.index()].len() {
                let d = self.dets_on_link[link.index()][k];
                let det = &self.net.detectors[d];
                if old_state.lane < det.lanes && old_pos < det.position && det.position <= new_pos
                {
                    self.det_crossings[d] += 1;
                }
            }
            let in_window = self.cfg.coordination_enabled
                && !matches!(self.vehicles[&id].zone, ZoneProgress::Free);
            if in_window && new_state.speed < STOP_SPEED {
                self.zone_stop_steps += 1;
            }
            let v = self.vehicles.get_mut(&id).expect("vehicle exists");
            v.state = new_state;
            v.acc.observe(t_new, dt, u, new_state.speed, gap);
            self.pos_cache[id as usize] = new_pos;
            self.speed_cache[id as usize] = new_state.speed;
        }
        Ok(())
    }

    // --- phase: topology ---------------------------------------------------

    fn topology_pass(&mut self) -> Result<(), CoreError> {
        let t_new = self.t + self.cfg.dt;
        let ids: Vec<u32> = self.vehicles.keys().copied().collect();
        for id in ids {
            let route = {
                let v = &self.vehicles[&id];
                self.net.route(v.state.route)
            };

            // Trip completion.
            if self.vehicles[&id].state.position >= route.length - 1e-9 {
                let v = &self.vehicles[&id];
                if matches!(v.zone, ZoneProgress::Scheduled { .. }) {
                    return Err(self.abort(
                        "vehicle completed its route while still scheduled in a zone".into(),
                        Some(id),
                    ));
                }
                let link = route.links[v.link_idx];
                let lane = v.state.lane;
                let record =
                    v.acc
                        .finish(id, &route.name, route.group.as_str(), t_new, route.length);
                let list = &mut self.occupancy[link.index()][lane as usize];
                let k = list.iter().position(|&o| o == id).expect("occupant listed");
                list.remove(k);
                self.vehicles.remove(&id);
                self.exited += 1;
                if record.departed + 1e-9 >= self.cfg.warmup {
                    self.arrived += 1;
                    self.total_travel_time += record.travel_time;
                }
                self.trips.push(record);
                continue;
            }

            // Link transitions: at most one per step at these link lengths,
            // but the loop keeps the invariant rather than assuming it.
            loop {
                let (link, lane, done) = {
                    let v = &self.vehicles[&id];
                    let link = route.links[v.link_idx];
                    let pos = v.state.position - route.offsets[v.link_idx];
                    let done = pos < self.net.link(link).length - 1e-9
                        || v.link_idx + 1 >= route.links.len();
                    (link, v.state.lane, done)
                };
                if done {
                    break;
                }
                let next = route.links[self.vehicles[&id].link_idx + 1];
                let Some(new_lane) = self.net.next_lane(link, lane, next) else {
                    return Err(self.abort(
                        format!(
                            "crossed into {} from an unserved lane",
                            self.net.link(next).name
                        ),
                        Some(id),
                    ));
                };
                let list = &mut self.occupancy[link.index()][lane as usize];
                let k = list.iter().position(|&o| o == id).expect("occupant listed");
                list.remove(k);
                let new_pos = {
                    let v = &self.vehicles[&id];
                    v.state.position - route.offsets[v.link_idx + 1]
                };
                self.pos_cache[id as usize] = new_pos;
                let insert_at = {
                    let tl = &self.occupancy[next.index()][new_lane as usize];
                    tl.partition_point(|&o| self.pos_cache[o as usize] <= new_pos)
                };
                self.occupancy[next.index()][new_lane as usize].insert(insert_at, id);
                let v = self.vehicles.get_mut(&id).expect("vehicle exists");
                v.link_idx += 1;
                v.state.lane = new_lane;
                v.go_committed = false;
            }

            // Conflict-box crossings for scheduled vehicles.
            let v = self.vehicles.get_mut(&id).expect("vehicle exists");
            if let ZoneProgress::Scheduled {
                entered_box,
                exited_box,
                ..
            } = &mut v.zone
            {
                let rz = &route.zones[v.next_zone];
                let arc = v.state.position;
                if entered_box.is_none() && arc + 1e-9 >= rz.box_entry {
                    *entered_box = Some(t_new);
                }
                if exited_box.is_none() && arc + 1e-9 >= rz.box_exit {
                    *exited_box = Some(t_new);
                }
            }
        }
        Ok(())
    }

    // --- phase: releases ---------------------------------------------------

    /// Release exits in assignment order. A head that has not yet reached
    /// the box while someone behind it in the queue has already left lost
    /// its slot and is demoted; a head still inside the box defers everyone
    /// (the governor only delays vehicles, so the head can't be far).
    fn release_pass(&mut self) -> Result<(), CoreError> {
        enum Front {
            Done,
            Release(u32),
            Demote(u32),
        }
        for zi in 0..self.coordinators.len() {
            loop {
                let front = {
                    let coord = &self.coordinators[zi];
                    match coord.entries().next() {
                        None => Front::Done,
                        Some(head) => {
                            let hid = head.vehicle.0;
                            match self.vehicles.get(&hid).map(|v| &v.zone) {
                                Some(ZoneProgress::Scheduled {
                                    exited_box: Some(_),
                                    ..
                                }) => Front::Release(hid),
                                Some(ZoneProgress::Scheduled { entered_box, .. }) => {
                                    let somebody_out = coord.entries().skip(1).any(|e| {
                                        matches!(
                                            self.vehicles.get(&e.vehicle.0).map(|v| &v.zone),
                                            Some(ZoneProgress::Scheduled {
                                                exited_box: Some(_),
                                                ..
                                            })
                                        )
                                    });
                                    if somebody_out && entered_box.is_none() {
                                        Front::Demote(hid)
                                    } else {
                                        Front::Done
                                    }
                                }
                                _ => {
                                    return Err(self.abort(
                                        format!("queued vehicle {hid} lost its schedule"),
                                        Some(hid),
                                    ))
                                }
                            }
                        }
                    }
                };
                match front {
                    Front::Done => break,
                    Front::Demote(hid) => {
                        self.coordinators[zi].demote(VehicleId(hid));
                        let v = self.vehicles.get_mut(&hid).expect("vehicle exists");
                        v.zone = ZoneProgress::Fallback { next_retry: self.t };
                        v.state.zone_entry_time = None;
                    }
                    Front::Release(hid) => {
                        let approach = match self.coordinators[zi].release(VehicleId(hid)) {
                            Ok(entry) => entry.approach,
                            Err(e) => return Err(self.abort(format!("{e}"), Some(hid))),
                        };
                        let (be, bx) = match self.vehicles[&hid].zone {
                            ZoneProgress::Scheduled {
                                entered_box: Some(be),
                                exited_box: Some(bx),
                                ..
                            } => (be, bx),
                            _ => unreachable!("checked exited_box above"),
                        };
                        self.audit_release(zi, approach, be, bx);
                        self.releases.push(ReleaseEvent {
                            vehicle: hid,
                            zone: zi,
                            approach,
                            box_entry: be,
                            box_exit: bx,
                        });
                        let v = self.vehicles.get_mut(&hid).expect("vehicle exists");
                        v.zone = ZoneProgress::Free;
                        v.next_zone += 1;
                        v.state.zone_entry_time = None;
                    }
                }
            }
        }
        Ok(())
    }

    /// Compare the actual box occupancy against the last release on every
    /// conflicting approach. Crossing times live on the dt grid, so the
    /// required separation is relaxed by one step.
    fn audit_release(&mut self, zone: usize, approach: usize, be: f64, bx: f64) {
        let slack = self.limits.headway - self.cfg.dt - 1e-6;
        let z = &self.net.zones[zone];
        for j in 0..z.approaches.len() {
            let Some((lbe, lbx)) = self.last_occupancy[zone][j] else {
                continue;
            };
            match z.conflict_between(approach, j) {
                Conflict::None => {}
                Conflict::SameLane => {
                    if (bx - lbx).abs() < slack {
                        self.separation_violations += 1;
                    }
                }
                Conflict::Lateral => {
                    // Crossing movements must keep their box-occupancy
                    // midpoints a headway apart.
                    if (0.5 * (be + bx) - 0.5 * (lbe + lbx)).abs() < slack {
                        self.separation_violations += 1;
                    }
                }
            }
        }
        self.last_occupancy[zone][approach] = Some((be, bx));
    }

    // --- phase: audits -----------------------------------------------------

    fn audit_pass(&mut self) -> Result<(), CoreError> {
        if self.entered != self.exited + self.vehicles.len() as u64 {
            return Err(self.abort(
                format!(
                    "conservation broken: {} entered, {} exited, {} present",
                    self.entered,
                    self.exited,
                    self.vehicles.len()
                ),
                None,
            ));
        }
        let mut eq3 = 0u64;
        for link in 0..self.occupancy.len() {
            for lane in 0..self.occupancy[link].len() {
                for w in self.occupancy[link][lane].windows(2) {
                    let (behind, ahead) = (w[0], w[1]);
                    let gap = self.pos_cache[ahead as usize] - self.pos_cache[behind as usize];
                    if gap < -1e-6 {
                        return Err(self.abort(
                            format!("negative gap {gap:.3} m between {behind} and {ahead}"),
                            Some(behind),
                        ));
                    }
                    if self.cfg.coordination_enabled {
                        // The spacing rule binds while a scheduled vehicle
                        // is still in the approach stretch; inside the box
                        // the headway-separated exits take over.
                        let fv = &self.vehicles[&behind];
                        if let ZoneProgress::Scheduled {
                            entered_box: None, ..
                        } = fv.zone
                        {
                            if gap < safe_distance(fv.state.speed, &self.limits) - 0.01 - 1e-9 {
                                eq3 += 1;
                            }
                        }
                    }
                }
            }
        }
        self.eq3_violations += eq3;
        Ok(())
    }

    fn zone_tag(zone: &ZoneProgress) -> &'static str {
        match zone {
            ZoneProgress::Free => "free",
            ZoneProgress::Fallback { .. } => "fallback",
            ZoneProgress::Scheduled { .. } => "scheduled",
        }
    }

    fn abort(&self, message: String, subject: Option<u32>) -> CoreError {
        let mut dump = String::new();
        let mut listed = 0;
        for (id, v) in &self.vehicles {
            if let Some(s) = subject {
                let anchor = &self.vehicles[&s];
                let near = *id == s
                    || (v.state.route == anchor.state.route
                        && (v.state.position - anchor.state.position).abs() < 120.0);
                if !near {
                    continue;
                }
            }
            if listed >= 24 {
                dump.push_str("  ...\n");
                break;
            }
            let route = self.net.route(v.state.route);
            let link = self.net.link(route.links[v.link_idx]);
            dump.push_str(&format!(
                "  vehicle {} route {} link {} lane {} arc {:.2} v {:.2} u {:.2} {}\n",
                id,
                route.name,
                link.name,
                v.state.lane,
                v.state.position,
                v.state.speed,
                v.state.accel,
                Self::zone_tag(&v.zone),
            ));
            listed += 1;
        }
        CoreError::Aborted {
            t: self.t,
            message,
            diagnostic: dump,
        }
    }

    // --- phase: metrics ----------------------------------------------------

    fn metrics_pass(&mut self) -> Result<(), CoreError> {
        let t_new = self.t + self.cfg.dt;
        for d in 0..self.aggregators.len() {
            let det = &self.net.detectors[d];
            let segment: usize = self.occupancy[det.link.index()]
                .iter()
                .take(det.lanes as usize)
                .map(|l| l.len())
                .sum();
            self.aggregators[d].record(self.det_crossings[d], segment);
            self.det_crossings[d] = 0;
        }
        if (self.step + 1) % self.window_every == 0 {
            // Close windows on the exact boundary regardless of float drift
            // in the running clock.
            let boundary = ((self.step + 1) / self.window_every) as f64 * WINDOW;
            for d in 0..self.aggregators.len() {
                if let Some(p) = self.aggregators[d].roll(boundary) {
                    if p.t_start + 1e-9 >= self.cfg.warmup {
                        self.flow_density.push(p);
                    }
                }
            }
            self.throughput.push(ThroughputPoint {
                t_end: boundary,
                spawned: self.entered,
                arrived: self.exited,
                in_network: self.vehicles.len() as u64,
                gate_queue: self.gate_depth() as u64,
            });
        }
        if (self.step + 1) % self.sample_every == 0 {
            if let Some(writer) = self.trajectories.as_mut() {
                for (id, v) in &self.vehicles {
                    writer.write(&TrajectorySample {
                        t: t_new,
                        vehicle: *id,
                        lane: v.state.lane,
                        p: v.state.position,
                        v: v.state.speed,
                        u: v.state.accel,
                    })?;
                }
            }
        }
        Ok(())
    }
}

/// Run one scenario cell to completion. With an output directory, writes
/// `trajectories.csv` (streamed), `trips.csv`, `flow_density.csv`,
/// `throughput.csv`, `summary.csv` (post-warmup group means), and `run.csv`
/// (the summary row).
pub fn run(
    cfg: &ScenarioConfig,
    net: &Network,
    out: Option<&Path>,
) -> Result<RunSummary, CoreError> {
    let mut world = World::new(cfg.clone(), net)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        world.stream_trajectories(&dir.join("trajectories.csv"))?;
    }
    let steps = (cfg.duration / cfg.dt).round() as u64;
    world.run_steps(steps)?;
    let summary = world.finish()?;
    if let Some(dir) = out {
        write_trips(&dir.join("trips.csv"), &summary.trips)?;
        write_flow_density(&dir.join("flow_density.csv"), &summary.flow_density)?;
        write_throughput(&dir.join("throughput.csv"), &summary.throughput)?;
        let post: Vec<TripRecord> = summary
            .trips
            .iter()
            .filter(|t| t.departed + 1e-9 >= cfg.warmup)
            .cloned()
            .collect();
        let rows = crate::metrics::trip_summary(&post).unwrap_or_default();
        write_summary(&dir.join("summary.csv"), &rows)?;
        write_rows(&dir.join("run.csv"), std::slice::from_ref(&summary))?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    fn network() -> Network {
        Network::build(&Config::default_corridor()).unwrap()
    }

    fn steps_for(cfg: &ScenarioConfig, seconds: f64) -> u64 {
        (seconds / cfg.dt).round() as u64
    }

    #[test]
    fn scenario_matrix_pins_population_and_control() {
        let net = network();
        let expect = [
            (1, 1.2, true, false),
            (2, 0.9, true, false),
            (3, 1.2, false, true),
            (4, 0.9, false, true),
        ];
        for (s, h, signals, coord) in expect {
            let cfg = ScenarioConfig::for_scenario(s, &net).unwrap();
            assert_eq!(cfg.headway, h, "scenario {s}");
            assert_eq!(cfg.signals_enabled, signals, "scenario {s}");
            assert_eq!(cfg.coordination_enabled, coord, "scenario {s}");
            assert_eq!(cfg.control_zone_length, 150.0);
            assert_eq!(cfg.dt, 0.1);
            assert_eq!(cfg.warmup, 300.0);
        }
        assert!(ScenarioConfig::for_scenario(5, &net).is_err());
        assert!(ScenarioConfig::for_scenario(0, &net).is_err());
    }

    #[test]
    fn zero_demand_stays_empty() {
        let net = network();
        let cfg = ScenarioConfig::for_scenario(1, &net)
            .unwrap()
            .with_demand(0.0)
            .with_duration(600.0);
        let summary = run(&cfg, &net, None).unwrap();
        assert_eq!(summary.entered, 0);
        assert_eq!(summary.exited, 0);
        assert_eq!(summary.in_network, 0);
        assert!(summary.trips.is_empty());
        assert_eq!(summary.arrived, 0);
        assert!(!summary.flow_density.is_empty());
        assert!(summary
            .flow_density
            .iter()
            .all(|p| p.flow == 0.0 && p.density == 0.0));
        assert!(summary.throughput.iter().all(|p| p.spawned == 0));
    }

    #[test]
    fn lone_vehicle_crosses_at_free_speed() {
        let net = network();
        // 700 m + 1000 m of empty arterial at 20 m/s is an 85 s trip.
        let cfg = ScenarioConfig::for_scenario(3, &net)
            .unwrap()
            .with_demand(0.0);
        let mut world = World::new(cfg.clone(), &net).unwrap();
        world.seed_vehicle("w_to_n").unwrap();
        world.run_steps(steps_for(&cfg, 100.0)).unwrap();
        let trips = world.trips();
        assert_eq!(trips.len(), 1);
        let trip = &trips[0];
        assert!(
            (trip.travel_time - 85.0).abs() <= cfg.dt + 1e-9,
            "travel time {}",
            trip.travel_time
        );
        assert_eq!(trip.distance, 1700.0);
        assert_eq!(trip.stops, 0);
        assert!(trip.energy < 1e-9, "cruise spent {}", trip.energy);
        assert_eq!(world.queued_total(), 0);
        assert_eq!(world.releases().len(), 1);
    }

    #[test]
    fn clock_stays_on_the_step_grid() {
        let net = network();
        let cfg = ScenarioConfig::for_scenario(1, &net)
            .unwrap()
            .with_demand(0.0);
        let mut world = World::new(cfg.clone(), &net).unwrap();
        for k in 1..=1000u64 {
            world.step_once().unwrap();
            let drift = world.time() - k as f64 * cfg.dt;
            assert!(drift.abs() < 1e-9, "drift {drift} after {k} steps");
        }
    }

    #[test]
    fn conflicting_pair_crosses_a_headway_apart() {
        let net = network();
        let cfg = ScenarioConfig::for_scenario(4, &net)
            .unwrap()
            .with_demand(0.0);
        let mut world = World::new(cfg.clone(), &net).unwrap();
        // Southbound through and eastbound through cross at the main
        // intersection. Staggered starts put both at its conflict box at
        // nearly the same moment, so the second schedule must shift.
        let sb = world.seed_vehicle("ns_ns").unwrap();
        world.run_steps(steps_for(&cfg, 15.0)).unwrap();
        let eb = world.seed_vehicle("ew_we").unwrap();
        world.run_steps(steps_for(&cfg, 285.0)).unwrap();
        assert_eq!(world.exited(), 2, "both trips complete");
        let zone = net.zone_at(net.node_named("i1").unwrap().id).unwrap();
        let at_i1: Vec<&ReleaseEvent> = world
            .releases()
            .iter()
            .filter(|e| e.zone == zone)
            .collect();
        assert_eq!(at_i1.len(), 2);
        let (first, second) = (at_i1[0], at_i1[1]);
        assert_eq!(first.vehicle, sb.0);
        assert_eq!(second.vehicle, eb.0);
        let least = cfg.headway - cfg.dt - 1e-6;
        assert!(
            second.box_entry - first.box_entry >= least,
            "entries {} and {} too close",
            first.box_entry,
            second.box_entry
        );
        assert!(
            second.box_exit - first.box_exit >= least,
            "exits {} and {} too close",
            first.box_exit,
            second.box_exit
        );
        assert!(
            second.box_entry - first.box_entry <= 10.0,
            "conflict resolution delayed the second vehicle implausibly"
        );
    }

    #[test]
    fn light_coordinated_traffic_conserves_and_flows() {
        let net = network();
        let cfg = ScenarioConfig::for_scenario(4, &net)
            .unwrap()
            .with_demand(0.3)
            .with_duration(240.0)
            .with_seed(11);
        let summary = run(&cfg, &net, None).unwrap();
        assert!(summary.entered > 50, "entered {}", summary.entered);
        assert_eq!(
            summary.entered,
            summary.exited + summary.in_network,
            "conservation at the end of the run"
        );
        assert_eq!(summary.eq3_violations, 0);
        assert_eq!(summary.separation_violations, 0);
    }

    #[test]
    fn identical_runs_are_byte_identical() {
        let net = network();
        let cfg = ScenarioConfig::for_scenario(1, &net)
            .unwrap()
            .with_demand(1.0)
            .with_duration(120.0)
            .with_seed(9);
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let ra = run(&cfg, &net, Some(&a)).unwrap();
        let rb = run(&cfg, &net, Some(&b)).unwrap();
        assert_eq!(ra.entered, rb.entered);
        assert_eq!(ra.exited, rb.exited);
        for file in ["trajectories.csv", "trips.csv"] {
            let ba = std::fs::read(a.join(file)).unwrap();
            let bb = std::fs::read(b.join(file)).unwrap();
            assert!(!ba.is_empty(), "{file} written");
            assert_eq!(ba, bb, "{file} differs between identical runs");
        }
        let other = run(&cfg.clone().with_seed(10), &net, None).unwrap();
        assert_ne!(
            (ra.entered, ra.exited),
            (other.entered, other.exited),
            "different seed should draw different arrivals"
        );
    }

    #[test]
    fn trajectory_samples_tick_once_per_second() {
        let net = network();
        let cfg = ScenarioConfig::for_scenario(2, &net)
            .unwrap()
            .with_demand(0.5)
            .with_duration(12.0)
            .with_seed(5);
        let dir = tempfile::tempdir().unwrap();
        run(&cfg, &net, Some(dir.path())).unwrap();
        let text = std::fs::read_to_string(dir.path().join("trajectories.csv")).unwrap();
        let mut ts: Vec<f64> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap().parse().unwrap())
            .collect();
        ts.dedup();
        assert!(ts.len() >= 8, "expected sampling instants, got {}", ts.len());
        for pair in ts.windows(2) {
            assert!(
                (pair[1] - pair[0] - 1.0).abs() < 1e-9,
                "cadence broke between {} and {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn flow_matches_density_times_speed_in_free_flow() {
        // Ramps silenced: without mergers accelerating up to speed, the
        // highway segments carry uniform traffic at the free speed end to
        // end, which is the premise the identity needs.
        let mut corridor = Config::default_corridor();
        for d in &mut corridor.demand {
            if d.route.starts_with("l2h_") || d.route.starts_with("h2l_") {
                d.volume = 0.0;
            }
        }
        let net = Network::build(&corridor).unwrap();
        let cfg = ScenarioConfig::for_scenario(1, &net)
            .unwrap()
            .with_demand(0.4)
            .with_duration(660.0)
            .with_seed(3);
        let summary = run(&cfg, &net, None).unwrap();
        // Single windows carry too few vehicles to beat arrival noise, so
        // the identity is judged on each detector's run-long means.
        for name in ["hw_eb", "hw_wb"] {
            let (mut flow, mut density, mut windows) = (0.0, 0.0, 0);
            for p in &summary.flow_density {
                if p.detector == name && p.density >= 1.0 {
                    flow += p.flow;
                    density += p.density;
                    windows += 1;
                }
            }
            assert!(windows >= 6, "only {windows} {name} windows carried traffic");
            let (flow, density) = (flow / windows as f64, density / windows as f64);
            // Highway free speed is 30 m/s = 108 km/h.
            let predicted = density * 108.0;
            assert!(
                (flow - predicted).abs() <= 0.10 * predicted,
                "{name}: mean flow {flow:.1} against mean density {density:.3} at free speed",
            );
        }
    }
}
