//! Per-vehicle trip bookkeeping and detector aggregation.
//!
//! Trip records accumulate while a vehicle is in the network and freeze when
//! it leaves. Detector windows aggregate lane-normalized flow and density
//! over fixed intervals.

use serde::{Deserialize, Serialize};

use crate::config::{LinkClass, RouteGroup};

/// Below this speed a vehicle is a stop candidate, m/s.
pub const STOP_SPEED: f64 = 1.0;
/// A candidate becomes a stop after this long below [`STOP_SPEED`], s.
pub const STOP_HOLD: f64 = 2.0;
/// Counting re-arms once the vehicle recovers past this speed, m/s.
pub const REARM_SPEED: f64 = 2.0;
/// Leaders beyond this distance do not count toward following distance, m.
pub const FOLLOW_RANGE: f64 = 100.0;

/// Stop counter with hysteresis: crawling across the threshold is one stop,
/// not many.
#[derive(Debug, Clone, Default)]
pub struct StopTracker {
    below_since: Option<f64>,
    counted: bool,
    stops: u32,
}

impl StopTracker {
    pub fn observe(&mut self, t: f64, v: f64) {
        if v < STOP_SPEED {
            let since = *self.below_since.get_or_insert(t);
            if !self.counted && t - since >= STOP_HOLD {
                self.stops += 1;
                self.counted = true;
            }
        } else {
            self.below_since = None;
            if v >= REARM_SPEED {
                self.counted = false;
            }
        }
    }

    pub fn stops(&self) -> u32 {
        self.stops
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub vehicle: u32,
    pub route: String,
    pub group: String,
    pub departed: f64,
    pub arrived: f64,
    pub distance: f64,
    pub travel_time: f64,
    pub stops: u32,
    pub lane_changes: u32,
    /// Control effort, integral of u^2/2 over the trip.
    pub energy: f64,
    /// Mean clear distance to the leader while one was within
    /// [`FOLLOW_RANGE`]; empty when the vehicle never followed.
    pub mean_following_distance: Option<f64>,
}

/// Running state for one vehicle's trip.
#[derive(Debug, Clone)]
pub struct TripAccumulator {
    pub departed: f64,
    pub lane_changes: u32,
    stops: StopTracker,
    energy: f64,
    follow_sum: f64,
    follow_n: u64,
}

impl TripAccumulator {
    pub fn new(departed: f64) -> Self {
        TripAccumulator {
            departed,
            lane_changes: 0,
            stops: StopTracker::default(),
            energy: 0.0,
            follow_sum: 0.0,
            follow_n: 0,
        }
    }

    /// Record one step: `t` is the time at the end of the step, `u` the
    /// control applied over it, `gap` the clear distance to a leader if any.
    pub fn observe(&mut self, t: f64, dt: f64, u: f64, v: f64, gap: Option<f64>) {
        self.energy += 0.5 * u * u * dt;
        self.stops.observe(t, v);
        if let Some(g) = gap {
            if g <= FOLLOW_RANGE {
                self.follow_sum += g;
                self.follow_n += 1;
            }
        }
    }

    pub fn energy(&self) -> f64 {
        self.energy
    }

    pub fn stops(&self) -> u32 {
        self.stops.stops()
    }

    pub fn finish(
        &self,
        vehicle: u32,
        route: &str,
        group: &str,
        arrived: f64,
        distance: f64,
    ) -> TripRecord {
        TripRecord {
            vehicle,
            route: route.to_string(),
            group: group.to_string(),
            departed: self.departed,
            arrived,
            distance,
            travel_time: arrived - self.departed,
            stops: self.stops.stops(),
            lane_changes: self.lane_changes,
            energy: self.energy,
            mean_following_distance: if self.follow_n > 0 {
                Some(self.follow_sum / self.follow_n as f64)
            } else {
                None
            },
        }
    }
}

/// Trip classification from the classes of the links a route traverses.
/// Ramps never decide the class: a route that begins or ends on a ramp is
/// judged by the nearest non-ramp link along it. A route with nothing but
/// ramp links cannot be classified.
pub fn classify_route(classes: &[LinkClass]) -> Option<RouteGroup> {
    let origin = classes.iter().find(|&&c| c != LinkClass::Ramp)?;
    let destination = classes.iter().rev().find(|&&c| c != LinkClass::Ramp)?;
    Some(match (origin, destination) {
        (LinkClass::Arterial, LinkClass::Arterial) => RouteGroup::Local,
        (LinkClass::Highway, LinkClass::Highway) => RouteGroup::Highway,
        (LinkClass::Arterial, LinkClass::Highway) => RouteGroup::LocalToHighway,
        (LinkClass::Highway, LinkClass::Arterial) => RouteGroup::HighwayToLocal,
        (LinkClass::Ramp, _) | (_, LinkClass::Ramp) => unreachable!("ramps filtered"),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowDensityPoint {
    pub detector: String,
    /// Window start, s.
    pub t_start: f64,
    /// veh/h per lane
    pub flow: f64,
    /// veh/km per lane
    pub density: f64,
}

/// Rolling flow-density window for one detector.
#[derive(Debug, Clone)]
pub struct DetectorAggregator {
    name: String,
    lanes: f64,
    segment_km: f64,
    window: f64,
    next_roll: f64,
    crossings: u32,
    occupancy_sum: f64,
    samples: u32,
}

impl DetectorAggregator {
    pub fn new(name: &str, lanes: u8, segment_km: f64, window: f64, start: f64) -> Self {
        DetectorAggregator {
            name: name.to_string(),
            lanes: lanes as f64,
            segment_km,
            window,
            next_roll: start + window,
            crossings: 0,
            occupancy_sum: 0.0,
            samples: 0,
        }
    }

    pub fn record(&mut self, crossings: u32, segment_count: usize) {
        self.crossings += crossings;
        self.occupancy_sum += segment_count as f64;
        self.samples += 1;
    }

    /// Close the window if `t` has reached its end.
    pub fn roll(&mut self, t: f64) -> Option<FlowDensityPoint> {
        if t < self.next_roll {
            return None;
        }
        let point = FlowDensityPoint {
            detector: self.name.clone(),
            t_start: self.next_roll - self.window,
            flow: self.crossings as f64 * 3600.0 / self.window / self.lanes,
            density: if self.samples == 0 {
                0.0
            } else {
                self.occupancy_sum / self.samples as f64 / self.segment_km / self.lanes
            },
        };
        self.next_roll += self.window;
        self.crossings = 0;
        self.occupancy_sum = 0.0;
        self.samples = 0;
        Some(point)
    }
}

/// Network-level counts at the end of an aggregation window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputPoint {
    pub t_end: f64,
    pub spawned: u64,
    pub arrived: u64,
    pub in_network: u64,
    /// Vehicles sampled but still waiting to enter at their origin.
    pub gate_queue: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub trips: u64,
    pub mean_travel_time: f64,
    pub mean_distance: f64,
    pub mean_stops: f64,
    pub mean_lane_changes: f64,
    pub mean_energy: f64,
    pub mean_following_distance: Option<f64>,
}

fn summarize_group(group: &str, trips: &[&TripRecord]) -> GroupSummary {
    let n = trips.len() as f64;
    let (mut fd_sum, mut fd_n) = (0.0, 0u64);
    for t in trips {
        if let Some(fd) = t.mean_following_distance {
            fd_sum += fd;
            fd_n += 1;
        }
    }
    GroupSummary {
        group: group.to_string(),
        trips: trips.len() as u64,
        mean_travel_time: trips.iter().map(|t| t.travel_time).sum::<f64>() / n,
        mean_distance: trips.iter().map(|t| t.distance).sum::<f64>() / n,
        mean_stops: trips.iter().map(|t| t.stops as f64).sum::<f64>() / n,
        mean_lane_changes: trips.iter().map(|t| t.lane_changes as f64).sum::<f64>() / n,
        mean_energy: trips.iter().map(|t| t.energy).sum::<f64>() / n,
        mean_following_distance: if fd_n > 0 { Some(fd_sum / fd_n as f64) } else { None },
    }
}

/// One demand level of a sweep: completed arrivals and the time vehicles
/// spent in the network, gate waits excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputCurvePoint {
    pub demand_multiplier: f64,
    pub arrived: u64,
    pub total_travel_time: f64,
}

/// Orders sweep results by demand so the curve reads left to right.
pub fn throughput_curve(mut points: Vec<ThroughputCurvePoint>) -> Vec<ThroughputCurvePoint> {
    points.sort_by(|a, b| a.demand_multiplier.total_cmp(&b.demand_multiplier));
    points
}

/// Per-group means plus an `all` row, or nothing when no trip completed.
pub fn trip_summary(trips: &[TripRecord]) -> Option<Vec<GroupSummary>> {
    if trips.is_empty() {
        return None;
    }
    let mut groups: Vec<&str> = trips.iter().map(|t| t.group.as_str()).collect();
    groups.sort_unstable();
    groups.dedup();
    let mut rows = vec![summarize_group("all", &trips.iter().collect::<Vec<_>>())];
    for g in groups {
        let members: Vec<&TripRecord> = trips.iter().filter(|t| t.group == g).collect();
        rows.push(summarize_group(g, &members));
    }
    Some(rows)
}
