//! Conflict-zone coordination: one passive queue per zone.
//!
//! Vehicles entering a control zone receive a terminal time once, plan a
//! minimum-effort trajectory to the conflict-zone exit, and keep that plan
//! until released at the exit. The coordinator never revises an assignment;
//! it only stores the queue and answers what earlier entries constrain a
//! newcomer.
//!
//! Separation rules, per conflicting predecessor relation:
//! - same lane (or merging into one lane): exits at least `h` apart, with
//!   the spacing rule inside the zone enforced step-by-step by the engine's
//!   safety governor;
//! - lateral: both the conflict-box entry times and the exit times at least
//!   `h` apart, which bounds occupancy-midpoint spacing below by `h` even
//!   when a fast exiter precedes a slow one;
//! - unrelated: exits at least [`EPS_CHAIN`] apart, so every zone's exits
//!   happen in assignment order without serializing parallel lanes.

use std::collections::VecDeque;

use crate::dynamics::{VehicleLimits, VehicleState};
use crate::error::CoreError;
use crate::ids::{VehicleId, ZoneId};
use crate::optctrl::{min_transit_time, solve_with_backoff, Trajectory};

/// Exit-order spacing between entries with no physical conflict, s.
pub const EPS_CHAIN: f64 = 0.01;

/// Relation between two approaches of one conflict zone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conflict {
    None,
    /// Sharing or merging into one lane: rear-end separation applies.
    SameLane,
    /// Crossing paths inside the conflict box.
    Lateral,
}

/// Geometry of one coordinated conflict point.
#[derive(Debug, Clone)]
pub struct ConflictZone {
    pub id: ZoneId,
    /// Extent of the conflict box past the control-zone end, m.
    pub zone_length: f64,
    /// Control-zone length per approach, m.
    approach_length: Vec<f64>,
    /// Row-major relation matrix between approaches.
    conflict: Vec<Conflict>,
}

impl ConflictZone {
    pub fn new(
        id: ZoneId,
        zone_length: f64,
        approach_length: Vec<f64>,
        lateral_or_same: &[(usize, usize, Conflict)],
    ) -> Result<Self, CoreError> {
        if zone_length < 0.0 || !zone_length.is_finite() {
            return Err(CoreError::validation(format!(
                "conflict box length must be non-negative, got {zone_length}"
            )));
        }
        let n = approach_length.len();
        if n == 0 {
            return Err(CoreError::validation(
                "conflict zone needs at least one approach".to_string(),
            ));
        }
        if approach_length.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(CoreError::validation(
                "control-zone lengths must be positive".to_string(),
            ));
        }
        let mut conflict = vec![Conflict::None; n * n];
        for i in 0..n {
            conflict[i * n + i] = Conflict::SameLane;
        }
        for &(a, b, c) in lateral_or_same {
            if a >= n || b >= n {
                return Err(CoreError::validation(format!(
                    "conflict pair ({a}, {b}) out of range for {n} approaches"
                )));
            }
            conflict[a * n + b] = c;
            conflict[b * n + a] = c;
        }
        Ok(ConflictZone {
            id,
            zone_length,
            approach_length,
            conflict,
        })
    }

    pub fn approach_count(&self) -> usize {
        self.approach_length.len()
    }

    pub fn control_length(&self, approach: usize) -> f64 {
        self.approach_length[approach]
    }

    /// Planning distance for an approach: control zone plus conflict box.
    pub fn planning_distance(&self, approach: usize) -> f64 {
        self.approach_length[approach] + self.zone_length
    }

    pub fn conflict_between(&self, a: usize, b: usize) -> Conflict {
        self.conflict[a * self.approach_count() + b]
    }
}

/// One scheduled vehicle: its window, plan, and where the plan crosses the
/// conflict-box entry.
#[derive(Debug, Clone)]
pub struct QueueEntry {
    pub vehicle: VehicleId,
    pub approach: usize,
    pub t0: f64,
    pub tf: f64,
    /// Absolute time the plan crosses from control zone into the box.
    pub box_entry: f64,
    pub trajectory: Trajectory,
}

/// Latest constraint times left behind by an approach's most recent
/// assignment. These survive release and demotion: a successor chained on a
/// vehicle that later failed still holds a valid (conservative) slot.
#[derive(Debug, Clone, Copy)]
struct ApproachMark {
    tf: f64,
    box_entry: f64,
}

/// Per-zone coordinator state.
#[derive(Debug)]
pub struct Coordinator {
    zone: ConflictZone,
    queue: VecDeque<QueueEntry>,
    marks: Vec<Option<ApproachMark>>,
    last_tf: f64,
    /// Vehicles that could not be scheduled or lost their slot.
    pub failures: u64,
}

/// Iterations of the entry-separation refinement before giving up.
const ENTRY_REFINE_MAX: usize = 8;

/// Acceptance slack on the box-entry floor, s. The refinement converges
/// linearly, so it gets a millisecond of tolerance; the engine's occupancy
/// audit allows a whole `dt` on top of this.
const ENTRY_TOL: f64 = 1e-3;

impl Coordinator {
    pub fn new(zone: ConflictZone) -> Self {
        let n = zone.approach_count();
        Coordinator {
            zone,
            queue: VecDeque::new(),
            marks: vec![None; n],
            last_tf: f64::NEG_INFINITY,
            failures: 0,
        }
    }

    pub fn zone(&self) -> &ConflictZone {
        &self.zone
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &QueueEntry> {
        self.queue.iter()
    }

    pub fn entry_for(&self, vehicle: VehicleId) -> Option<&QueueEntry> {
        self.queue.iter().find(|e| e.vehicle == vehicle)
    }

    /// Earliest exit time the queue permits for a new entry on `approach`
    /// whose conflict-box entry lies `dist_to_entry` meters ahead, before any
    /// feasibility stretching: the free-flow earliest, conflicting
    /// predecessors' exits plus the headway, and the zone-wide exit chain.
    /// A vehicle scheduled right at the control-zone boundary passes the full
    /// control length; one rescheduled mid-zone passes what remains.
    pub fn terminal_time(
        &self,
        approach: usize,
        t0: f64,
        v0: f64,
        dist_to_entry: f64,
        limits: &VehicleLimits,
    ) -> f64 {
        let earliest =
            t0 + min_transit_time(v0, dist_to_entry + self.zone.zone_length, limits);
        let mut tf = earliest;
        for (a, mark) in self.marks.iter().enumerate() {
            let Some(m) = mark else { continue };
            match self.zone.conflict_between(a, approach) {
                Conflict::None => {}
                Conflict::SameLane | Conflict::Lateral => {
                    tf = tf.max(m.tf + limits.headway);
                }
            }
        }
        if self.last_tf > f64::NEG_INFINITY {
            tf = tf.max(self.last_tf + EPS_CHAIN);
        }
        tf
    }

    /// Latest box-entry constraint from lateral predecessors.
    fn entry_floor(&self, approach: usize, limits: &VehicleLimits) -> f64 {
        let mut floor = f64::NEG_INFINITY;
        for (a, mark) in self.marks.iter().enumerate() {
            let Some(m) = mark else { continue };
            if self.zone.conflict_between(a, approach) == Conflict::Lateral {
                floor = floor.max(m.box_entry + limits.headway);
            }
        }
        floor
    }

    /// Schedule a vehicle whose conflict-box entry lies `dist_to_entry`
    /// meters ahead (at most the approach's control length; less when a
    /// fallback retry happens mid-zone). On failure the caller keeps the
    /// vehicle on baseline behavior; the failure is counted here.
    pub fn try_enter(
        &mut self,
        vehicle: VehicleId,
        approach: usize,
        t0: f64,
        v0: f64,
        dist_to_entry: f64,
        limits: &VehicleLimits,
    ) -> Result<&QueueEntry, CoreError> {
        if approach >= self.zone.approach_count() {
            return Err(CoreError::consistency(format!(
                "approach {approach} out of range on zone {}",
                self.zone.id
            )));
        }
        if !(dist_to_entry > 0.0)
            || dist_to_entry > self.zone.control_length(approach) + 1e-6
        {
            return Err(CoreError::consistency(format!(
                "entry distance {dist_to_entry} outside control zone on {}",
                self.zone.id
            )));
        }
        if self.entry_for(vehicle).is_some() {
            return Err(CoreError::consistency(format!(
                "vehicle {vehicle} already queued on zone {}",
                self.zone.id
            )));
        }
        if let Some(back) = self.queue.back() {
            if t0 < back.t0 - 1e-9 {
                return Err(CoreError::consistency(format!(
                    "zone {} entries out of time order: {} after {}",
                    self.zone.id, t0, back.t0
                )));
            }
        }

        let dist = dist_to_entry + self.zone.zone_length;
        let entry_floor = self.entry_floor(approach, limits);
        let mut tf = self.terminal_time(approach, t0, v0, dist_to_entry, limits);

        let mut scheduled = None;
        for _ in 0..ENTRY_REFINE_MAX {
            let sol = match solve_with_backoff(t0, tf, v0, dist, limits) {
                Ok(s) => s,
                Err(e) => {
                    self.failures += 1;
                    return Err(e);
                }
            };
            tf = sol.tf;
            let box_entry = crossing_time(&sol.trajectory, dist_to_entry);
            if box_entry >= entry_floor - ENTRY_TOL {
                scheduled = Some((sol.trajectory, tf, box_entry));
                break;
            }
            // Push the whole plan later by more than the box-entry deficit:
            // entry time grows sublinearly with the horizon, so the
            // overshoot keeps convergence to a handful of rounds.
            tf += 1.5 * (entry_floor - box_entry);
        }
        let Some((trajectory, tf, box_entry)) = scheduled else {
            self.failures += 1;
            return Err(CoreError::InfeasibleHorizon {
                tf,
                min_tf: entry_floor,
            });
        };

        self.marks[approach] = Some(ApproachMark { tf, box_entry });
        self.last_tf = self.last_tf.max(tf);
        self.queue.push_back(QueueEntry {
            vehicle,
            approach,
            t0,
            tf,
            box_entry,
            trajectory,
        });
        Ok(self.queue.back().expect("just pushed"))
    }

    /// Release the vehicle at the conflict-zone exit. Only the queue head
    /// may be released; anything else means exits happened out of
    /// assignment order, which the engine must resolve by demotion first.
    pub fn release(&mut self, vehicle: VehicleId) -> Result<QueueEntry, CoreError> {
        match self.queue.front() {
            None => Err(CoreError::consistency(format!(
                "release of {vehicle} from empty zone {}",
                self.zone.id
            ))),
            Some(head) if head.vehicle != vehicle => Err(CoreError::consistency(format!(
                "out-of-order release on zone {}: {} before head {}",
                self.zone.id, vehicle, head.vehicle
            ))),
            Some(_) => Ok(self.queue.pop_front().expect("head checked")),
        }
    }

    /// Drop a scheduled vehicle that lost its slot (dragged off its plan or
    /// overtaken at the exit). Successors keep their assignments; the
    /// approach marks stay, so the abandoned slot is never reassigned.
    pub fn demote(&mut self, vehicle: VehicleId) -> Option<QueueEntry> {
        let idx = self.queue.iter().position(|e| e.vehicle == vehicle)?;
        self.failures += 1;
        self.queue.remove(idx)
    }
}

/// Rear-end spacing rule between two vehicles on one lane.
pub fn rear_end_gap_ok(
    follower: &VehicleState,
    leader: &VehicleState,
    limits: &VehicleLimits,
) -> bool {
    crate::behavior::rear_end_gap_ok(leader.position - follower.position, follower.speed, limits)
}

/// Time at which a plan crosses `target` meters from its start. Position is
/// non-decreasing along a feasible plan, so bisection on the window is
/// exact enough at 1e-9 m.
fn crossing_time(traj: &Trajectory, target: f64) -> f64 {
    let (mut lo, mut hi) = (traj.t0(), traj.tf());
    let p_end = traj.position(hi).unwrap_or(f64::INFINITY);
    if target >= p_end {
        return hi;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if traj.position(mid).unwrap_or(f64::INFINITY) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::RouteId;
    use crate::optctrl::solve;
    use proptest::prelude::*;

    fn crossing_zone() -> ConflictZone {
        // Two crossing approaches plus one unrelated parallel lane.
        ConflictZone::new(
            ZoneId(0),
            20.0,
            vec![150.0, 150.0, 150.0],
            &[(0, 1, Conflict::Lateral)],
        )
        .unwrap()
    }

    fn human() -> VehicleLimits {
        VehicleLimits::default()
    }

    #[test]
    fn empty_queue_gets_free_flow_exit() {
        let zone = ConflictZone::new(ZoneId(0), 0.0, vec![150.0], &[]).unwrap();
        let coord = Coordinator::new(zone);
        let tf = coord.terminal_time(0, 0.0, 20.0, 150.0, &human());
        assert!((tf - 50.0 / 9.0).abs() < 1e-9);
    }

    #[test]
    fn lateral_predecessor_pushes_exit() {
        let mut coord = Coordinator::new(crossing_zone());
        coord.marks[1] = Some(ApproachMark {
            tf: 100.0,
            box_entry: 99.0,
        });
        coord.last_tf = 100.0;
        // Candidate's own earliest would be 99.5.
        let tf = coord.terminal_time(0, 93.0, 25.0, 150.0, &human());
        assert!((tf - 101.2).abs() < 1e-9, "got {tf}");
    }

    #[test]
    fn unconstrained_when_earliest_dominates() {
        let mut coord = Coordinator::new(crossing_zone());
        coord.marks[1] = Some(ApproachMark {
            tf: 50.0,
            box_entry: 49.0,
        });
        coord.last_tf = 50.0;
        let limits = human();
        // Pick t0 so the free-flow earliest lands at exactly 52.
        let t0 = 52.0 - min_transit_time(25.0, 170.0, &limits);
        let tf = coord.terminal_time(0, t0, 25.0, 150.0, &limits);
        assert!((tf - 52.0).abs() < 1e-9, "got {tf}");
    }

    #[test]
    fn same_lane_predecessor_at_av_headway() {
        let zone = ConflictZone::new(ZoneId(0), 20.0, vec![150.0], &[]).unwrap();
        let mut coord = Coordinator::new(zone);
        coord.marks[0] = Some(ApproachMark {
            tf: 30.0,
            box_entry: 29.3,
        });
        coord.last_tf = 30.0;
        let limits = human().with_headway(0.9);
        let t0 = 29.0 - min_transit_time(25.0, 170.0, &limits);
        let tf = coord.terminal_time(0, t0, 25.0, 150.0, &limits);
        assert!((tf - 30.9).abs() < 1e-9, "got {tf}");
    }

    #[test]
    fn max_over_mixed_predecessors() {
        let mut coord = Coordinator::new(crossing_zone());
        // Lateral predecessor exits at 40, same-lane at 41.
        coord.marks[1] = Some(ApproachMark {
            tf: 40.0,
            box_entry: 39.0,
        });
        coord.marks[0] = Some(ApproachMark {
            tf: 41.0,
            box_entry: 40.2,
        });
        coord.last_tf = 41.0;
        let limits = human();
        let t0 = 38.0 - min_transit_time(25.0, 170.0, &limits);
        let tf = coord.terminal_time(0, t0, 25.0, 150.0, &limits);
        assert!((tf - 42.2).abs() < 1e-9, "got {tf}");
    }

    #[test]
    fn unrelated_approaches_pay_only_epsilon() {
        let mut coord = Coordinator::new(crossing_zone());
        let limits = human();
        let first = coord.try_enter(VehicleId(1), 0, 0.0, 30.0, 150.0, &limits).unwrap();
        let tf1 = first.tf;
        // Approach 2 never conflicts with 0, yet must exit after it.
        let second = coord.try_enter(VehicleId(2), 2, 0.0, 30.0, 150.0, &limits).unwrap();
        let tf2 = second.tf;
        assert!((tf2 - (tf1 + EPS_CHAIN)).abs() < 1e-9);
    }

    #[test]
    fn lateral_pair_separated_at_entry_and_exit() {
        let mut coord = Coordinator::new(crossing_zone());
        let limits = human();
        let a = coord
            .try_enter(VehicleId(1), 0, 0.0, 30.0, 150.0, &limits)
            .unwrap()
            .clone();
        let b = coord
            .try_enter(VehicleId(2), 1, 0.0, 30.0, 150.0, &limits)
            .unwrap()
            .clone();
        assert!(b.tf - a.tf >= limits.headway - 1e-9);
        assert!(
            b.box_entry - a.box_entry >= limits.headway - 2e-3,
            "entries {} vs {}",
            a.box_entry,
            b.box_entry
        );
        // Occupancy midpoints inherit the separation.
        let mid_a = 0.5 * (a.box_entry + a.tf);
        let mid_b = 0.5 * (b.box_entry + b.tf);
        assert!(mid_b - mid_a >= limits.headway - 2e-3);
    }

    #[test]
    fn release_is_head_only() {
        let mut coord = Coordinator::new(crossing_zone());
        let limits = human();
        coord.try_enter(VehicleId(1), 0, 0.0, 25.0, 150.0, &limits).unwrap();
        coord.try_enter(VehicleId(2), 1, 0.5, 25.0, 150.0, &limits).unwrap();
        assert!(coord.release(VehicleId(2)).is_err());
        assert_eq!(coord.release(VehicleId(1)).unwrap().vehicle, VehicleId(1));
        assert_eq!(coord.release(VehicleId(2)).unwrap().vehicle, VehicleId(2));
        assert!(coord.is_empty());
        assert!(coord.release(VehicleId(3)).is_err());
    }

    #[test]
    fn demotion_keeps_successor_assignments() {
        let mut coord = Coordinator::new(crossing_zone());
        let limits = human();
        coord.try_enter(VehicleId(1), 0, 0.0, 25.0, 150.0, &limits).unwrap();
        let tf2 = coord
            .try_enter(VehicleId(2), 1, 0.2, 25.0, 150.0, &limits)
            .unwrap()
            .tf;
        let dropped = coord.demote(VehicleId(1)).unwrap();
        assert_eq!(dropped.vehicle, VehicleId(1));
        assert_eq!(coord.failures, 1);
        assert_eq!(coord.entry_for(VehicleId(2)).unwrap().tf, tf2);
        // The abandoned slot still constrains newcomers on approach 0's
        // lateral partner.
        let tf3 = coord
            .try_enter(VehicleId(3), 1, 0.4, 25.0, 150.0, &limits)
            .unwrap()
            .tf;
        assert!(tf3 >= tf2 + EPS_CHAIN - 1e-9);
    }

    #[test]
    fn mid_zone_retry_plans_over_the_remaining_distance() {
        let mut coord = Coordinator::new(crossing_zone());
        let limits = human();
        // Retrying 60 m short of the box at 10 m/s: the plan covers 80 m.
        let e = coord
            .try_enter(VehicleId(1), 0, 12.0, 10.0, 60.0, &limits)
            .unwrap();
        let horizon = e.tf - e.t0;
        assert!(
            (e.trajectory.position(e.t0 + horizon).unwrap() - 80.0).abs() < 1e-6
        );
        assert!((e.trajectory.position(e.box_entry).unwrap() - 60.0).abs() < 1e-6);
        // Entering from beyond the control boundary is a caller bug.
        assert!(coord
            .try_enter(VehicleId(2), 0, 13.0, 10.0, 151.0, &limits)
            .is_err());
        assert!(coord
            .try_enter(VehicleId(3), 0, 13.0, 10.0, 0.0, &limits)
            .is_err());
    }

    #[test]
    fn duplicate_entry_rejected() {
        let mut coord = Coordinator::new(crossing_zone());
        let limits = human();
        coord.try_enter(VehicleId(1), 0, 0.0, 25.0, 150.0, &limits).unwrap();
        assert!(coord.try_enter(VehicleId(1), 1, 1.0, 25.0, 150.0, &limits).is_err());
    }

    #[test]
    fn spacing_rule_on_states() {
        let mk = |p: f64, v: f64| VehicleState {
            id: VehicleId(0),
            route: RouteId(0),
            position: p,
            speed: v,
            accel: 0.0,
            lane: 0,
            entry_time: 0.0,
            zone_entry_time: None,
        };
        let limits = human();
        assert!(rear_end_gap_ok(&mk(0.0, 20.0), &mk(26.0, 18.0), &limits));
        assert!(!rear_end_gap_ok(&mk(0.0, 20.0), &mk(25.0, 18.0), &limits));
        assert!(rear_end_gap_ok(&mk(0.0, 0.0), &mk(1.5, 0.0), &limits));
    }

    #[test]
    fn crossing_time_finds_box_entry() {
        let traj = solve(0.0, 10.0, 20.0, 170.0).unwrap();
        let t = crossing_time(&traj, 150.0);
        assert!((traj.position(t).unwrap() - 150.0).abs() < 1e-6);
        assert!(t > 0.0 && t < 10.0);
    }

    proptest! {
        /// Adding a conflicting predecessor never brings the assigned exit
        /// earlier.
        #[test]
        fn predecessors_only_delay(
            pred_tf in 0.0f64..60.0,
            t0 in 0.0f64..40.0,
            v0 in 5.0f64..30.0,
        ) {
            let limits = human();
            let empty = Coordinator::new(crossing_zone());
            let base = empty.terminal_time(0, t0, v0, 150.0, &limits);

            let mut with_pred = Coordinator::new(crossing_zone());
            with_pred.marks[1] = Some(ApproachMark { tf: pred_tf, box_entry: pred_tf - 0.7 });
            with_pred.last_tf = pred_tf;
            let constrained = with_pred.terminal_time(0, t0, v0, 150.0, &limits);
            prop_assert!(constrained >= base - 1e-12);
        }

        /// Queue assignments on one zone always produce strictly increasing
        /// exit times, whatever mix of approaches arrives.
        #[test]
        fn exits_strictly_ordered(seq in prop::collection::vec((0usize..3, 1.0f64..6.0, 10.0f64..30.0), 1..25)) {
            let mut coord = Coordinator::new(crossing_zone());
            let limits = human();
            let mut t = 0.0;
            let mut last_tf = f64::NEG_INFINITY;
            for (i, (approach, dt, v0)) in seq.into_iter().enumerate() {
                t += dt;
                if let Ok(e) = coord.try_enter(VehicleId(i as u32), approach, t, v0, 150.0, &limits) {
                    prop_assert!(e.tf > last_tf, "tf {} not after {}", e.tf, last_tf);
                    prop_assert!(e.box_entry >= e.t0 - 1e-9);
                    prop_assert!(e.tf > e.box_entry);
                    last_tf = e.tf;
                }
            }
        }
    }
}
