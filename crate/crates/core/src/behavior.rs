//! Baseline driver behavior: car-following, stop-line handling at signals,
//! lane selection, and gap acceptance at unsignalized conflicts.
//!
//! Everything here is a pure function of local observations. The engine owns
//! who observes whom; this module owns how an observation turns into an
//! acceleration or a yes/no decision.

use crate::dynamics::{safe_distance, VehicleLimits};

/// Feedback gains for the spacing controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarFollowingParams {
    /// Gain on the spacing error, 1/s^2.
    pub k_gap: f64,
    /// Gain on the speed difference to the leader, 1/s.
    pub k_speed: f64,
    /// Gain for relaxing toward the free speed, 1/s.
    pub k_free: f64,
    /// Deceleration beyond which the kinematic stopping guard takes over
    /// from the linear feedback, m/s^2 (positive, below |u_min|).
    pub comfort_decel: f64,
}

impl Default for CarFollowingParams {
    fn default() -> Self {
        CarFollowingParams {
            k_gap: 0.25,
            k_speed: 1.2,
            k_free: 1.5,
            comfort_decel: 1.0,
        }
    }
}

/// What a driver sees of the vehicle ahead in some lane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leader {
    /// Clear distance to the leader, m.
    pub gap: f64,
    /// Leader speed, m/s.
    pub speed: f64,
}

/// Acceleration with no one ahead: proportional relaxation toward the free
/// speed, saturated by the actuation envelope.
pub fn free_flow_accel(v: f64, v_free: f64, p: &CarFollowingParams, limits: &VehicleLimits) -> f64 {
    (p.k_free * (v_free - v)).clamp(limits.u_min, limits.u_max)
}

/// Spacing controller. The commanded acceleration is the free-flow term
/// capped by a linear feedback on spacing error and closing speed, so a
/// follower at the desired gap matching the leader's speed holds steady.
///
/// The linear feedback alone is not collision-free against a hard-braking
/// leader: a braking wave amplifies down a platoon. Whenever closing on the
/// leader would take more than `comfort_decel` to resolve, the command is
/// capped by the constant deceleration that stops the ego a standstill
/// distance short of the leader's current tail, which keeps worst-case
/// spacing intrusion in an emergency stop under half a meter.
pub fn car_following_accel(
    v: f64,
    v_free: f64,
    leader: Option<Leader>,
    p: &CarFollowingParams,
    limits: &VehicleLimits,
) -> f64 {
    let free = free_flow_accel(v, v_free, p, limits);
    match leader {
        None => free,
        Some(l) => {
            let follow = p.k_gap * (l.gap - safe_distance(v, limits)) + p.k_speed * (l.speed - v);
            let mut u = free.min(follow);
            if v > l.speed {
                let room = (l.gap - limits.standstill).max(0.05);
                let needed = (v * v - l.speed * l.speed) / (2.0 * room);
                if needed > p.comfort_decel {
                    u = u.min(-needed);
                }
            }
            u.clamp(limits.u_min, limits.u_max)
        }
    }
}

/// Measurement slack when auditing spacing, m. Gaps are judged against the
/// desired distance minus this.
pub const REAR_END_TOL: f64 = 0.01;

/// Whether a gap satisfies the speed-dependent spacing rule.
pub fn rear_end_gap_ok(gap: f64, v: f64, limits: &VehicleLimits) -> bool {
    gap >= safe_distance(v, limits) - REAR_END_TOL
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalState {
    Green,
    Yellow,
    Red,
}

/// Signal timing for one movement: green windows inside a fixed cycle, each
/// followed by the same yellow interval. Time outside every window and its
/// yellow is red.
#[derive(Debug, Clone, PartialEq)]
pub struct MovementSignal {
    pub cycle: f64,
    /// Green intervals `[on, off)` in cycle time, non-overlapping, sorted.
    pub green: Vec<(f64, f64)>,
    pub yellow: f64,
}

impl MovementSignal {
    /// State at absolute time `t`, plus time remaining in that state.
    pub fn state_at(&self, t: f64) -> (SignalState, f64) {
        let tc = t.rem_euclid(self.cycle);
        for &(on, off) in &self.green {
            if tc >= on && tc < off {
                return (SignalState::Green, off - tc);
            }
            if tc >= off && tc < off + self.yellow {
                return (SignalState::Yellow, off + self.yellow - tc);
            }
        }
        // Red lasts until the next green onset, possibly wrapping the cycle.
        let next_on = self
            .green
            .iter()
            .map(|&(on, _)| {
                if on > tc {
                    on - tc
                } else {
                    on + self.cycle - tc
                }
            })
            .fold(f64::INFINITY, f64::min);
        (SignalState::Red, next_on)
    }
}

/// Acceleration on a signalized approach.
///
/// Green runs the ordinary spacing controller. Yellow counts as green only
/// if the stop line can still be crossed before red at the current speed;
/// otherwise, like red, the stop line becomes a standing obstacle and the
/// response is the more cautious of obstacle and leader. A vehicle already
/// past the line is committed and follows its leader.
pub fn signal_approach_accel(
    state: SignalState,
    remaining: f64,
    dist_to_stop: f64,
    v: f64,
    v_free: f64,
    leader: Option<Leader>,
    p: &CarFollowingParams,
    limits: &VehicleLimits,
) -> f64 {
    let must_stop = match state {
        SignalState::Green => false,
        SignalState::Yellow => v * remaining < dist_to_stop,
        SignalState::Red => true,
    };
    if !must_stop || dist_to_stop < 0.0 {
        return car_following_accel(v, v_free, leader, p, limits);
    }
    let line = Leader {
        gap: dist_to_stop,
        speed: 0.0,
    };
    let to_line = car_following_accel(v, v_free, Some(line), p, limits);
    match leader {
        None => to_line,
        Some(l) => to_line.min(car_following_accel(v, v_free, Some(l), p, limits)),
    }
}

/// Lane selection mechanics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneChangeParams {
    /// Anticipated speed gain required before a discretionary change, m/s.
    pub gain_bias: f64,
    /// Minimum time between changes by one vehicle, s.
    pub cooldown: f64,
    /// Leaders beyond this distance do not constrain a lane's speed, m.
    pub lookahead: f64,
}

impl Default for LaneChangeParams {
    fn default() -> Self {
        LaneChangeParams {
            gain_bias: 2.0,
            cooldown: 5.0,
            lookahead: 100.0,
        }
    }
}

/// Speed a driver expects to sustain in a lane: the free speed when the lane
/// looks open, otherwise the speed of the vehicle ahead.
pub fn anticipated_speed(v_free: f64, leader: Option<Leader>, p: &LaneChangeParams) -> f64 {
    match leader {
        Some(l) if l.gap <= p.lookahead => v_free.min(l.speed),
        _ => v_free,
    }
}

/// Whether the gaps around the target-lane slot are safe to move into. The
/// new leader must leave the ego its desired distance; the new follower must
/// keep its own. Safety is never relaxed, mandatory or not.
pub fn gaps_acceptable(
    v_ego: f64,
    target_lead: Option<Leader>,
    target_lag: Option<Leader>,
    ego_limits: &VehicleLimits,
    lag_limits: &VehicleLimits,
) -> bool {
    let lead_ok = target_lead
        .map(|l| l.gap >= safe_distance(v_ego, ego_limits))
        .unwrap_or(true);
    // For the lag vehicle, `gap` is the room it would have behind the ego
    // and `speed` is the lag vehicle's own speed.
    let lag_ok = target_lag
        .map(|l| l.gap >= safe_distance(l.speed, lag_limits))
        .unwrap_or(true);
    lead_ok && lag_ok
}

/// Discretionary lane-change decision: worth it and safe. Mandatory changes
/// (the route requires the target lane) skip the worth-it test.
#[allow(clippy::too_many_arguments)]
pub fn lane_change_desired(
    v_ego: f64,
    v_free: f64,
    current_lead: Option<Leader>,
    target_lead: Option<Leader>,
    target_lag: Option<Leader>,
    mandatory: bool,
    p: &LaneChangeParams,
    ego_limits: &VehicleLimits,
    lag_limits: &VehicleLimits,
) -> bool {
    if !gaps_acceptable(v_ego, target_lead, target_lag, ego_limits, lag_limits) {
        return false;
    }
    if mandatory {
        return true;
    }
    let here = anticipated_speed(v_free, current_lead, p);
    let there = anticipated_speed(v_free, target_lead, p);
    there - here > p.gain_bias
}

/// A vehicle on a conflicting approach, as seen from a stop line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Approaching {
    /// Distance to the conflict area, m. Non-positive means inside it.
    pub dist: f64,
    pub speed: f64,
}

/// Gap acceptance at an unsignalized conflict: proceed only when every
/// conflicting vehicle is either further than `t_crit` seconds away or
/// effectively parked short of the conflict.
pub fn crossing_clear(conflicting: &[Approaching], t_crit: f64) -> bool {
    conflicting.iter().all(|a| {
        if a.dist <= 0.0 {
            return false;
        }
        a.dist >= t_crit * a.speed
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{step, VehicleState};
    use crate::ids::{RouteId, VehicleId};
    use proptest::prelude::*;

    fn human() -> VehicleLimits {
        VehicleLimits::default()
    }

    fn av() -> VehicleLimits {
        VehicleLimits::default().with_headway(0.9)
    }

    #[test]
    fn equilibrium_commands_nothing() {
        let p = CarFollowingParams::default();
        let u = car_following_accel(
            20.0,
            30.0,
            Some(Leader {
                gap: 25.5,
                speed: 20.0,
            }),
            &p,
            &human(),
        );
        assert_eq!(u, 0.0);
    }

    #[test]
    fn tight_gap_forces_hard_braking() {
        let p = CarFollowingParams::default();
        let u = car_following_accel(
            20.0,
            30.0,
            Some(Leader {
                gap: 5.0,
                speed: 0.0,
            }),
            &p,
            &human(),
        );
        assert_eq!(u, -6.0);
    }

    #[test]
    fn free_flow_saturates() {
        let p = CarFollowingParams::default();
        assert_eq!(free_flow_accel(20.0, 30.0, &p, &human()), 3.0);
        assert!((free_flow_accel(29.5, 30.0, &p, &human()) - 0.75).abs() < 1e-12);
        assert!(free_flow_accel(25.0, 20.0, &p, &human()) < 0.0);
    }

    #[test]
    fn spacing_rule_examples() {
        assert!(rear_end_gap_ok(26.0, 20.0, &human()));
        assert!(!rear_end_gap_ok(25.0, 20.0, &human()));
        assert!(rear_end_gap_ok(1.5, 0.0, &human()));
        assert!(rear_end_gap_ok(20.0, 20.0, &av()));
    }

    #[test]
    fn signal_cycle_states() {
        let sig = MovementSignal {
            cycle: 90.0,
            green: vec![(0.0, 41.0)],
            yellow: 4.0,
        };
        assert_eq!(sig.state_at(10.0), (SignalState::Green, 31.0));
        let (s, rem) = sig.state_at(43.0);
        assert_eq!(s, SignalState::Yellow);
        assert!((rem - 2.0).abs() < 1e-12);
        let (s, rem) = sig.state_at(50.0);
        assert_eq!(s, SignalState::Red);
        assert!((rem - 40.0).abs() < 1e-12);
        assert_eq!(sig.state_at(95.0).0, SignalState::Green);
    }

    #[test]
    fn yellow_clearable_or_not() {
        let p = CarFollowingParams::default();
        // 20 m/s with 2 s of yellow clears 40 m.
        let go = signal_approach_accel(
            SignalState::Yellow,
            2.0,
            35.0,
            20.0,
            20.0,
            None,
            &p,
            &human(),
        );
        assert_eq!(go, 0.0);
        let stop = signal_approach_accel(
            SignalState::Yellow,
            2.0,
            45.0,
            20.0,
            20.0,
            None,
            &p,
            &human(),
        );
        assert!(stop < -1.0);
    }

    #[test]
    fn red_brakes_even_with_open_road() {
        let p = CarFollowingParams::default();
        let u = signal_approach_accel(
            SignalState::Red,
            30.0,
            30.0,
            20.0,
            20.0,
            None,
            &p,
            &human(),
        );
        assert!(u < -3.0);
        // Committed past the line: ignore the signal.
        let u = signal_approach_accel(
            SignalState::Red,
            30.0,
            -2.0,
            20.0,
            20.0,
            None,
            &p,
            &human(),
        );
        assert_eq!(u, 0.0);
    }

    #[test]
    fn overtaking_worth_it_and_safe() {
        let p = LaneChangeParams::default();
        let slow = Leader {
            gap: 40.0,
            speed: 10.0,
        };
        assert!(lane_change_desired(
            20.0,
            20.0,
            Some(slow),
            None,
            None,
            false,
            &p,
            &human(),
            &human()
        ));
        // Same situation but a lag vehicle too close behind the slot.
        let lag = Leader {
            gap: 10.0,
            speed: 18.0,
        };
        assert!(!lane_change_desired(
            20.0,
            20.0,
            Some(slow),
            None,
            Some(lag),
            false,
            &p,
            &human(),
            &human()
        ));
        // Mandatory: gain ignored, safety still binding.
        assert!(lane_change_desired(
            20.0,
            20.0,
            None,
            None,
            None,
            true,
            &p,
            &human(),
            &human()
        ));
        assert!(!lane_change_desired(
            20.0,
            20.0,
            None,
            Some(Leader {
                gap: 5.0,
                speed: 20.0
            }),
            None,
            true,
            &p,
            &human(),
            &human()
        ));
    }

    #[test]
    fn lane_speed_anticipation() {
        let p = LaneChangeParams::default();
        assert_eq!(anticipated_speed(20.0, None, &p), 20.0);
        let far = Leader {
            gap: 120.0,
            speed: 5.0,
        };
        assert_eq!(anticipated_speed(20.0, Some(far), &p), 20.0);
        let near = Leader {
            gap: 50.0,
            speed: 12.0,
        };
        assert_eq!(anticipated_speed(20.0, Some(near), &p), 12.0);
    }

    #[test]
    fn crossing_gap_examples() {
        let ok = [Approaching {
            dist: 120.0,
            speed: 20.0,
        }];
        assert!(crossing_clear(&ok, 6.0));
        let tight = [Approaching {
            dist: 119.0,
            speed: 20.0,
        }];
        assert!(!crossing_clear(&tight, 6.0));
        let parked = [Approaching {
            dist: 50.0,
            speed: 0.0,
        }];
        assert!(crossing_clear(&parked, 6.0));
        let inside = [Approaching {
            dist: -2.0,
            speed: 10.0,
        }];
        assert!(!crossing_clear(&inside, 6.0));
        assert!(crossing_clear(&[], 6.0));
    }

    fn veh(p: f64, v: f64) -> VehicleState {
        VehicleState {
            id: VehicleId(0),
            route: RouteId(0),
            position: p,
            speed: v,
            accel: 0.0,
            lane: 0,
            entry_time: 0.0,
            zone_entry_time: None,
        }
    }

    /// Run a 50-vehicle equilibrium platoon behind a leader that slams to a
    /// stop; return (minimum gap, worst spacing intrusion δ(v) − gap).
    fn platoon_emergency(limits: &VehicleLimits) -> (f64, f64) {
        let p = CarFollowingParams::default();
        let dt = 0.1;
        let n = 50;
        let eq = safe_distance(20.0, limits);
        let mut lead = veh(n as f64 * eq, 20.0);
        let mut followers: Vec<VehicleState> = (0..n)
            .map(|i| veh((n - 1 - i) as f64 * eq, 20.0))
            .collect();
        let mut min_gap = f64::INFINITY;
        let mut worst = f64::NEG_INFINITY;
        for k in 0..3000 {
            let t = k as f64 * dt;
            let u_lead = if t > 2.0 && lead.speed > 0.0 {
                limits.u_min
            } else {
                0.0
            };
            let mut ahead = lead;
            let mut next = Vec::with_capacity(followers.len());
            for f in &followers {
                let gap = ahead.position - f.position;
                min_gap = min_gap.min(gap);
                worst = worst.max(safe_distance(f.speed, limits) - gap);
                let u = car_following_accel(
                    f.speed,
                    30.0,
                    Some(Leader {
                        gap,
                        speed: ahead.speed,
                    }),
                    &p,
                    limits,
                );
                next.push(step(f, u, dt, limits).unwrap());
                ahead = *f;
            }
            lead = step(&lead, u_lead, dt, limits).unwrap();
            followers = next;
        }
        (min_gap, worst)
    }

    #[test]
    fn platoon_emergency_stop_keeps_spacing() {
        for limits in [human(), av()] {
            let (min_gap, worst_intrusion) = platoon_emergency(&limits);
            assert!(min_gap > 0.0, "collision: min gap {min_gap}");
            assert!(
                worst_intrusion <= 0.5,
                "spacing intruded by {worst_intrusion} m at h={}",
                limits.headway
            );
        }
    }

    proptest! {
        /// From any reasonable start, a follower settles to the desired gap
        /// behind a constant-speed leader.
        #[test]
        fn converges_to_desired_gap(gap0 in 6.0f64..80.0, v0 in 0.0f64..30.0, h in prop::sample::select(vec![1.2f64, 0.9])) {
            let limits = VehicleLimits::default().with_headway(h);
            let p = CarFollowingParams::default();
            let dt = 0.1;
            let v_lead = 15.0;
            let mut lead_pos = gap0;
            let mut f = veh(0.0, v0);
            for _ in 0..1800 {
                let u = car_following_accel(
                    f.speed,
                    30.0,
                    Some(Leader { gap: lead_pos - f.position, speed: v_lead }),
                    &p,
                    &limits,
                );
                f = step(&f, u, dt, &limits).unwrap();
                lead_pos += v_lead * dt;
            }
            let target = safe_distance(v_lead, &limits);
            let gap = lead_pos - f.position;
            prop_assert!((gap - target).abs() <= 0.05 * target,
                "gap {gap} vs target {target}");
            prop_assert!((f.speed - v_lead).abs() <= 0.05 * v_lead);
        }

        /// Tighter headway settles strictly closer at the same speed.
        #[test]
        fn tighter_headway_packs_denser(v in 1.0f64..30.0) {
            prop_assert!(safe_distance(v, &av()) < safe_distance(v, &human()));
        }
    }
}
