//! Point-mass longitudinal dynamics. Position and speed integrate a
//! piecewise-constant acceleration exactly, so step size never changes the
//! trajectory of a vehicle holding a fixed control.

use crate::error::CoreError;
use crate::ids::{RouteId, VehicleId};

/// Actuation and speed envelope for one vehicle, plus the spacing parameters
/// that define its desired following distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleLimits {
    /// Strongest braking, m/s^2 (negative).
    pub u_min: f64,
    /// Strongest acceleration, m/s^2 (positive).
    pub u_max: f64,
    /// Lower speed bound, m/s (zero: no reversing).
    pub v_min: f64,
    /// Upper speed bound, m/s.
    pub v_max: f64,
    /// Standstill spacing floor, m.
    pub standstill: f64,
    /// Desired time headway, s. Scenario-dependent: relaxed for human
    /// drivers, tighter for automated ones.
    pub headway: f64,
}

impl Default for VehicleLimits {
    fn default() -> Self {
        VehicleLimits {
            u_min: -6.0,
            u_max: 3.0,
            v_min: 0.0,
            v_max: 30.0,
            standstill: 1.5,
            headway: 1.2,
        }
    }
}

impl VehicleLimits {
    pub fn validate(&self) -> Result<(), CoreError> {
        let all = [
            self.u_min,
            self.u_max,
            self.v_min,
            self.v_max,
            self.standstill,
            self.headway,
        ];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::NonFinite("vehicle limits"));
        }
        if !(self.u_min < 0.0 && 0.0 < self.u_max) {
            return Err(CoreError::validation(format!(
                "control bounds must straddle zero, got [{}, {}]",
                self.u_min, self.u_max
            )));
        }
        if !(0.0 <= self.v_min && self.v_min < self.v_max) {
            return Err(CoreError::validation(format!(
                "speed bounds must satisfy 0 <= v_min < v_max, got [{}, {}]",
                self.v_min, self.v_max
            )));
        }
        if self.standstill <= 0.0 || self.headway <= 0.0 {
            return Err(CoreError::validation(
                "standstill spacing and headway must be positive".to_string(),
            ));
        }
        Ok(())
    }

    /// Same envelope with a different desired headway.
    pub fn with_headway(mut self, headway: f64) -> Self {
        self.headway = headway;
        self
    }

    /// Same envelope with a different speed cap (e.g. a link speed limit).
    pub fn with_v_max(mut self, v_max: f64) -> Self {
        self.v_max = v_max;
        self
    }
}

/// Kinematic state of one vehicle. `position` is the arc length traveled
/// along the route; routing context lives in the engine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub id: VehicleId,
    pub route: RouteId,
    /// Distance along the route, m.
    pub position: f64,
    /// Speed, m/s (never negative).
    pub speed: f64,
    /// Acceleration applied over the last step, m/s^2.
    pub accel: f64,
    /// Lane index on the current link, 0 = rightmost.
    pub lane: u8,
    /// Simulation time the vehicle entered the network, s.
    pub entry_time: f64,
    /// Time the vehicle entered its current control zone, if inside one.
    pub zone_entry_time: Option<f64>,
}

/// Clamp a commanded acceleration into the actuation envelope.
pub fn clamp_control(u: f64, limits: &VehicleLimits) -> f64 {
    u.clamp(limits.u_min, limits.u_max)
}

/// Desired following distance at speed `v`: a standstill floor plus a
/// headway-proportional term.
pub fn safe_distance(v: f64, limits: &VehicleLimits) -> f64 {
    limits.standstill + limits.headway * v
}

/// Advance `(position, speed)` by `dt` under constant acceleration `u`,
/// saturating speed at the envelope. When the speed bound engages mid-step
/// the two phases integrate separately, so the result is exact rather than
/// first-order.
pub fn step(
    state: &VehicleState,
    u: f64,
    dt: f64,
    limits: &VehicleLimits,
) -> Result<VehicleState, CoreError> {
    if !u.is_finite() {
        return Err(CoreError::NonFinite("control input"));
    }
    if !dt.is_finite() || dt <= 0.0 {
        return Err(CoreError::NonFinite("step size"));
    }
    if !state.position.is_finite() || !state.speed.is_finite() {
        return Err(CoreError::NonFinite("vehicle state"));
    }

    let v0 = state.speed;
    let v_free = v0 + u * dt;
    let (dp, v1) = if v_free > limits.v_max {
        let t_hit = if u > 0.0 {
            ((limits.v_max - v0) / u).clamp(0.0, dt)
        } else {
            0.0
        };
        (
            v0 * t_hit + 0.5 * u * t_hit * t_hit + limits.v_max * (dt - t_hit),
            limits.v_max,
        )
    } else if v_free < limits.v_min {
        let t_hit = if u < 0.0 {
            ((limits.v_min - v0) / u).clamp(0.0, dt)
        } else {
            0.0
        };
        (
            v0 * t_hit + 0.5 * u * t_hit * t_hit + limits.v_min * (dt - t_hit),
            limits.v_min,
        )
    } else {
        (v0 * dt + 0.5 * u * dt * dt, v_free)
    };

    let mut next = *state;
    next.position += dp;
    next.speed = v1;
    next.accel = u;
    Ok(next)
}
