//! Minimum-effort trajectory planning for a vehicle that must cover a fixed
//! distance in a fixed time.
//!
//! Minimizing `1/2 ∫ u^2 dt` for a double integrator with free terminal
//! speed yields an acceleration that is affine in time, hence a cubic
//! position profile. With `τ = t - t0` and boundary conditions
//! `p(0) = 0`, `v(0) = v0`, `p(T) = L`, `u(T) = 0`:
//!
//! ```text
//! p(τ) = a τ³/6 + b τ²/2 + c τ + d
//! a = 3 (v0 T - L) / T³,   b = -a T,   c = v0,   d = 0
//! ```
//!
//! Coefficients are stored in shifted time. Expanding them to absolute time
//! would cancel terms of order `t0³` against each other and lose most of the
//! mantissa by the end of a one-hour run; in shifted form the residuals at
//! both ends of the window stay below 1e-9 regardless of `t0`.

use crate::dynamics::VehicleLimits;
use crate::error::CoreError;

/// Tolerance used when checking planned trajectories against actuation and
/// speed envelopes, and when checking evaluation times against the window.
const FEAS_TOL: f64 = 1e-9;

/// A planned cubic position profile over the window `[t0, tf]`, measured
/// from the position held at `t0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trajectory {
    t0: f64,
    tf: f64,
    a: f64,
    b: f64,
    c: f64,
    d: f64,
}

impl Trajectory {
    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn tf(&self) -> f64 {
        self.tf
    }

    /// Planned distance covered over the whole window.
    pub fn length(&self) -> f64 {
        let tau = self.tf - self.t0;
        ((self.a * tau / 6.0 + self.b / 2.0) * tau + self.c) * tau + self.d
    }

    /// Cubic coefficients `(a, b, c, d)` in shifted time.
    pub fn coefficients(&self) -> (f64, f64, f64, f64) {
        (self.a, self.b, self.c, self.d)
    }

    fn tau(&self, t: f64) -> Result<f64, CoreError> {
        let slack = FEAS_TOL * (1.0 + t.abs());
        if t < self.t0 - slack || t > self.tf + slack {
            return Err(CoreError::OutOfWindow {
                t,
                t0: self.t0,
                tf: self.tf,
            });
        }
        Ok((t - self.t0).clamp(0.0, self.tf - self.t0))
    }

    /// Distance from the window's start position at absolute time `t`.
    pub fn position(&self, t: f64) -> Result<f64, CoreError> {
        let tau = self.tau(t)?;
        Ok(((self.a * tau / 6.0 + self.b / 2.0) * tau + self.c) * tau + self.d)
    }

    pub fn speed(&self, t: f64) -> Result<f64, CoreError> {
        let tau = self.tau(t)?;
        Ok((self.a * tau / 2.0 + self.b) * tau + self.c)
    }

    pub fn accel(&self, t: f64) -> Result<f64, CoreError> {
        let tau = self.tau(t)?;
        Ok(self.a * tau + self.b)
    }

    /// Control effort `1/2 ∫ u² dτ` over the window, closed form.
    pub fn energy(&self) -> f64 {
        let tau = self.tf - self.t0;
        0.5 * ((self.a * self.a * tau / 3.0 + self.a * self.b) * tau + self.b * self.b) * tau
    }
}

/// Solve the fixed-distance fixed-time problem. `v0` is the speed at `t0`,
/// `length` the distance to the window's end. Terminal speed is free; the
/// plan always ends with zero acceleration.
pub fn solve(t0: f64, tf: f64, v0: f64, length: f64) -> Result<Trajectory, CoreError> {
    if !t0.is_finite() || !tf.is_finite() {
        return Err(CoreError::NonFinite("trajectory window"));
    }
    if !v0.is_finite() || v0 < 0.0 {
        return Err(CoreError::validation(format!(
            "initial speed must be finite and non-negative, got {v0}"
        )));
    }
    if !length.is_finite() || length <= 0.0 {
        return Err(CoreError::validation(format!(
            "planning distance must be positive, got {length}"
        )));
    }
    let horizon = tf - t0;
    if horizon <= 0.0 {
        return Err(CoreError::InfeasibleHorizon { tf, min_tf: t0 });
    }
    let a = 3.0 * (v0 * horizon - length) / (horizon * horizon * horizon);
    Ok(Trajectory {
        t0,
        tf,
        a,
        b: -a * horizon,
        c: v0,
        d: 0.0,
    })
}

/// Shortest time to cover `length` from speed `v0`: full acceleration to the
/// speed cap, then cruise.
pub fn min_transit_time(v0: f64, length: f64, limits: &VehicleLimits) -> f64 {
    let v0 = v0.clamp(limits.v_min, limits.v_max);
    let t_cap = (limits.v_max - v0) / limits.u_max;
    let d_cap = v0 * t_cap + 0.5 * limits.u_max * t_cap * t_cap;
    if d_cap >= length {
        // Cap not reached: invert length = v0 t + u_max t²/2.
        (-v0 + (v0 * v0 + 2.0 * limits.u_max * length).sqrt()) / limits.u_max
    } else {
        t_cap + (length - d_cap) / limits.v_max
    }
}

/// Check a plan against the actuation and speed envelope.
///
/// Acceleration is affine in time, so its extrema sit at the window ends.
/// Speed is quadratic; its interior stationary point is checked alongside
/// the ends. On violation, reports the earliest offending time (absolute).
pub fn check_feasible(traj: &Trajectory, limits: &VehicleLimits) -> Result<(), CoreError> {
    let (a, b, c, _) = traj.coefficients();
    let horizon = traj.tf() - traj.t0();

    let u_at = |tau: f64| a * tau + b;
    let v_at = |tau: f64| (a * tau / 2.0 + b) * tau + c;

    let mut candidates = [0.0, horizon, f64::NAN];
    let mut n = 2;
    if a != 0.0 {
        let stationary = -b / a;
        if stationary > 0.0 && stationary < horizon {
            candidates[n] = stationary;
            n += 1;
        }
    }
    candidates[..n].sort_by(|x, y| x.partial_cmp(y).unwrap());

    for &tau in &candidates[..n] {
        let u = u_at(tau);
        let v = v_at(tau);
        let bad = u < limits.u_min - FEAS_TOL
            || u > limits.u_max + FEAS_TOL
            || v < limits.v_min - FEAS_TOL
            || v > limits.v_max + FEAS_TOL;
        if bad {
            return Err(CoreError::ConstraintViolation {
                at: traj.t0() + tau,
            });
        }
    }
    Ok(())
}

/// Outcome of [`solve_with_backoff`]: the feasible plan, the terminal time
/// actually used, and how many times the horizon had to grow.
#[derive(Debug, Clone, Copy)]
pub struct BackoffSolution {
    pub trajectory: Trajectory,
    pub tf: f64,
    pub iterations: u32,
}

/// Backoff schedule: each retry stretches the horizon by 10%.
const BACKOFF_FACTOR: f64 = 1.1;
const BACKOFF_MAX_ITER: u32 = 20;

/// Solve, and if the plan would exceed the actuation or speed envelope,
/// geometrically delay the terminal time until it fits. Gives up after
/// [`BACKOFF_MAX_ITER`] stretches; callers treat that as a scheduling
/// failure and drop to their fallback behavior.
pub fn solve_with_backoff(
    t0: f64,
    tf: f64,
    v0: f64,
    length: f64,
    limits: &VehicleLimits,
) -> Result<BackoffSolution, CoreError> {
    let horizon = tf - t0;
    if !horizon.is_finite() || horizon <= 0.0 {
        return Err(CoreError::InfeasibleHorizon { tf, min_tf: t0 });
    }
    let mut last_err = None;
    for k in 0..=BACKOFF_MAX_ITER {
        let tf_k = t0 + horizon * BACKOFF_FACTOR.powi(k as i32);
        let traj = solve(t0, tf_k, v0, length)?;
        match check_feasible(&traj, limits) {
            Ok(()) => {
                return Ok(BackoffSolution {
                    trajectory: traj,
                    tf: tf_k,
                    iterations: k,
                })
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or(CoreError::InfeasibleHorizon {
        tf,
        min_tf: t0 + min_transit_time(v0, length, limits),
    }))
}
