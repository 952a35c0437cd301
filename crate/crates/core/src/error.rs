use thiserror::Error;

/// Unified error type for the simulation library.
#[derive(Debug, Error)]
pub enum CoreError {
    /// An input that must be finite was NaN or infinite.
    #[error("non-finite value for {0}")]
    NonFinite(&'static str),

    /// The requested terminal time precedes the minimum feasible arrival.
    #[error("terminal time {tf:.3} s earlier than minimal feasible arrival {min_tf:.3} s")]
    InfeasibleHorizon { tf: f64, min_tf: f64 },

    /// A solved trajectory exceeds a control or speed bound; `at` is the
    /// earliest violation time.
    #[error("trajectory violates limits at t = {at:.3} s")]
    ConstraintViolation { at: f64 },

    /// A trajectory was evaluated outside its [t0, tf] window.
    #[error("t = {t:.3} s outside trajectory window [{t0:.3}, {tf:.3}]")]
    OutOfWindow { t: f64, t0: f64, tf: f64 },

    /// Configuration failed validation; the message names the offending key.
    #[error("invalid configuration: {0}")]
    Validation(String),

    /// An internal ordering or bookkeeping rule was broken. Indicates an
    /// engine bug, never a recoverable traffic condition.
    #[error("consistency violation: {0}")]
    Consistency(String),

    /// A simulation run detected an invariant breach and stopped.
    /// `diagnostic` holds a dump of the offending state.
    #[error("simulation aborted at t = {t:.1} s: {message}")]
    Aborted {
        t: f64,
        message: String,
        diagnostic: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CoreError::Validation(msg.into())
    }

    pub fn consistency(msg: impl Into<String>) -> Self {
        CoreError::Consistency(msg.into())
    }
}
