//! Microscopic simulation of a signalized arterial corridor with a highway
//! interchange. Vehicles follow either a gap/speed car-following law with
//! fixed-time signals and yield rules, or a cooperative scheme in which each
//! vehicle entering a control zone is assigned a conflict-free terminal time
//! and drives a minimum-effort cubic trajectory to it.

pub mod behavior;
pub mod config;
pub mod coordination;
pub mod dynamics;
pub mod engine;
pub mod error;
pub mod ids;
pub mod metrics;
pub mod network;
pub mod optctrl;
pub mod sink;

pub use error::CoreError;
