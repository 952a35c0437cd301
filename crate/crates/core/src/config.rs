//! Configuration schema: the human-readable TOML description of a corridor
//! (links, nodes, connections, signal plans, routes, demand) plus simulation
//! defaults. Parsing and schema-level validation happen here; structural
//! validation (connectivity, lane continuity, conflict derivation) happens
//! when the network graph is built.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkClass {
    Arterial,
    Highway,
    Ramp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    /// Network boundary: vehicles appear and disappear here.
    Terminus,
    Signalized,
    /// Minor-street stop control with gap acceptance.
    StopControlled,
    /// Lanes joining (ramp noses, merge areas).
    Merge,
    /// Conflict-free branching: diverges only.
    Junction,
}

/// Compass heading of travel along a link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heading {
    N,
    S,
    E,
    W,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub name: String,
    pub from: String,
    pub to: String,
    /// m
    pub length: f64,
    pub lanes: u8,
    pub class: LinkClass,
    /// m/s
    pub free_speed: f64,
    /// Travel direction at the downstream end.
    pub heading: Heading,
    /// Travel direction at the upstream end, for ramps that curl. Defaults
    /// to `heading`.
    pub heading_in: Option<Heading>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub name: String,
    pub kind: NodeKind,
    /// Conflict-box extent past the stop line, m. Defaults per kind.
    pub zone_length: Option<f64>,
}

/// Lane continuity between two links at a node. Without an explicit entry,
/// lanes map identically up to the smaller lane count.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectionSpec {
    pub from: String,
    pub to: String,
    /// Pairs of (from-lane, to-lane).
    pub lanes: Vec<(u8, u8)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalPlanSpec {
    pub node: String,
    /// s
    pub cycle: f64,
    #[serde(default)]
    pub offset: f64,
    pub phases: Vec<PhaseSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    /// Green duration in seconds, or "auto" to split the cycle's green time
    /// across phases in proportion to their busiest lane's demand.
    pub green: GreenSpec,
    pub yellow: f64,
    pub all_red: f64,
    /// Movements served, each "from_link>to_link".
    pub movements: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GreenSpec {
    Auto(String),
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteGroup {
    Local,
    Highway,
    LocalToHighway,
    HighwayToLocal,
}

impl RouteGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            RouteGroup::Local => "local",
            RouteGroup::Highway => "highway",
            RouteGroup::LocalToHighway => "local_to_highway",
            RouteGroup::HighwayToLocal => "highway_to_local",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteSpec {
    pub name: String,
    pub group: RouteGroup,
    pub links: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandSpec {
    pub route: String,
    /// veh/h at multiplier 1.0
    pub volume: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSpec {
    pub name: String,
    pub link: String,
    /// m from link entry
    pub position: f64,
    /// Lanes counted (0..lanes), excluding turn bays above.
    pub lanes: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Defaults {
    /// s
    pub dt: f64,
    /// s
    pub duration: f64,
    /// s excluded from aggregate metrics
    pub warmup: f64,
    /// m
    pub control_zone_length: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Headways {
    /// s, human-driver scenarios
    pub human: f64,
    /// s, automated scenarios
    pub av: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitsSpec {
    pub u_min: f64,
    pub u_max: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub standstill: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub defaults: Defaults,
    pub headways: Headways,
    pub limits: LimitsSpec,
    pub links: Vec<LinkSpec>,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub connections: Vec<ConnectionSpec>,
    #[serde(default)]
    pub signal_plans: Vec<SignalPlanSpec>,
    pub routes: Vec<RouteSpec>,
    pub demand: Vec<DemandSpec>,
    #[serde(default)]
    pub detectors: Vec<DetectorSpec>,
}

/// The corridor this tool ships with.
pub const DEFAULT_CONFIG: &str = include_str!("../data/default.toml");

impl Config {
    pub fn from_toml(text: &str) -> Result<Config, CoreError> {
        let cfg: Config =
            toml::from_str(text).map_err(|e| CoreError::validation(format!("config: {e}")))?;
        cfg.validate_schema()?;
        Ok(cfg)
    }

    pub fn default_corridor() -> Config {
        Config::from_toml(DEFAULT_CONFIG).expect("bundled configuration is valid")
    }

    pub fn load(path: &std::path::Path) -> Result<Config, CoreError> {
        let text = std::fs::read_to_string(path)?;
        Config::from_toml(&text)
    }

    /// Field-level checks that need no cross-referencing.
    fn validate_schema(&self) -> Result<(), CoreError> {
        let d = &self.defaults;
        if !(d.dt > 0.0 && d.dt.is_finite()) {
            return Err(CoreError::validation(format!("dt must be positive, got {}", d.dt)));
        }
        if !(d.duration > 0.0) || d.warmup < 0.0 || d.warmup >= d.duration {
            return Err(CoreError::validation(format!(
                "need 0 <= warmup < duration, got warmup {} duration {}",
                d.warmup, d.duration
            )));
        }
        if !(d.control_zone_length > 0.0) {
            return Err(CoreError::validation(
                "control_zone_length must be positive".to_string(),
            ));
        }
        if !(self.headways.human > 0.0 && self.headways.av > 0.0) {
            return Err(CoreError::validation("headways must be positive".to_string()));
        }
        for l in &self.links {
            if !(l.length > 0.0 && l.length.is_finite()) {
                return Err(CoreError::validation(format!(
                    "link {} must have positive length, got {}",
                    l.name, l.length
                )));
            }
            if l.lanes == 0 {
                return Err(CoreError::validation(format!("link {} has zero lanes", l.name)));
            }
            if !(l.free_speed > 0.0) {
                return Err(CoreError::validation(format!(
                    "link {} needs a positive free speed",
                    l.name
                )));
            }
        }
        for n in &self.nodes {
            if let Some(z) = n.zone_length {
                if !(z >= 0.0 && z.is_finite()) {
                    return Err(CoreError::validation(format!(
                        "node {} zone_length must be non-negative",
                        n.name
                    )));
                }
            }
        }
        for d in &self.demand {
            if !(d.volume >= 0.0 && d.volume.is_finite()) {
                return Err(CoreError::validation(format!(
                    "demand for {} must be non-negative",
                    d.route
                )));
            }
        }
        for p in &self.signal_plans {
            if !(p.cycle > 0.0) {
                return Err(CoreError::validation(format!(
                    "signal plan at {} needs a positive cycle",
                    p.node
                )));
            }
            if p.phases.is_empty() {
                return Err(CoreError::validation(format!(
                    "signal plan at {} has no phases",
                    p.node
                )));
            }
            for ph in &p.phases {
                if ph.yellow < 0.0 || ph.all_red < 0.0 {
                    return Err(CoreError::validation(format!(
                        "signal plan at {}: negative interval",
                        p.node
                    )));
                }
                if let GreenSpec::Auto(s) = &ph.green {
                    if s != "auto" {
                        return Err(CoreError::validation(format!(
                            "green must be a number or \"auto\", got {s:?}"
                        )));
                    }
                }
                if let GreenSpec::Fixed(g) = ph.green {
                    if !(g > 0.0) {
                        return Err(CoreError::validation(format!(
                            "signal plan at {}: green must be positive",
                            p.node
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_corridor_parses() {
        let cfg = Config::default_corridor();
        assert_eq!(cfg.signal_plans.len(), 2);
        assert!(cfg.links.len() > 30);
        assert_eq!(cfg.routes.len(), 22);
        let total: f64 = cfg.demand.iter().map(|d| d.volume).sum();
        assert!((total - 12_000.0).abs() < 1e-9, "base demand {total}");
    }

    #[test]
    fn rejects_zero_length_link() {
        let mut cfg = Config::default_corridor();
        cfg.links[0].length = 0.0;
        let text = toml::to_string(&cfg).unwrap();
        assert!(Config::from_toml(&text).is_err());
    }

    #[test]
    fn rejects_bad_warmup() {
        let mut cfg = Config::default_corridor();
        cfg.defaults.warmup = cfg.defaults.duration;
        let text = toml::to_string(&cfg).unwrap();
        assert!(Config::from_toml(&text).is_err());
    }
}
