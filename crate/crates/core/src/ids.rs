//! Index-style identifiers. Each wraps a position in the owning collection,
//! assigned in configuration order so runs are reproducible.

use serde::{Deserialize, Serialize};

macro_rules! id_type {
    ($(#[$doc:meta])* $name:ident, $inner:ty) => {
        $(#[$doc])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl $name {
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(
    /// A vehicle, unique within one run, ascending in spawn order.
    VehicleId,
    u32
);
id_type!(
    /// A directed link (one roadway direction between two nodes).
    LinkId,
    u16
);
id_type!(
    /// A node (intersection, merge point, or network edge).
    NodeId,
    u16
);
id_type!(
    /// An origin-to-destination route through consecutive links.
    RouteId,
    u16
);
id_type!(
    /// A conflict zone built around a controlled node.
    ZoneId,
    u16
);
id_type!(
    /// A flow/density measurement segment.
    DetectorId,
    u16
);
