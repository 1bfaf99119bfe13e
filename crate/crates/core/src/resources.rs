use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};

/// The three resource kinds a node can offer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResourceKind {
    Compute,
    Storage,
    Bandwidth,
}

impl ResourceKind {
    pub const ALL: [ResourceKind; 3] = [
        ResourceKind::Compute,
        ResourceKind::Storage,
        ResourceKind::Bandwidth,
    ];
}

impl fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResourceKind::Compute => "compute",
            ResourceKind::Storage => "storage",
            ResourceKind::Bandwidth => "bandwidth",
        })
    }
}

/// Integer amounts of each resource kind.
///
/// Depending on context this is a capacity (compute units/ms, storage units,
/// bandwidth units/ms) or a consumption (compute units, storage units,
/// bandwidth units).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct Resources {
    pub compute: u64,
    pub storage: u64,
    pub bandwidth: u64,
}

impl Resources {
    pub const ZERO: Resources = Resources {
        compute: 0,
        storage: 0,
        bandwidth: 0,
    };

    pub fn new(compute: u64, storage: u64, bandwidth: u64) -> Self {
        Resources {
            compute,
            storage,
            bandwidth,
        }
    }

    pub fn get(&self, kind: ResourceKind) -> u64 {
        match kind {
            ResourceKind::Compute => self.compute,
            ResourceKind::Storage => self.storage,
            ResourceKind::Bandwidth => self.bandwidth,
        }
    }

    pub fn get_mut(&mut self, kind: ResourceKind) -> &mut u64 {
        match kind {
            ResourceKind::Compute => &mut self.compute,
            ResourceKind::Storage => &mut self.storage,
            ResourceKind::Bandwidth => &mut self.bandwidth,
        }
    }

    /// Every component of `self` is at least the matching component of `other`.
    pub fn covers(&self, other: &Resources) -> bool {
        ResourceKind::ALL
            .iter()
            .all(|&k| self.get(k) >= other.get(k))
    }

    pub fn saturating_sub(&self, other: &Resources) -> Resources {
        Resources {
            compute: self.compute.saturating_sub(other.compute),
            storage: self.storage.saturating_sub(other.storage),
            bandwidth: self.bandwidth.saturating_sub(other.bandwidth),
        }
    }

    pub fn scale(&self, factor: u64) -> Resources {
        Resources {
            compute: self.compute * factor,
            storage: self.storage * factor,
            bandwidth: self.bandwidth * factor,
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == Resources::ZERO
    }
}

impl Add for Resources {
    type Output = Resources;

    fn add(self, rhs: Resources) -> Resources {
        Resources {
            compute: self.compute + rhs.compute,
            storage: self.storage + rhs.storage,
            bandwidth: self.bandwidth + rhs.bandwidth,
        }
    }
}

impl AddAssign for Resources {
    fn add_assign(&mut self, rhs: Resources) {
        *self = *self + rhs;
    }
}

impl Sub for Resources {
    type Output = Resources;

    fn sub(self, rhs: Resources) -> Resources {
        self.saturating_sub(&rhs)
    }
}
