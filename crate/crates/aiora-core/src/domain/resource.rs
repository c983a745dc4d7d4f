//! Integer resource amounts with exact componentwise arithmetic.

use std::ops::Add;

use serde::{Deserialize, Serialize};

/// A bundle of the four resource dimensions tracked across the continuum.
///
/// Amounts are integers (millicores, MB, GB, Mbps) so ledger arithmetic is
/// exact: reserving and releasing the same vector restores state bit for bit.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(deny_unknown_fields)]
pub struct ResourceVector {
    #[serde(rename = "cpu_millicores")]
    pub cpu: u64,
    #[serde(rename = "memory_mb")]
    pub memory: u64,
    #[serde(rename = "storage_gb")]
    pub storage: u64,
    #[serde(rename = "bandwidth_mbps")]
    pub bandwidth: u64,
}

impl ResourceVector {
    pub const ZERO: ResourceVector = ResourceVector {
        cpu: 0,
        memory: 0,
        storage: 0,
        bandwidth: 0,
    };

    pub fn new(cpu: u64, memory: u64, storage: u64, bandwidth: u64) -> Self {
        Self {
            cpu,
            memory,
            storage,
            bandwidth,
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::ZERO
    }

    /// Componentwise `self <= other`. This is a partial order: two vectors can
    /// be incomparable.
    pub fn fits_within(&self, other: &ResourceVector) -> bool {
        self.cpu <= other.cpu
            && self.memory <= other.memory
            && self.storage <= other.storage
            && self.bandwidth <= other.bandwidth
    }

    /// Componentwise subtraction; `None` if any component would go negative.
    pub fn checked_sub(&self, other: &ResourceVector) -> Option<ResourceVector> {
        Some(ResourceVector {
            cpu: self.cpu.checked_sub(other.cpu)?,
            memory: self.memory.checked_sub(other.memory)?,
            storage: self.storage.checked_sub(other.storage)?,
            bandwidth: self.bandwidth.checked_sub(other.bandwidth)?,
        })
    }

    /// Componentwise subtraction clamped at zero.
    pub fn saturating_sub(&self, other: &ResourceVector) -> ResourceVector {
        ResourceVector {
            cpu: self.cpu.saturating_sub(other.cpu),
            memory: self.memory.saturating_sub(other.memory),
            storage: self.storage.saturating_sub(other.storage),
            bandwidth: self.bandwidth.saturating_sub(other.bandwidth),
        }
    }

    /// Componentwise minimum.
    pub fn component_min(&self, other: &ResourceVector) -> ResourceVector {
        ResourceVector {
            cpu: self.cpu.min(other.cpu),
            memory: self.memory.min(other.memory),
            storage: self.storage.min(other.storage),
            bandwidth: self.bandwidth.min(other.bandwidth),
        }
    }

    pub fn scaled(&self, factor: u64) -> ResourceVector {
        ResourceVector {
            cpu: self.cpu * factor,
            memory: self.memory * factor,
            storage: self.storage * factor,
            bandwidth: self.bandwidth * factor,
        }
    }

    /// Plain sum of the four components, used as the "resource unit" count
    /// when pricing a demand against a segment's unit cost.
    pub fn unit_sum(&self) -> f64 {
        self.cpu as f64 + self.memory as f64 + self.storage as f64 + self.bandwidth as f64
    }
}

impl Add for ResourceVector {
    type Output = ResourceVector;

    fn add(self, rhs: ResourceVector) -> ResourceVector {
        ResourceVector {
            cpu: self.cpu + rhs.cpu,
            memory: self.memory + rhs.memory,
            storage: self.storage + rhs.storage,
            bandwidth: self.bandwidth + rhs.bandwidth,
        }
    }
}

impl std::ops::AddAssign for ResourceVector {
    fn add_assign(&mut self, rhs: ResourceVector) {
        *self = *self + rhs;
    }
}

impl std::fmt::Display for ResourceVector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "(cpu={}m, mem={}MB, sto={}GB, bw={}Mbps)",
            self.cpu, self.memory, self.storage, self.bandwidth
        )
    }
}
