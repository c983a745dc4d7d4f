//! Domain model: resource arithmetic, the multi-stakeholder topology, and the
//! latency/energy formulas shared by every other module.

mod resource;
mod topology;

pub use resource::ResourceVector;
pub use topology::{
    Agreement, DomainError, LinkDescriptor, SegmentDescriptor, SegmentKind, StakeholderDescriptor,
    StakeholderRole, Topology, ValidationReport, Violation, ViolationKind, ZoneAttachment,
    ZoneDescriptor,
};
