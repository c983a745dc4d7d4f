//! Deterministic orchestration engine and simulation core for multi-segment
//! virtual continuums over multi-stakeholder edge-cloud infrastructure.
//!
//! The crate is organized around the pipeline a running continuum goes
//! through: the [`domain`] topology feeds the [`broker`] ledger and the
//! [`placement`] optimizer; [`lifecycle`] drives continuums and deployments;
//! [`twin`] mirrors utilization and KPIs; [`loops`] evaluates closed loops
//! whose proposals are arbitrated by the [`coordinator`]; [`edgeapp`] exposes
//! the enablement/authorization layer; [`sim`] wires it all into a
//! deterministic tick pipeline recorded by [`trace`].

pub mod broker;
pub mod coordinator;
pub mod domain;
pub mod edgeapp;
pub mod ids;
pub mod lifecycle;
pub mod loops;
pub mod placement;
pub mod scenario;
pub mod sim;
pub mod trace;
pub mod twin;
