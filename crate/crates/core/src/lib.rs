//! Deterministic discrete-event simulator of a community cloud.
//!
//! User machines jointly provide coordination ([`overlay`]), resources
//! ([`resource_repo`], [`replication`]) and services ([`services`]), paid for
//! with a community currency ([`ledger`]). Service versions spread along
//! trust links ([`evolution`]). The [`harness`] wires everything to the
//! [`engine`], generates workloads, injects failures and compares the
//! community against a centralised vendor baseline.

pub mod engine;
pub mod evolution;
pub mod harness;
pub mod ledger;
pub mod overlay;
pub mod replication;
pub mod resource_repo;
pub mod resources;
pub mod services;

pub use engine::{RngStream, Scheduler, SimTime};
pub use overlay::{NodeId, Region};
pub use resources::{ResourceKind, Resources};
