//! Core engine: artifact contracts, the registry, rule catalogs, dataset
//! inspection, planning, DAG execution, queries and evaluation.

pub mod artifact;
pub mod canon;
pub mod catalog;
pub mod dag;
pub mod digest;
pub mod eval;
pub mod executor;
pub mod goal;
pub mod inspect;
pub mod planner;
pub mod predicate;
pub mod provenance;
pub mod query;
pub mod registry;
pub mod session;
pub mod store;
pub mod value;
pub mod workspace;

pub use artifact::{Artifact, ArtifactId, ContractViolation, ProvenanceKind, ProvenanceRecord, Scope, Violation};
pub use digest::Digest;
pub use predicate::{AttributeSource, CmpOp, Predicate, Truth};
pub use registry::{Registry, RegistryError, RegistryState, Selector, Snapshot};
pub use value::{AttributeValue, Attributes, ValueKind};
