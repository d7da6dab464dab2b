//! Filtered approximate nearest-neighbour search over a hierarchical
//! k-means tree with per-label trees embedded in it.

pub mod bloom;
pub mod dataset;
pub mod error;
pub mod id;
pub mod index;
pub mod invariants;
pub mod kmeans;
pub mod labels;
pub mod maintenance;
pub mod oracle;
pub mod predicate;
pub mod rng;
pub mod search;
pub mod snapshot;
mod tree;

/// Label identifier. Values at or above [`labels::VIRTUAL_LABEL_BASE`] are
/// reserved for virtual labels.
pub type Label = u32;

pub use dataset::{Dataset, LabelAssignment};
pub use error::{Error, Result};
pub use id::{NodeId, TreeConfig, VectorId};
pub use index::{Index, IndexConfig, Membership, NodeRef};
pub use maintenance::RebuildMode;
pub use oracle::GroundTruth;
pub use predicate::{Predicate, PredicateCache, TempIndex};
pub use search::{recall_at_k, Hit, SearchParams, SearchResult, SearchStats};
