//! A reliable incremental, parallel build engine over a simulated shared
//! state.
//!
//! Tasks are small deterministic scripts that read and write named
//! resources. The engine records every access, decides whether a build was
//! valid (every conflicting pair of tasks ordered by the dependency graph),
//! infers missing dependencies, schedules builds, runs them sequentially, in
//! parallel or under transactional control, and computes the minimal set of
//! tasks an incremental build must re-run.

pub mod description;
pub mod executor;
pub mod granularity;
pub mod graph;
pub mod inference;
pub mod oracle;
pub mod resource;
pub mod script;
pub mod txn;

pub use graph::{Configuration, DependencyGraph, Edge, EdgeTag, ValidityReport, Verdict};
pub use resource::{AccessEvent, AccessKind, ResourceId, ResourceSpace, ResourceValue, SharedState, Target};
pub use script::{TaskId, TaskScript, TaskTrace};
