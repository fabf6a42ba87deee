//! Gradient-free merging of low-rank adapters that share one base model.
//!
//! The crate provides a small deterministic inference engine over
//! computation graphs with adapter sites ([`graph`]), the merge methods
//! ([`merging`]), synthetic experiments ([`harness`]) and the on-disk formats
//! used by the command-line tool ([`io`]).

pub mod adapters;
pub mod error;
pub mod graph;
pub mod harness;
pub mod io;
pub mod merging;
pub mod numerics;

pub use adapters::{AdapterSet, LoraAdapter, WeightScope};
pub use error::{Error, ErrorKind, Result};
pub use graph::{ModelGraph, ModelInstance, SiteId};
pub use merging::{merge, MergeConfig, MergeOutcome, MergeReport, Method, WeightMode};
pub use numerics::Matrix;
