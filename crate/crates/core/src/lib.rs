//! Task-adaptive structured meta-learning.
//!
//! Training tasks are scored against a target task with a kernel on dataset
//! signatures; the most relevant ones, plus the target's own support set,
//! form a weighted meta-objective that adapts a residual representation
//! shared with a closed-form least-squares head.

pub mod checkpoint;
pub mod dataset_kernel;
pub mod driver;
pub mod error;
pub mod harness;
pub mod ls_meta_learn;
pub mod meta_objectives;
pub mod numerics;
pub mod seeding;
pub mod taskgen;

pub use error::{Result, TasmlError};
