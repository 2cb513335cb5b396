//! Self-assignment flows for unsupervised labeling.

pub mod affinity;
pub mod error;
pub mod eval;
pub mod flow;
pub mod linalg;
pub mod manifold;
pub mod patchlab;
pub mod pipeline;
pub mod prototypes;
pub mod seeding;
pub mod selfassign;

pub use error::{Error, Result};
