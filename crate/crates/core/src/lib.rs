//! Knowledge-enhanced contrastive learning for cross-modal retrieval, at
//! desk scale: multi-grained knowledge bases with periodic refreshing,
//! reliability-weighted knowledge injection, optimal-transport-realigned
//! contrastive objectives with analytic gradients, and the drift and
//! out-of-batch-influence diagnostics that motivate the design.

pub mod corpus;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod inject;
pub mod kb;
pub mod math;
pub mod objective;
pub mod ot;
pub mod reliability;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use math::{ProbDist, SimMatrix, UnitVector};
pub use objective::{AskConfig, LossBreakdown, LossVariant};
pub use trainer::TrainConfig;
