pub mod baselines;
pub mod corpus;
pub mod error;
pub mod evalmetrics;
pub mod gpr;
pub mod graph;
pub mod influence;
pub mod numerics;
pub mod oracle;
pub mod pipeline;
pub mod transformer;

pub use error::{Error, Result};
