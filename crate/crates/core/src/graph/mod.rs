//! Embedding- and attention-level graph views, patterns and path counting.

mod dot;
mod pattern;
mod view;

pub use dot::to_dot;
pub use pattern::{Pattern, PatternCollection, Sign};
pub use view::{GraphView, Granularity};
