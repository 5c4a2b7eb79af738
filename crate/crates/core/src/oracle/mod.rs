//! Brute-force ground truth for the chain-rule identity and the greedy search.

mod edges;
pub mod reference;
mod search;

pub use edges::{
    edge_partials, enumerate_path_influence, EdgePartials, PartialMethod, PathOracle, MAX_ENUMERATED_PATHS,
    MAX_PARTIAL_ENTRIES,
};
pub use search::{
    exhaustive_best_attention, exhaustive_best_embedding, exhaustive_best_pattern, Exhaustive, MAX_CANDIDATES,
};

use rand::Rng;

use crate::error::Result;
use crate::graph::GraphView;
use crate::transformer::NodeId;

/// A random valid pattern for `x_word`: a uniform random walk to qoi with
/// each interior node kept independently with probability `keep`.
pub fn random_pattern<R: Rng + ?Sized>(view: &GraphView, word: usize, keep: f64, rng: &mut R) -> Result<Vec<NodeId>> {
    let mut at = NodeId::Input { pos: word };
    let mut out = vec![at];
    while at != NodeId::Qoi {
        let next: Vec<NodeId> = view
            .successors(&at)
            .into_iter()
            .filter(|n| view.reachable(n, &NodeId::Qoi).unwrap_or(false))
            .collect();
        if next.is_empty() {
            return Err(crate::Error::Pattern(format!("{at} does not reach qoi")));
        }
        at = next[rng.random_range(0..next.len())];
        if at == NodeId::Qoi || rng.random_bool(keep) {
            out.push(at);
        }
    }
    Ok(out)
}
