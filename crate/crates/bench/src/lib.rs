//! Shared workloads for the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use treegls::synth::{complete_tree, count_measurements};
use treegls::{Tree, VertexId, VertexMeasurements};

/// Complete tree with identity designs and unit-variance count noise.
pub fn count_workload(fanout: usize, depth: usize, n: usize, seed: u64) -> (Tree, Vec<VertexMeasurements>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tree = complete_tree(fanout, depth);
    let meas = count_measurements(&mut rng, &tree, n, 1.0);
    (tree, meas)
}

/// The first `k` leaves in id order.
pub fn first_leaves(tree: &Tree, k: usize) -> Vec<VertexId> {
    let mut leaves = tree.leaves().to_vec();
    leaves.sort_unstable();
    leaves.truncate(k);
    leaves
}
