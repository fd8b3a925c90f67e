//! Random trees and measurements for tests, benchmarks and demos.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::linalg::{Matrix, Vector};
use crate::model::{check_design_rank, NoiseVar, VertexMeasurements};
use crate::spine::Tree;

/// Complete tree with breadth-first ids (children of `i` are
/// `fanout·i + 1 ..= fanout·i + fanout`).
pub fn complete_tree(fanout: usize, depth: usize) -> Tree {
    assert!(fanout >= 1);
    let mut size = 1usize;
    let mut width = 1usize;
    for _ in 0..depth {
        width *= fanout;
        size += width;
    }
    let pairs: Vec<_> = (1..size).map(|c| (c, (c - 1) / fanout)).collect();
    Tree::build(&pairs, 0).expect("complete layout is valid")
}

/// Random tree with uniform leaf depth, per-vertex fan-out drawn from
/// `1..=max_fanout`, and shuffled vertex ids.
pub fn random_tree<R: Rng + ?Sized>(rng: &mut R, depth: usize, max_fanout: usize) -> Tree {
    assert!(max_fanout >= 1);
    // breadth-first parent list, then relabel
    let mut parent: Vec<Option<usize>> = vec![None];
    let mut frontier = vec![0usize];
    for _ in 0..depth {
        let mut next = Vec::new();
        for &g in &frontier {
            for _ in 0..rng.random_range(1..=max_fanout) {
                next.push(parent.len());
                parent.push(Some(g));
            }
        }
        frontier = next;
    }
    let mut perm: Vec<usize> = (0..parent.len()).collect();
    perm.shuffle(rng);
    let pairs: Vec<_> = parent
        .iter()
        .enumerate()
        .filter_map(|(c, p)| p.map(|p| (perm[c], perm[p])))
        .collect();
    Tree::build(&pairs, perm[0]).expect("generated tree is valid")
}

pub fn random_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// `B·Bᵀ/m + ridge·I` with Gaussian `B`.
pub fn random_spd<R: Rng + ?Sized>(rng: &mut R, m: usize, ridge: f64) -> Matrix {
    let b = random_matrix(rng, m, m);
    let mut s = &b * b.transpose() / m as f64;
    for i in 0..m {
        s[(i, i)] += ridge;
    }
    (&s + s.transpose()) * 0.5
}

/// Random full-column-rank design with `n..=n+extra_rows` rows, random
/// diagonal or dense SPD noise, and Gaussian observations.
pub fn random_measurements<R: Rng + ?Sized>(
    rng: &mut R,
    tree: &Tree,
    n: usize,
    extra_rows: usize,
) -> Vec<VertexMeasurements> {
    (0..tree.len())
        .map(|_| loop {
            let m = n + rng.random_range(0..=extra_rows);
            let design = random_matrix(rng, m, n);
            let noise = if rng.random_bool(0.5) {
                NoiseVar::Full(random_spd(rng, m, 0.5))
            } else {
                NoiseVar::Diagonal(Vector::from_fn(m, |_, _| rng.random_range(0.5..2.0)))
            };
            let obs = Vector::from_fn(m, |_, _| 5.0 * rng.sample::<f64, _>(StandardNormal));
            let meas = VertexMeasurements::new(design, obs, noise).expect("well-formed draw");
            if check_design_rank(&meas).is_ok() {
                break meas;
            }
        })
        .collect()
}

/// Seeded [`random_tree`] plus [`random_measurements`].
pub fn random_problem(
    seed: u64,
    depth: usize,
    max_fanout: usize,
    n: usize,
    extra_rows: usize,
) -> (Tree, Vec<VertexMeasurements>) {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let tree = random_tree(&mut rng, depth, max_fanout);
    let meas = random_measurements(&mut rng, &tree, n, extra_rows);
    (tree, meas)
}

/// Identity designs with diagonal noise of the given variance; observations
/// are drawn around a consistent truth so the data look like counts.
pub fn count_measurements<R: Rng + ?Sized>(
    rng: &mut R,
    tree: &Tree,
    n: usize,
    variance: f64,
) -> Vec<VertexMeasurements> {
    let leaf_truth: Vec<Vector> = tree
        .leaves()
        .iter()
        .map(|_| Vector::from_fn(n, |_, _| rng.random_range(0.0..50.0_f64).floor()))
        .collect();
    let truth = crate::sim::truth_from_leaves(tree, &leaf_truth).expect("one block per leaf");
    let sd = variance.sqrt();
    truth
        .iter()
        .map(|b| {
            let y = b + Vector::from_fn(n, |_, _| sd * rng.sample::<f64, _>(StandardNormal));
            VertexMeasurements::identity(y, variance).expect("positive variance")
        })
        .collect()
}
