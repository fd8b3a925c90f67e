//! Closed-form scalar estimator for complete k-ary trees with one
//! unit-variance count per vertex, used as an independent baseline.
//!
//! Vertices use breadth-first ids: the root is 0 and the children of `i` are
//! `k·i + 1 ..= k·i + k`.

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::model::{NoiseVar, VertexMeasurements};
use crate::spine::Tree;

#[derive(Debug, Clone, PartialEq)]
pub struct UniformScalarTree {
    k: usize,
    depth: usize,
    y: Vec<f64>,
}

/// `k^e` with an overflow guard.
fn ipow(k: usize, e: usize) -> Result<u64> {
    u32::try_from(e)
        .ok()
        .and_then(|e| (k as u64).checked_pow(e))
        .filter(|&v| v < 1 << 63)
        .ok_or_else(|| Error::NonCompleteTree(format!("{k}^{e} overflows")))
}

/// Number of vertices of a complete k-ary tree of the given depth.
pub fn complete_size(k: usize, depth: usize) -> Result<usize> {
    if k < 2 {
        return Err(Error::NonCompleteTree(format!("fan-out {k} < 2")));
    }
    Ok(((ipow(k, depth + 1)? - 1) / (k as u64 - 1)) as usize)
}

impl UniformScalarTree {
    pub fn new(k: usize, depth: usize, y: Vec<f64>) -> Result<Self> {
        let size = complete_size(k, depth)?;
        if y.len() != size {
            return Err(Error::NonCompleteTree(format!(
                "{} observations for a {k}-ary tree of depth {depth} with {size} vertices",
                y.len()
            )));
        }
        Ok(Self { k, depth, y })
    }

    /// Adopt an existing tree, which must be complete k-ary with
    /// breadth-first ids.
    pub fn from_tree(tree: &Tree, y: Vec<f64>) -> Result<Self> {
        let k = tree.children(tree.root()).len();
        if tree.root() != 0 {
            return Err(Error::NonCompleteTree("root id is not 0".into()));
        }
        for g in 0..tree.len() {
            let kids = tree.children(g);
            if kids.is_empty() {
                continue;
            }
            let expected: Vec<usize> = (k * g + 1..=k * g + k).collect();
            if kids != expected.as_slice() {
                return Err(Error::NonCompleteTree(format!(
                    "vertex {g} has children {kids:?}, expected {expected:?}"
                )));
            }
        }
        let t = Self::new(k, tree.depth(), y)?;
        if t.len() != tree.len() {
            return Err(Error::NonCompleteTree("vertex count mismatch".into()));
        }
        Ok(t)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn level_start(&self, l: usize) -> usize {
        (self.k.pow(l as u32) - 1) / (self.k - 1)
    }

    fn children(&self, g: usize) -> std::ops::RangeInclusive<usize> {
        self.k * g + 1..=self.k * g + self.k
    }

    pub fn to_tree(&self) -> Tree {
        let pairs: Vec<_> = (1..self.len()).map(|c| (c, (c - 1) / self.k)).collect();
        Tree::build(&pairs, 0).expect("complete k-ary layout is a valid tree")
    }

    /// Unit-variance scalar measurements, one per vertex.
    pub fn measurements(&self) -> Vec<VertexMeasurements> {
        self.y
            .iter()
            .map(|&y| {
                VertexMeasurements::new(
                    Matrix::from_element(1, 1, 1.0),
                    Vector::from_element(1, y),
                    NoiseVar::Diagonal(Vector::from_element(1, 1.0)),
                )
                .expect("finite scalar observation")
            })
            .collect()
    }

    /// Weights on `(y(g), Σ_children z)` for a vertex at level `l < depth`.
    pub fn z_weights(&self, l: usize) -> Result<(f64, f64)> {
        let j = self.depth - l;
        let kj = ipow(self.k, j)?;
        let kj1 = ipow(self.k, j + 1)?;
        let den = (kj1 - 1) as f64;
        Ok(((kj1 - kj) as f64 / den, (kj - 1) as f64 / den))
    }
}

/// Bottom-up weighted sums.
pub fn hay_z(t: &UniformScalarTree) -> Result<Vec<f64>> {
    let mut z = t.y.clone();
    for l in (0..t.depth).rev() {
        let (wy, wc) = t.z_weights(l)?;
        for g in t.level_start(l)..t.level_start(l + 1) {
            let s: f64 = t.children(g).map(|c| z[c]).sum();
            z[g] = wy * t.y[g] + wc * s;
        }
    }
    Ok(z)
}

/// Top-down consistent estimates.
pub fn hay_estimate(t: &UniformScalarTree) -> Result<Vec<f64>> {
    let z = hay_z(t)?;
    let mut est = vec![0.0; t.len()];
    est[0] = z[0];
    let inv_k = 1.0 / t.k as f64;
    for g in 0..t.level_start(t.depth) {
        let s: f64 = t.children(g).map(|c| z[c]).sum();
        let correction = inv_k * (est[g] - s);
        for c in t.children(g) {
            est[c] = z[c] + correction;
        }
    }
    Ok(est)
}
