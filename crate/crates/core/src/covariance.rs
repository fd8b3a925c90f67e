//! Covariance between the final estimates at two arbitrary vertices, read
//! from a [`StateStore`] without materializing the full covariance matrix.

use std::collections::HashMap;

use crate::error::Result;
use crate::linalg::{symmetrize, Matrix};
use crate::spine::VertexId;
use crate::twopass::StateStore;

/// `A(path[0]) · A(path[1]) · … · A(path[last])`, deepest vertex leftmost.
/// An empty path gives the identity.
pub fn path_a_product(store: &StateStore, path: &[VertexId]) -> Result<Matrix> {
    for &k in path {
        store.tree().check(k)?;
    }
    let n = store.n();
    Ok(path
        .iter()
        .fold(Matrix::identity(n, n), |acc, &k| acc * store.a(k)))
}

/// Covariance of two children `cu`, `cv` of the same parent `w`.
pub(crate) fn sibling_block(
    a_u: &Matrix,
    var_parent: &Matrix,
    a_v: &Matrix,
    var_up_v: &Matrix,
) -> Matrix {
    a_u * var_parent * a_v.transpose() - a_u * var_up_v
}

/// `Cov(β̃(u), β̃(v))`.
pub fn compute_covariance(store: &StateStore, u: VertexId, v: VertexId) -> Result<Matrix> {
    CovarianceEngine::new(store).covariance(u, v)
}

/// Covariance evaluator with an optional memo of path products, useful when
/// many pairs share ancestors.
#[derive(Debug)]
pub struct CovarianceEngine<'a> {
    store: &'a StateStore,
    memo: Option<HashMap<(VertexId, VertexId), Matrix>>,
}

impl<'a> CovarianceEngine<'a> {
    pub fn new(store: &'a StateStore) -> Self {
        Self { store, memo: None }
    }

    pub fn with_memo(store: &'a StateStore) -> Self {
        Self {
            store,
            memo: Some(HashMap::new()),
        }
    }

    pub fn store(&self) -> &'a StateStore {
        self.store
    }

    /// Product of `A` from `u` up to and including `top`, an ancestor-or-self
    /// of `u`.
    fn product_to(&mut self, u: VertexId, top: VertexId) -> Matrix {
        let store = self.store;
        if u == top {
            return store.a(u).clone();
        }
        if let Some(m) = self.memo.as_ref().and_then(|m| m.get(&(u, top))) {
            return m.clone();
        }
        let parent = store.tree().parent(u).expect("top is an ancestor of u");
        let p = store.a(u) * self.product_to(parent, top);
        if let Some(memo) = self.memo.as_mut() {
            memo.insert((u, top), p.clone());
        }
        p
    }

    /// Product over the path from `u` up to, but excluding, its ancestor `w`.
    fn product_below(&mut self, u: VertexId, w: VertexId) -> Matrix {
        let tree = self.store.tree();
        if u == w {
            let n = self.store.n();
            return Matrix::identity(n, n);
        }
        let top = tree.ancestor_at_level(u, tree.level_of(w) + 1);
        self.product_to(u, top)
    }

    pub fn covariance(&mut self, u: VertexId, v: VertexId) -> Result<Matrix> {
        let store = self.store;
        let tree = store.tree();
        tree.check(u)?;
        tree.check(v)?;
        if u == v {
            return Ok(symmetrize(store.var_final(u)));
        }
        let w = tree.closest_common_ancestor(u, v)?;
        if w == v {
            return Ok(self.product_below(u, v) * store.var_final(v));
        }
        if w == u {
            return Ok(self.covariance(v, u)?.transpose());
        }
        let lw = tree.level_of(w) + 1;
        let cu = tree.ancestor_at_level(u, lw);
        let cv = tree.ancestor_at_level(v, lw);
        let block = sibling_block(store.a(cu), store.var_final(w), store.a(cv), store.var_up(cv));
        let pu = self.product_below(u, cu);
        let pv = self.product_below(v, cv);
        Ok(pu * block * pv.transpose())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Vector;
    use crate::model::{NoiseVar, VertexMeasurements};
    use crate::spine::Tree;
    use crate::twopass::run_two_pass;

    fn scalar(y: f64) -> VertexMeasurements {
        VertexMeasurements::new(
            Matrix::from_element(1, 1, 1.0),
            Vector::from_element(1, y),
            NoiseVar::Diagonal(Vector::from_element(1, 1.0)),
        )
        .unwrap()
    }

    fn example1() -> StateStore {
        let t = Tree::build(&[(1, 0), (2, 0)], 0).unwrap();
        run_two_pass(&t, &[scalar(3.0), scalar(1.0), scalar(1.0)]).unwrap()
    }

    fn deep_store() -> StateStore {
        let pairs = [
            (1, 0),
            (2, 0),
            (3, 1),
            (4, 1),
            (5, 2),
            (6, 2),
            (7, 3),
            (8, 3),
            (9, 4),
            (10, 5),
            (11, 5),
            (12, 6),
        ];
        let t = Tree::build(&pairs, 0).unwrap();
        let meas: Vec<_> = (0..t.len())
            .map(|g| {
                let s = g as f64;
                VertexMeasurements::new(
                    Matrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, -1.0]),
                    Vector::from_row_slice(&[s, 1.0 - s, 0.5 * s]),
                    NoiseVar::Diagonal(Vector::from_row_slice(&[1.0 + 0.1 * s, 2.0, 0.7])),
                )
                .unwrap()
            })
            .collect();
        run_two_pass(&t, &meas).unwrap()
    }

    #[test]
    fn path_products() {
        let s = example1();
        assert_eq!(path_a_product(&s, &[]).unwrap(), Matrix::identity(1, 1));
        assert!((path_a_product(&s, &[1]).unwrap()[(0, 0)] - 0.5).abs() < 1e-15);
        assert!(path_a_product(&s, &[7]).is_err());

        let d = deep_store();
        let p = path_a_product(&d, &[7, 3]).unwrap();
        assert_eq!(p, d.a(7) * d.a(3));
    }

    #[test]
    fn example1_covariances() {
        let s = example1();
        let c12 = compute_covariance(&s, 1, 2).unwrap()[(0, 0)];
        assert!((c12 + 1.0 / 3.0).abs() < 1e-12);
        let c10 = compute_covariance(&s, 1, 0).unwrap()[(0, 0)];
        assert!((c10 - 1.0 / 3.0).abs() < 1e-12);
        let c01 = compute_covariance(&s, 0, 1).unwrap()[(0, 0)];
        assert!((c01 - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(compute_covariance(&s, 1, 1).unwrap(), *s.var_final(1));
        assert!(compute_covariance(&s, 0, 9).is_err());
    }

    #[test]
    fn symmetry_and_parent_additivity() {
        let d = deep_store();
        let n_v = d.tree().len();
        for u in 0..n_v {
            for v in 0..n_v {
                let a = compute_covariance(&d, u, v).unwrap();
                let b = compute_covariance(&d, v, u).unwrap();
                assert!((&a - b.transpose()).abs().max() < 1e-10, "({u},{v})");
            }
        }
        for g in 0..n_v {
            let kids = d.tree().children(g);
            if kids.is_empty() {
                continue;
            }
            let mut sum = Matrix::zeros(2, 2);
            for &c in kids {
                for &c2 in kids {
                    sum += compute_covariance(&d, c, c2).unwrap();
                }
            }
            assert!((sum - d.var_final(g)).abs().max() < 1e-9, "parent {g}");
        }
    }

    #[test]
    fn ancestor_covariance_is_additive_over_children() {
        // Cov(u, parent) = Σ_c Cov(u, c) for every non-descendant u
        let d = deep_store();
        for u in 0..d.tree().len() {
            for g in 0..d.tree().len() {
                let kids = d.tree().children(g);
                if kids.is_empty() || d.tree().is_ancestor_or_self(g, u) {
                    continue;
                }
                let direct = compute_covariance(&d, u, g).unwrap();
                let mut sum = Matrix::zeros(2, 2);
                for &c in kids {
                    sum += compute_covariance(&d, u, c).unwrap();
                }
                assert!((direct - sum).abs().max() < 1e-9, "u={u}, g={g}");
            }
        }
    }

    #[test]
    fn memo_does_not_change_results() {
        let d = deep_store();
        let mut memo = CovarianceEngine::with_memo(&d);
        for u in 0..d.tree().len() {
            for v in 0..d.tree().len() {
                let a = memo.covariance(u, v).unwrap();
                let b = compute_covariance(&d, u, v).unwrap();
                assert!((a - b).abs().max() < 1e-14);
            }
        }
    }
}
