//! Linear queries over leaf regions: point estimate, variance and normal
//! confidence interval.

use std::collections::BTreeMap;

use crate::covariance::{sibling_block, CovarianceEngine};
use crate::error::{Error, Result};
use crate::linalg::{symmetrize, Matrix, Vector};
use crate::normal::normal_quantile;
use crate::spine::{Tree, VertexId};
use crate::twopass::{ivw_mean, StateStore};

/// Variances in `[-NEG_VARIANCE_TOL, 0)` are round-off and clamp to zero;
/// anything more negative is an error.
pub const NEG_VARIANCE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct RegionQuery {
    pub q: Vector,
    pub leaves: Vec<VertexId>,
    pub alpha: f64,
    pub clamp_nonnegative: bool,
}

impl RegionQuery {
    pub fn new(q: Vector, leaves: Vec<VertexId>, alpha: f64) -> Self {
        Self {
            q,
            leaves,
            alpha,
            clamp_nonnegative: false,
        }
    }

    pub fn clamped(mut self, clamp: bool) -> Self {
        self.clamp_nonnegative = clamp;
        self
    }

    pub fn validate(&self, tree: &Tree, n: usize) -> Result<()> {
        if self.leaves.is_empty() {
            return Err(Error::EmptyRegion);
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::OutOfDomain(format!("alpha {} not in (0, 1)", self.alpha)));
        }
        if self.q.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "query vector has length {}, expected {n}",
                self.q.len()
            )));
        }
        if self.q.iter().any(|x| !x.is_finite()) {
            return Err(Error::OutOfDomain("query vector is not finite".into()));
        }
        for &g in &self.leaves {
            tree.check(g)?;
            if !tree.is_leaf(g) {
                return Err(Error::NotALeaf(g));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CIResult {
    pub estimate: f64,
    pub variance: f64,
    pub lower: f64,
    pub upper: f64,
    pub alpha: f64,
}

impl CIResult {
    pub fn half_width(&self) -> f64 {
        (self.upper - self.lower) / 2.0
    }
}

/// Replace every complete sibling set by its parent, bottom-up. The result
/// is sorted ascending.
pub fn collapse_region(tree: &Tree, leaves: &[VertexId]) -> Result<Vec<VertexId>> {
    for &g in leaves {
        tree.check(g)?;
        if !tree.is_leaf(g) {
            return Err(Error::NotALeaf(g));
        }
    }
    let mut frontier: Vec<VertexId> = leaves.to_vec();
    frontier.sort_unstable();
    frontier.dedup();
    let mut out = Vec::new();
    for _ in 0..tree.depth() {
        let mut by_parent: BTreeMap<VertexId, Vec<VertexId>> = BTreeMap::new();
        for &g in &frontier {
            let p = tree.parent(g).expect("frontier is below the root");
            by_parent.entry(p).or_default().push(g);
        }
        let mut next = Vec::new();
        for (p, kids) in by_parent {
            if kids.len() == tree.children(p).len() {
                next.push(p);
            } else {
                out.extend(kids);
            }
        }
        frontier = next;
    }
    out.extend(frontier);
    out.sort_unstable();
    Ok(out)
}

/// Build the interval from an estimate and its variance.
pub fn confidence_interval(estimate: f64, variance: f64, alpha: f64, clamp: bool) -> Result<CIResult> {
    let variance = clamp_variance(variance)?;
    let c = variance.sqrt() * normal_quantile(1.0 - alpha / 2.0)?;
    let (mut lower, mut upper) = (estimate - c, estimate + c);
    if clamp {
        lower = lower.max(0.0);
        upper = upper.max(0.0);
    }
    Ok(CIResult {
        estimate,
        variance,
        lower,
        upper,
        alpha,
    })
}

fn clamp_variance(v: f64) -> Result<f64> {
    if v.is_nan() || v < -NEG_VARIANCE_TOL {
        Err(Error::NegativeVariance(v))
    } else {
        Ok(v.max(0.0))
    }
}

/// `(Σ qᵀβ̃(u), Σ_{u,v} qᵀ Cov(u,v) q)` over an explicit vertex set, with
/// each off-diagonal pair evaluated once.
pub fn region_moments(store: &StateStore, vertices: &[VertexId], q: &Vector) -> Result<(f64, f64)> {
    let mut engine = CovarianceEngine::with_memo(store);
    let mut estimate = 0.0;
    let mut variance = 0.0;
    for (i, &u) in vertices.iter().enumerate() {
        store.tree().check(u)?;
        estimate += q.dot(store.beta_final(u));
        variance += q.dot(&(store.var_final(u) * q));
        for &v in &vertices[i + 1..] {
            let c = engine.covariance(u, v)?;
            variance += 2.0 * q.dot(&(c * q));
        }
    }
    Ok((estimate, variance))
}

/// Point estimate and confidence interval for `rq`. The region is collapsed
/// before the pairwise covariance loop.
pub fn estimate_query(store: &StateStore, rq: &RegionQuery) -> Result<CIResult> {
    rq.validate(store.tree(), store.n())?;
    let h = collapse_region(store.tree(), &rq.leaves)?;
    let (est, var) = region_moments(store, &h, &rq.q)?;
    confidence_interval(est, var, rq.alpha, rq.clamp_nonnegative)
}

/// Same as [`estimate_query`] but looping over the raw leaf set.
pub fn estimate_query_uncollapsed(store: &StateStore, rq: &RegionQuery) -> Result<CIResult> {
    rq.validate(store.tree(), store.n())?;
    let mut h = rq.leaves.clone();
    h.sort_unstable();
    h.dedup();
    let (est, var) = region_moments(store, &h, &rq.q)?;
    confidence_interval(est, var, rq.alpha, rq.clamp_nonnegative)
}

/// Per-vertex quantities redefined while merging a region upward.
#[derive(Debug, Clone)]
struct Merged {
    beta: Vector,
    var: Matrix,
    a: Matrix,
    var_up: Matrix,
}

impl Merged {
    fn from_store(store: &StateStore, g: VertexId) -> Self {
        Self {
            beta: store.beta_final(g).clone(),
            var: store.var_final(g).clone(),
            a: store.a(g).clone(),
            var_up: store.var_up(g).clone(),
        }
    }
}

/// Absorb the region members `kids` (children of `p`) into `p`.
fn absorb(store: &StateStore, p: VertexId, kids: &[Merged]) -> Merged {
    let n = store.n();
    let var_p = store.var_final(p);
    let mut beta = Vector::zeros(n);
    let mut sum_a = Matrix::zeros(n, n);
    let mut sum_up = Matrix::zeros(n, n);
    let mut diag = Matrix::zeros(n, n);
    for k in kids {
        beta += &k.beta;
        sum_a += &k.a;
        sum_up += &k.var_up;
        diag += &k.var - sibling_block(&k.a, var_p, &k.a, &k.var_up);
    }
    // Σ_{c,c'} [A_c V_p A_c'ᵀ − A_c U_c'] plus the diagonal correction above
    let mut var = diag + &sum_a * var_p * sum_a.transpose();
    for k in kids {
        var -= &k.a * &sum_up;
    }
    Merged {
        beta,
        var: symmetrize(&var),
        a: &sum_a * store.a(p),
        var_up: store.var_up(p) * sum_a.transpose(),
    }
}

/// Sum of final estimates over a leaf region and its covariance, by merging
/// region members into their parents one level at a time. Cost is quadratic
/// only in the fan-out, not in the region size.
pub fn aggregate_region(store: &StateStore, leaves: &[VertexId]) -> Result<(Vector, Matrix)> {
    if leaves.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let tree = store.tree();
    let h = collapse_region(tree, leaves)?;
    let mut cur: BTreeMap<VertexId, Merged> =
        h.iter().map(|&g| (g, Merged::from_store(store, g))).collect();
    while cur.len() > 1 {
        let deepest = cur.keys().map(|&g| tree.level_of(g)).max().expect("non-empty");
        let members: Vec<VertexId> = cur
            .keys()
            .copied()
            .filter(|&g| tree.level_of(g) == deepest)
            .collect();
        let mut by_parent: BTreeMap<VertexId, Vec<Merged>> = BTreeMap::new();
        for g in members {
            let m = cur.remove(&g).expect("key listed above");
            let p = tree.parent(g).expect("more than one member, so below the root");
            by_parent.entry(p).or_default().push(m);
        }
        for (p, kids) in by_parent {
            cur.insert(p, absorb(store, p, &kids));
        }
    }
    let (_, last) = cur.into_iter().next().expect("non-empty");
    Ok((last.beta, last.var))
}

/// Interval for `rq` computed through [`aggregate_region`].
pub fn estimate_query_aggregated(store: &StateStore, rq: &RegionQuery) -> Result<CIResult> {
    rq.validate(store.tree(), store.n())?;
    let (beta, var) = aggregate_region(store, &rq.leaves)?;
    confidence_interval(rq.q.dot(&beta), rq.q.dot(&(var * &rq.q)), rq.alpha, rq.clamp_nonnegative)
}

/// Fuse region estimates from two independent runs.
pub fn combine_runs(b0: &Vector, v0: &Matrix, b1: &Vector, v1: &Matrix) -> Result<(Vector, Matrix)> {
    ivw_mean(b0, v0, b1, v1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NoiseVar, VertexMeasurements};
    use crate::twopass::run_two_pass;

    fn scalar(y: f64, var: f64) -> VertexMeasurements {
        VertexMeasurements::new(
            Matrix::from_element(1, 1, 1.0),
            Vector::from_element(1, y),
            NoiseVar::Diagonal(Vector::from_element(1, var)),
        )
        .unwrap()
    }

    fn example1() -> StateStore {
        let t = Tree::build(&[(1, 0), (2, 0)], 0).unwrap();
        run_two_pass(&t, &[scalar(3.0, 1.0), scalar(1.0, 1.0), scalar(1.0, 1.0)]).unwrap()
    }

    fn binary7() -> Tree {
        Tree::build(&[(1, 0), (2, 0), (3, 1), (4, 1), (5, 2), (6, 2)], 0).unwrap()
    }

    fn binary7_store() -> StateStore {
        let ys = [10.0, 4.0, 5.5, 2.0, 1.5, 3.0, 2.0];
        let vs = [2.0, 1.0, 1.5, 0.5, 1.0, 0.8, 1.2];
        let meas: Vec<_> = ys.iter().zip(vs).map(|(&y, v)| scalar(y, v)).collect();
        run_two_pass(&binary7(), &meas).unwrap()
    }

    #[test]
    fn collapse_examples() {
        let t = Tree::build(&[(1, 0), (2, 0)], 0).unwrap();
        assert_eq!(collapse_region(&t, &[1, 2]).unwrap(), vec![0]);
        assert_eq!(collapse_region(&t, &[1]).unwrap(), vec![1]);
        let b = binary7();
        assert_eq!(collapse_region(&b, &[3, 4, 5]).unwrap(), vec![1, 5]);
        assert_eq!(collapse_region(&b, &[6, 5, 4, 3, 3]).unwrap(), vec![0]);
        assert!(matches!(collapse_region(&b, &[1]), Err(Error::NotALeaf(1))));
        assert!(matches!(collapse_region(&b, &[70]), Err(Error::UnknownVertex(70))));
    }

    #[test]
    fn example1_queries() {
        let s = example1();
        let q = Vector::from_element(1, 1.0);
        let r = estimate_query(&s, &RegionQuery::new(q.clone(), vec![1, 2], 0.05)).unwrap();
        assert!((r.estimate - 8.0 / 3.0).abs() < 1e-12);
        assert!((r.variance - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.lower - 1.0664).abs() < 1e-4);
        assert!((r.upper - 4.2670).abs() < 1e-4);
        let r = estimate_query(&s, &RegionQuery::new(q, vec![1], 0.05)).unwrap();
        assert!((r.estimate - 4.0 / 3.0).abs() < 1e-12);
        assert!((r.variance - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn clamping_touches_endpoints_only() {
        // c = 1 at alpha where the quantile is 1 and variance 1
        let alpha = 2.0 * (1.0 - crate::normal::normal_cdf(1.0));
        let r = confidence_interval(-0.5, 1.0, alpha, true).unwrap();
        assert_eq!(r.estimate, -0.5);
        assert_eq!(r.lower, 0.0);
        assert!((r.upper - 0.5).abs() < 1e-12);
        let r = confidence_interval(-0.5, 1.0, alpha, false).unwrap();
        assert!((r.lower + 1.5).abs() < 1e-12);
    }

    #[test]
    fn variance_round_off_and_errors() {
        assert_eq!(confidence_interval(1.0, -1e-12, 0.05, false).unwrap().variance, 0.0);
        assert!(matches!(
            confidence_interval(1.0, -1e-6, 0.05, false),
            Err(Error::NegativeVariance(_))
        ));
        let s = example1();
        let q = Vector::from_element(1, 1.0);
        assert!(matches!(
            estimate_query(&s, &RegionQuery::new(q.clone(), vec![], 0.05)),
            Err(Error::EmptyRegion)
        ));
        assert!(matches!(
            estimate_query(&s, &RegionQuery::new(q.clone(), vec![1], 1.0)),
            Err(Error::OutOfDomain(_))
        ));
        assert!(matches!(
            estimate_query(&s, &RegionQuery::new(Vector::zeros(2), vec![1], 0.05)),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(matches!(aggregate_region(&s, &[]), Err(Error::EmptyRegion)));
    }

    #[test]
    fn aggregate_examples() {
        let s = example1();
        let (b, v) = aggregate_region(&s, &[1, 2]).unwrap();
        assert_eq!(b, *s.beta_final(0));
        assert_eq!(v, *s.var_final(0));
        let (b, v) = aggregate_region(&s, &[1]).unwrap();
        assert!((b[0] - 4.0 / 3.0).abs() < 1e-12 && (v[(0, 0)] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_matches_nested_loop_on_all_subsets() {
        let s = binary7_store();
        let leaves = [3, 4, 5, 6];
        let q = Vector::from_element(1, 1.0);
        for mask in 1u32..16 {
            let h: Vec<_> = (0..4).filter(|i| mask & (1 << i) != 0).map(|i| leaves[i]).collect();
            let rq = RegionQuery::new(q.clone(), h.clone(), 0.1);
            let a = estimate_query(&s, &rq).unwrap();
            let b = estimate_query_uncollapsed(&s, &rq).unwrap();
            let c = estimate_query_aggregated(&s, &rq).unwrap();
            for other in [b, c] {
                assert!((a.estimate - other.estimate).abs() < 1e-10, "{h:?}");
                assert!((a.variance - other.variance).abs() < 1e-10, "{h:?}");
            }
        }
    }

    #[test]
    fn combine_runs_examples() {
        let b = Vector::from_row_slice(&[1.0, 2.0]);
        let v = Matrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let (bc, vc) = combine_runs(&b, &v, &b, &v).unwrap();
        assert!((bc - &b).abs().max() < 1e-14);
        assert!((vc - &v / 2.0).abs().max() < 1e-14);
        let (bc, vc) = combine_runs(
            &Vector::from_element(1, 0.0),
            &Matrix::from_element(1, 1, 1.0),
            &Vector::from_element(1, 4.0),
            &Matrix::from_element(1, 1, 3.0),
        )
        .unwrap();
        assert!((bc[0] - 1.0).abs() < 1e-15 && (vc[(0, 0)] - 0.75).abs() < 1e-15);
    }
}
