//! Dense generalized least squares on the fully stacked system.
//!
//! This is the reference the tree algorithms are checked against. The solver
//! relies on nalgebra's own Cholesky and shares no code with `linalg`,
//! `twopass` or `covariance`; only [`compare_store`] reads their results.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::covariance::CovarianceEngine;
use crate::error::{Error, Result};
use crate::model::VertexMeasurements;
use crate::spine::{Tree, VertexId};
use crate::twopass::StateStore;

/// Largest leaf-stack dimension the oracle accepts.
pub const MAX_COLS: usize = 512;
/// Largest number of stacked observations the oracle accepts.
pub const MAX_ROWS: usize = 4096;

#[derive(Debug, Clone)]
pub struct StackedSystem {
    /// Block dimension.
    pub n: usize,
    /// Leaves in column-block order (ascending id).
    pub leaf_order: Vec<VertexId>,
    /// First row of each vertex's block, vertices in ascending id.
    pub row_offsets: Vec<usize>,
    pub s_full: DMatrix<f64>,
    pub y_full: DVector<f64>,
    /// Diagonal blocks of the noise covariance, one per vertex.
    pub v_blocks: Vec<DMatrix<f64>>,
}

impl StackedSystem {
    pub fn rows(&self) -> usize {
        self.s_full.nrows()
    }

    pub fn cols(&self) -> usize {
        self.s_full.ncols()
    }

    /// Dense block-diagonal noise covariance.
    pub fn v_full(&self) -> DMatrix<f64> {
        let m = self.rows();
        let mut v = DMatrix::zeros(m, m);
        for (g, block) in self.v_blocks.iter().enumerate() {
            let r = self.row_offsets[g];
            v.view_mut((r, r), block.shape()).copy_from(block);
        }
        v
    }
}

pub fn build_stacked_system(tree: &Tree, meas: &[VertexMeasurements]) -> Result<StackedSystem> {
    if meas.len() != tree.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} measurement records for {} vertices",
            meas.len(),
            tree.len()
        )));
    }
    let n = meas[0].cols();
    if meas.iter().any(|m| m.cols() != n) {
        return Err(Error::DimensionMismatch("block dimensions differ".into()));
    }
    let mut leaf_order: Vec<VertexId> = (0..tree.len())
        .filter(|&g| tree.children(g).is_empty())
        .collect();
    leaf_order.sort_unstable();
    let cols = n * leaf_order.len();
    let rows: usize = meas.iter().map(|m| m.rows()).sum();
    if cols > MAX_COLS || rows > MAX_ROWS {
        return Err(Error::InfeasibleDenseSize {
            rows,
            cols,
            max_rows: MAX_ROWS,
            max_cols: MAX_COLS,
        });
    }

    let mut s_full = DMatrix::zeros(rows, cols);
    let mut y_full = DVector::zeros(rows);
    let mut row_offsets = Vec::with_capacity(tree.len());
    let mut v_blocks = Vec::with_capacity(tree.len());
    let mut r = 0;
    for (g, m) in meas.iter().enumerate() {
        row_offsets.push(r);
        let mg = m.rows();
        for (j, &leaf) in leaf_order.iter().enumerate() {
            // walk up from the leaf to see whether g is on its ancestor chain
            let mut x = Some(leaf);
            while let Some(v) = x {
                if v == g {
                    s_full.view_mut((r, j * n), (mg, n)).copy_from(m.design());
                    break;
                }
                x = tree.parent(v);
            }
        }
        y_full.rows_mut(r, mg).copy_from(m.obs());
        v_blocks.push(m.noise().to_dense());
        r += mg;
    }
    Ok(StackedSystem {
        n,
        leaf_order,
        row_offsets,
        s_full,
        y_full,
        v_blocks,
    })
}

/// Dense GLS solution over the leaf stack.
#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub n: usize,
    pub leaf_order: Vec<VertexId>,
    pub beta: DVector<f64>,
    pub var: DMatrix<f64>,
}

pub fn dense_gls(sys: &StackedSystem) -> Result<OracleSolution> {
    let cols = sys.cols();
    let mut gram = DMatrix::zeros(cols, cols);
    let mut rhs = DVector::zeros(cols);
    for (g, block) in sys.v_blocks.iter().enumerate() {
        let r = sys.row_offsets[g];
        let mg = block.nrows();
        let s_rows = sys.s_full.rows(r, mg).clone_owned();
        let y_rows = sys.y_full.rows(r, mg).clone_owned();
        let chol = Cholesky::new(block.clone())
            .ok_or_else(|| Error::NonSpdNoise(format!("noise block of vertex {g}")))?;
        gram += s_rows.transpose() * chol.solve(&s_rows);
        rhs += s_rows.transpose() * chol.solve(&y_rows);
    }
    let gram = (&gram + gram.transpose()) * 0.5;
    let chol = Cholesky::new(gram).ok_or(Error::RankDeficient)?;
    let var = chol.inverse();
    let var = (&var + var.transpose()) * 0.5;
    let beta = chol.solve(&rhs);
    Ok(OracleSolution {
        n: sys.n,
        leaf_order: sys.leaf_order.clone(),
        beta,
        var,
    })
}

impl OracleSolution {
    fn leaf_columns(&self, tree: &Tree, g: VertexId) -> Vec<usize> {
        self.leaf_order
            .iter()
            .enumerate()
            .filter(|&(_, &leaf)| {
                let mut x = Some(leaf);
                while let Some(v) = x {
                    if v == g {
                        return true;
                    }
                    x = tree.parent(v);
                }
                false
            })
            .map(|(j, _)| j)
            .collect()
    }

    /// Estimate and variance of β(g) as the sum of its descendant leaf blocks.
    pub fn vertex_marginal(&self, tree: &Tree, g: VertexId) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.n;
        let cols = self.leaf_columns(tree, g);
        let mut beta = DVector::zeros(n);
        for &j in &cols {
            beta += self.beta.rows(j * n, n);
        }
        (beta, self.covariance_blocks(&cols, &cols))
    }

    /// Covariance between the estimates of β(u) and β(v).
    pub fn vertex_covariance(&self, tree: &Tree, u: VertexId, v: VertexId) -> DMatrix<f64> {
        let cu = self.leaf_columns(tree, u);
        let cv = self.leaf_columns(tree, v);
        self.covariance_blocks(&cu, &cv)
    }

    fn covariance_blocks(&self, cu: &[usize], cv: &[usize]) -> DMatrix<f64> {
        let n = self.n;
        let mut out = DMatrix::zeros(n, n);
        for &i in cu {
            for &j in cv {
                out += self.var.view((i * n, j * n), (n, n));
            }
        }
        out
    }
}

/// `((h⊗q)ᵀβ, (h⊗q)ᵀ Var (h⊗q))` with `h` the indicator of `region` over
/// `leaf_order`.
pub fn oracle_query(
    beta: &DVector<f64>,
    var: &DMatrix<f64>,
    q: &DVector<f64>,
    region: &[VertexId],
    leaf_order: &[VertexId],
) -> Result<(f64, f64)> {
    let n = q.len();
    let cols = n * leaf_order.len();
    if beta.len() != cols || var.shape() != (cols, cols) {
        return Err(Error::DimensionMismatch(format!(
            "oracle solution has {} columns, expected {cols}",
            beta.len()
        )));
    }
    let mut w = DVector::zeros(cols);
    for &g in region {
        let j = leaf_order
            .iter()
            .position(|&l| l == g)
            .ok_or_else(|| Error::DimensionMismatch(format!("vertex {g} is not in the leaf order")))?;
        w.rows_mut(j * n, n).copy_from(q);
    }
    Ok((w.dot(beta), w.dot(&(var * &w))))
}

fn nan_max(m: f64, d: f64) -> f64 {
    if m.is_nan() || d.is_nan() {
        f64::NAN
    } else {
        m.max(d)
    }
}

fn max_abs_diff<'a>(a: impl Iterator<Item = &'a f64>, b: impl Iterator<Item = &'a f64>) -> f64 {
    a.zip(b).fold(0.0, |m, (x, y)| nan_max(m, (x - y).abs()))
}

fn max_abs<'a>(a: impl Iterator<Item = &'a f64>) -> f64 {
    a.fold(0.0, |m, x| m.max(x.abs()))
}

/// Largest deviation found and where.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Deviation {
    pub value: f64,
    pub at: (VertexId, VertexId),
}

impl Deviation {
    fn update(&mut self, value: f64, at: (VertexId, VertexId)) {
        // NaN counts as the worst possible deviation and sticks
        if !self.value.is_nan() && (value.is_nan() || value > self.value) {
            *self = Deviation { value, at };
        }
    }
}

/// Relative deviations of a store from the dense solution.
///
/// * estimates: `max|β̃ − β*| / max(‖β*‖∞, √‖Var*‖∞)`, i.e. relative to the
///   larger of the value and its standard error;
/// * variances: `max|V − V*| / ‖V*‖∞`;
/// * covariances: `max|C − C*| / √(‖Var*(u)‖∞ · ‖Var*(v)‖∞)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Comparison {
    pub beta: Deviation,
    pub var: Deviation,
    pub cov: Deviation,
}

impl Comparison {
    pub fn max(&self) -> f64 {
        [self.beta.value, self.var.value, self.cov.value]
            .into_iter()
            .fold(0.0, nan_max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max() <= tolerance
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairScope {
    Leaves,
    AllVertices,
}

/// Compare every vertex marginal and every pair covariance in `scope`.
pub fn compare_store(
    tree: &Tree,
    store: &StateStore,
    sol: &OracleSolution,
    scope: PairScope,
) -> Result<Comparison> {
    if store.tree().len() != tree.len() || store.n() != sol.n {
        return Err(Error::DimensionMismatch("store and oracle describe different problems".into()));
    }
    let mut out = Comparison::default();
    let mut var_scale = vec![0.0; tree.len()];
    for g in 0..tree.len() {
        let (b, v) = sol.vertex_marginal(tree, g);
        var_scale[g] = max_abs(v.iter());
        let den = max_abs(b.iter()).max(var_scale[g].sqrt());
        out.beta
            .update(max_abs_diff(store.beta_final(g).iter(), b.iter()) / den, (g, g));
        out.var
            .update(max_abs_diff(store.var_final(g).iter(), v.iter()) / var_scale[g], (g, g));
    }
    let vertices: Vec<VertexId> = match scope {
        PairScope::Leaves => sol.leaf_order.clone(),
        PairScope::AllVertices => (0..tree.len()).collect(),
    };
    let mut engine = CovarianceEngine::with_memo(store);
    for (i, &u) in vertices.iter().enumerate() {
        for &v in &vertices[i + 1..] {
            let c = engine.covariance(u, v)?;
            let c_star = sol.vertex_covariance(tree, u, v);
            let den = (var_scale[u] * var_scale[v]).sqrt();
            out.cov.update(max_abs_diff(c.iter(), c_star.iter()) / den, (u, v));
        }
    }
    Ok(out)
}
