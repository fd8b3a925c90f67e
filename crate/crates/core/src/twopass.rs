//! Two-pass estimation: fine-to-coarse inverse-variance fusion followed by a
//! coarse-to-fine projection onto the parent-child consistent set.
//!
//! After the fine-to-coarse pass every vertex holds the BLUE of its own
//! histogram given the observations in its subtree (`beta_up`, `var_up`).
//! The coarse-to-fine pass distributes each parent's discrepancy among its
//! children with weights
//!
//! ```text
//! A(c) = var_up(c) · (Σ_{c'} var_up(c'))⁻¹
//! β̃(c) = beta_up(c) + A(c) · (β̃(parent) − Σ_{c'} beta_up(c'))
//! Var(β̃(c)) = var_up(c) − A(c)·var_up(c) + A(c)·Var(β̃(parent))·A(c)ᵀ
//! ```
//!
//! Both passes are level-synchronous: every vertex of a level reads only the
//! neighbouring level, so a level can be processed in parallel and the result
//! does not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, Cholesky, Matrix, Vector};
use crate::model::{local_gls, LocalEstimate, VertexMeasurements};
use crate::spine::{Tree, VertexId};

/// Intermediate quantities that are not part of the persisted store.
#[derive(Debug, Clone, PartialEq)]
pub struct PassDetail {
    pub beta_local: Vector,
    pub var_local: Matrix,
    pub beta_up: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VertexState {
    /// Full-information estimate β̃(g).
    pub beta_final: Vector,
    /// Var(β̃(g)).
    pub var_final: Matrix,
    /// Projection weight A(g); identity at the root.
    pub a: Matrix,
    /// Variance of the subtree-only estimate, Var(β̂(g|g−)).
    pub var_up: Matrix,
    /// Present after a fresh run, absent when loaded from a store file.
    pub detail: Option<PassDetail>,
}

/// Subtree-only estimate β̂(g|g−) and its variance.
#[derive(Debug, Clone, PartialEq)]
pub struct UpState {
    pub beta: Vector,
    pub var: Matrix,
}

/// Result of the coarse-to-fine pass at one vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct DownState {
    pub a: Matrix,
    pub beta: Vector,
    pub var: Matrix,
}

/// Output of [`run_two_pass`]: one state per vertex, immutable afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct StateStore {
    tree: Tree,
    n: usize,
    states: Vec<VertexState>,
}

impl StateStore {
    pub fn from_parts(tree: Tree, n: usize, states: Vec<VertexState>) -> Result<Self> {
        if states.len() != tree.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} states for {} vertices",
                states.len(),
                tree.len()
            )));
        }
        for (g, s) in states.iter().enumerate() {
            let ok = s.beta_final.len() == n
                && s.var_final.shape() == (n, n)
                && s.a.shape() == (n, n)
                && s.var_up.shape() == (n, n);
            if !ok {
                return Err(
                    Error::DimensionMismatch(format!("state blocks are not {n}x{n}")).at_vertex(g),
                );
            }
        }
        Ok(Self { tree, n, states })
    }

    pub fn tree(&self) -> &Tree {
        &self.tree
    }

    /// Block dimension.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn states(&self) -> &[VertexState] {
        &self.states
    }

    pub fn state(&self, g: VertexId) -> Result<&VertexState> {
        self.states.get(g).ok_or(Error::UnknownVertex(g))
    }

    pub fn beta_final(&self, g: VertexId) -> &Vector {
        &self.states[g].beta_final
    }

    pub fn var_final(&self, g: VertexId) -> &Matrix {
        &self.states[g].var_final
    }

    pub fn a(&self, g: VertexId) -> &Matrix {
        &self.states[g].a
    }

    pub fn var_up(&self, g: VertexId) -> &Matrix {
        &self.states[g].var_up
    }

    /// Drop the intermediates, keeping exactly what a store file holds.
    pub fn without_detail(mut self) -> Self {
        for s in &mut self.states {
            s.detail = None;
        }
        self
    }

}

/// Minimum-variance combination of two independent unbiased estimates.
pub fn ivw_mean(a: &Vector, va: &Matrix, b: &Vector, vb: &Matrix) -> Result<(Vector, Matrix)> {
    let n = a.len();
    if b.len() != n || va.shape() != (n, n) || vb.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "ivw_mean operands: a {}, Va {:?}, b {}, Vb {:?}",
            n,
            va.shape(),
            b.len(),
            vb.shape()
        )));
    }
    let pa = Cholesky::factor_spd(va)?.inverse();
    let pb = Cholesky::factor_spd(vb)?.inverse();
    let precision = symmetrize(&(&pa + &pb));
    let pch = Cholesky::factor_spd(&precision)?;
    let var = pch.inverse();
    let mean = pch.solve_vec(&(pa * a + pb * b));
    Ok((mean, var))
}

/// Thread policy for the level-parallel loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    /// Rayon's global pool.
    #[default]
    Auto,
    /// Plain sequential loops.
    Sequential,
    /// A dedicated pool with this many threads.
    Threads(usize),
}

impl Parallelism {
    pub fn from_threads(threads: Option<usize>) -> Self {
        match threads {
            None | Some(0) => Parallelism::Auto,
            Some(1) => Parallelism::Sequential,
            Some(k) => Parallelism::Threads(k),
        }
    }

    fn run<R: Send>(self, f: impl FnOnce(bool) -> R + Send) -> R {
        match self {
            Parallelism::Auto => f(true),
            Parallelism::Sequential => f(false),
            Parallelism::Threads(k) => match rayon::ThreadPoolBuilder::new().num_threads(k).build() {
                Ok(pool) => pool.install(|| f(true)),
                Err(_) => f(true),
            },
        }
    }
}

/// Order-preserving map over a vertex list; the first error in list order wins.
fn map_level<T, F>(vertices: &[VertexId], parallel: bool, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(VertexId) -> Result<T> + Sync + Send,
{
    let results: Vec<Result<T>> = if parallel {
        vertices.par_iter().map(|&g| f(g)).collect()
    } else {
        vertices.iter().map(|&g| f(g)).collect()
    };
    results.into_iter().collect()
}

fn children_sums(tree: &Tree, g: VertexId, up: &[Option<UpState>], n: usize) -> (Vector, Matrix) {
    let mut beta = Vector::zeros(n);
    let mut var = Matrix::zeros(n, n);
    for &c in tree.children(g) {
        let s = up[c].as_ref().expect("deeper level already processed");
        beta += &s.beta;
        var += &s.var;
    }
    (beta, var)
}

/// Local GLS at every vertex.
pub fn local_estimates(
    tree: &Tree,
    meas: &[VertexMeasurements],
    parallel: bool,
) -> Result<Vec<LocalEstimate>> {
    let all: Vec<VertexId> = (0..tree.len()).collect();
    map_level(&all, parallel, |g| local_gls(&meas[g]).map_err(|e| e.at_vertex(g)))
}

fn fine_to_coarse_impl(tree: &Tree, local: &[LocalEstimate], parallel: bool) -> Result<Vec<UpState>> {
    if local.len() != tree.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} local estimates for {} vertices",
            local.len(),
            tree.len()
        )));
    }
    let n = local.first().map_or(0, |e| e.beta.len());
    let mut up: Vec<Option<UpState>> = vec![None; tree.len()];
    for &g in tree.leaves() {
        up[g] = Some(UpState {
            beta: local[g].beta.clone(),
            var: local[g].var.clone(),
        });
    }
    for l in (0..tree.depth()).rev() {
        let level = tree.level(l);
        let fused = map_level(level, parallel, |g| {
            let (beta_c, var_c) = children_sums(tree, g, &up, n);
            let (beta, var) = ivw_mean(&local[g].beta, &local[g].var, &beta_c, &var_c)
                .map_err(|e| e.at_vertex(g))?;
            Ok(UpState { beta, var })
        })?;
        for (&g, s) in level.iter().zip(fused) {
            up[g] = Some(s);
        }
    }
    Ok(up.into_iter().map(|s| s.expect("every level visited")).collect())
}

/// Fine-to-coarse pass: β̂(g|g−) and Var(β̂(g|g−)) for every vertex.
pub fn fine_to_coarse(tree: &Tree, local: &[LocalEstimate]) -> Result<Vec<UpState>> {
    fine_to_coarse_impl(tree, local, false)
}

/// Children of `g` projected onto the consistency constraint.
fn project_children(
    tree: &Tree,
    g: VertexId,
    parent: &DownState,
    up: &[UpState],
) -> Result<Vec<(VertexId, DownState)>> {
    let n = parent.beta.len();
    let kids = tree.children(g);
    let mut sigma = Matrix::zeros(n, n);
    let mut disc = parent.beta.clone();
    for &c in kids {
        sigma += &up[c].var;
        disc -= &up[c].beta;
    }
    // one factorization per parent, reused for every child
    let ch = Cholesky::factor_spd(&sigma).map_err(|e| e.at_vertex(g))?;
    Ok(kids
        .iter()
        .map(|&c| {
            let vu = &up[c].var;
            // A = vu · Σ⁻¹ = (Σ⁻¹ vu)ᵀ since both factors are symmetric
            let a = ch.solve_mat(vu).transpose();
            let beta = &up[c].beta + &a * &disc;
            let var = symmetrize(&(vu - &a * vu + &a * &parent.var * a.transpose()));
            (c, DownState { a, beta, var })
        })
        .collect())
}

fn coarse_to_fine_impl(tree: &Tree, up: &[UpState], parallel: bool) -> Result<Vec<DownState>> {
    if up.len() != tree.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} up-states for {} vertices",
            up.len(),
            tree.len()
        )));
    }
    let n = up[tree.root()].beta.len();
    let mut down: Vec<Option<DownState>> = vec![None; tree.len()];
    down[tree.root()] = Some(DownState {
        a: Matrix::identity(n, n),
        beta: up[tree.root()].beta.clone(),
        var: up[tree.root()].var.clone(),
    });
    for l in 0..tree.depth() {
        let parents = tree.level(l);
        let projected = map_level(parents, parallel, |g| {
            let parent = down[g].as_ref().expect("upper level already processed");
            project_children(tree, g, parent, up)
        })?;
        for (c, s) in projected.into_iter().flatten() {
            down[c] = Some(s);
        }
    }
    Ok(down.into_iter().map(|s| s.expect("every level visited")).collect())
}

/// Coarse-to-fine pass: A(g), β̃(g) and Var(β̃(g)) for every vertex.
pub fn coarse_to_fine(tree: &Tree, up: &[UpState]) -> Result<Vec<DownState>> {
    coarse_to_fine_impl(tree, up, false)
}

/// Full two-pass estimation on rayon's global pool.
pub fn run_two_pass(tree: &Tree, meas: &[VertexMeasurements]) -> Result<StateStore> {
    run_two_pass_with(tree, meas, Parallelism::Auto)
}

pub fn run_two_pass_with(
    tree: &Tree,
    meas: &[VertexMeasurements],
    parallelism: Parallelism,
) -> Result<StateStore> {
    if meas.len() != tree.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} measurement records for {} vertices",
            meas.len(),
            tree.len()
        )));
    }
    let n = meas[tree.root()].cols();
    if let Some(g) = meas.iter().position(|m| m.cols() != n) {
        return Err(Error::DimensionMismatch(format!(
            "block dimension {} differs from root's {n}",
            meas[g].cols()
        ))
        .at_vertex(g));
    }

    parallelism.run(|parallel| {
        let local = local_estimates(tree, meas, parallel)?;
        let up = fine_to_coarse_impl(tree, &local, parallel)?;
        let down = coarse_to_fine_impl(tree, &up, parallel)?;
        let states = local
            .into_iter()
            .zip(up)
            .zip(down)
            .map(|((loc, up), down)| VertexState {
                beta_final: down.beta,
                var_final: down.var,
                a: down.a,
                var_up: up.var,
                detail: Some(PassDetail {
                    beta_local: loc.beta,
                    var_local: loc.var,
                    beta_up: up.beta,
                }),
            })
            .collect();
        StateStore::from_parts(tree.clone(), n, states)
    })
}
