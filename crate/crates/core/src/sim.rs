//! Synthetic measurements and confidence-interval coverage studies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Matrix, Vector};
use crate::model::{NoiseVar, VertexMeasurements};
use crate::normal::{normal_cdf, normal_quantile};
use crate::query::{collapse_region, confidence_interval, region_moments, RegionQuery};
use crate::spine::{Tree, VertexId};
use crate::twopass::{run_two_pass_with, Parallelism, StateStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseKind {
    #[default]
    Gaussian,
    /// Integer-valued noise; requires diagonal noise variances.
    DiscreteGaussian,
}

/// Per-vertex truth from leaf truth (in `tree.leaves()` order) by summing
/// up the tree.
pub fn truth_from_leaves(tree: &Tree, leaf_beta: &[Vector]) -> Result<Vec<Vector>> {
    let leaves = tree.leaves();
    if leaf_beta.len() != leaves.len() {
        return Err(Error::Config(format!(
            "{} leaf truth vectors for {} leaves",
            leaf_beta.len(),
            leaves.len()
        )));
    }
    let n = leaf_beta.first().map_or(0, |b| b.len());
    if leaf_beta.iter().any(|b| b.len() != n) {
        return Err(Error::Config("leaf truth vectors differ in length".into()));
    }
    let mut truth = vec![Vector::zeros(n); tree.len()];
    for (&g, b) in leaves.iter().zip(leaf_beta) {
        truth[g] = b.clone();
    }
    for l in (0..tree.depth()).rev() {
        for &g in tree.level(l) {
            let mut s = Vector::zeros(n);
            for &c in tree.children(g) {
                s += &truth[c];
            }
            truth[g] = s;
        }
    }
    Ok(truth)
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    tree: Tree,
    designs: Vec<Matrix>,
    noise: Vec<NoiseVar>,
    truth: Vec<Vector>,
    /// Lower Cholesky factor of each dense noise block, for correlated draws.
    noise_factors: Vec<Option<Matrix>>,
    pub noise_kind: NoiseKind,
    pub replicates: usize,
    pub alphas: Vec<f64>,
    pub seed: u64,
}

impl SimConfig {
    /// `designs` and `noise` are per vertex; `leaf_beta` follows
    /// `tree.leaves()` order.
    pub fn new(
        tree: Tree,
        designs: Vec<Matrix>,
        noise: Vec<NoiseVar>,
        leaf_beta: &[Vector],
        noise_kind: NoiseKind,
        replicates: usize,
        alphas: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        if replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if designs.len() != tree.len() || noise.len() != tree.len() {
            return Err(Error::Config(format!(
                "{} designs and {} noise blocks for {} vertices",
                designs.len(),
                noise.len(),
                tree.len()
            )));
        }
        if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(Error::Config(format!("alpha {a} not in (0, 1)")));
        }
        let truth = truth_from_leaves(&tree, leaf_beta)?;
        let n = truth[0].len();
        let mut noise_factors = Vec::with_capacity(tree.len());
        for g in 0..tree.len() {
            if designs[g].ncols() != n || designs[g].nrows() != noise[g].len() {
                return Err(Error::Config(format!(
                    "design {:?} and noise length {} at vertex {g} do not match n={n}",
                    designs[g].shape(),
                    noise[g].len()
                )));
            }
            noise_factors.push(match &noise[g] {
                NoiseVar::Diagonal(d) => {
                    if d.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                        return Err(Error::Config(format!("non-positive noise variance at vertex {g}")));
                    }
                    None
                }
                NoiseVar::Full(m) => {
                    if noise_kind == NoiseKind::DiscreteGaussian {
                        return Err(Error::Config(
                            "discrete Gaussian noise needs diagonal noise variances".into(),
                        ));
                    }
                    let ch = Cholesky::factor(m).map_err(|_| {
                        Error::Config(format!("noise block at vertex {g} is not SPD"))
                    })?;
                    Some(ch.lower().clone())
                }
            });
        }
        Ok(Self {
            tree,
            designs,
            noise,
            truth,
            noise_factors,
            noise_kind,
            replicates,
            alphas,
            seed,
        })
    }

    pub fn tree(&self) -> &Tree {
        &self.tree
    }

    /// Per-vertex truth, indexed by vertex id.
    pub fn truth(&self) -> &[Vector] {
        &self.truth
    }

    pub fn n(&self) -> usize {
        self.truth[0].len()
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent generator for one (replicate, vertex) cell.
pub fn substream(seed: u64, replicate: u64, vertex: u64) -> ChaCha8Rng {
    let s = splitmix64(splitmix64(splitmix64(seed) ^ replicate) ^ vertex);
    ChaCha8Rng::seed_from_u64(s)
}

/// Noisy measurements for one replicate.
pub fn simulate_measurements(cfg: &SimConfig, replicate: usize) -> Result<Vec<VertexMeasurements>> {
    (0..cfg.tree.len())
        .map(|g| {
            let mut rng = substream(cfg.seed, replicate as u64, g as u64);
            let mean = &cfg.designs[g] * &cfg.truth[g];
            let m = mean.len();
            let noise = match (cfg.noise_kind, &cfg.noise[g], &cfg.noise_factors[g]) {
                (NoiseKind::Gaussian, NoiseVar::Diagonal(d), _) => {
                    Vector::from_fn(m, |i, _| d[i].sqrt() * rng.sample::<f64, _>(StandardNormal))
                }
                (NoiseKind::Gaussian, NoiseVar::Full(_), Some(l)) => {
                    let z = Vector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
                    l * z
                }
                (NoiseKind::DiscreteGaussian, NoiseVar::Diagonal(d), _) => {
                    Vector::from_fn(m, |i, _| sample_discrete_gaussian(d[i], &mut rng) as f64)
                }
                _ => unreachable!("combination rejected by SimConfig::new"),
            };
            VertexMeasurements::new(cfg.designs[g].clone(), mean + noise, cfg.noise[g].clone())
                .map_err(|e| e.at_vertex(g))
        })
        .collect()
}

fn bernoulli<R: Rng + ?Sized>(p: f64, rng: &mut R) -> bool {
    rng.random::<f64>() < p
}

/// Bernoulli(exp(-gamma)) for gamma >= 0 without evaluating exp directly.
fn bernoulli_exp<R: Rng + ?Sized>(gamma: f64, rng: &mut R) -> bool {
    let mut g = gamma;
    while g > 1.0 {
        if !bernoulli_exp(1.0, rng) {
            return false;
        }
        g -= 1.0;
    }
    let mut k = 1.0;
    loop {
        if !bernoulli(g / k, rng) {
            break;
        }
        k += 1.0;
    }
    // k is odd exactly with probability exp(-g)
    (k as u64) % 2 == 1
}

/// Discrete Laplace with scale `t`: P(x) ∝ exp(-|x|/t).
fn sample_discrete_laplace<R: Rng + ?Sized>(t: u64, rng: &mut R) -> i64 {
    loop {
        let u = rng.random_range(0..t);
        if !bernoulli_exp(u as f64 / t as f64, rng) {
            continue;
        }
        let mut v = 0u64;
        while bernoulli_exp(1.0, rng) {
            v += 1;
        }
        let x = (u + t * v) as i64;
        let negative = rng.random_bool(0.5);
        if negative && x == 0 {
            continue;
        }
        return if negative { -x } else { x };
    }
}

/// Integer with P(x) ∝ exp(-x² / (2·sigma2)), by rejection from a discrete
/// Laplace proposal.
pub fn sample_discrete_gaussian<R: Rng + ?Sized>(sigma2: f64, rng: &mut R) -> i64 {
    assert!(sigma2 > 0.0, "sigma2 must be positive");
    let sigma = sigma2.sqrt();
    let t = sigma.floor() as u64 + 1;
    loop {
        let y = sample_discrete_laplace(t, rng);
        let d = y.unsigned_abs() as f64 - sigma2 / t as f64;
        if bernoulli_exp(d * d / (2.0 * sigma2), rng) {
            return y;
        }
    }
}

/// A query evaluated in every replicate; `alpha` and clamping come from the
/// experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct SimQuery {
    pub id: String,
    pub q: Vector,
    pub leaves: Vec<VertexId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageRow {
    pub query_id: String,
    pub alpha: f64,
    pub clamped: bool,
    pub coverage: f64,
    pub mean_width: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub replicates: usize,
    pub rows: Vec<CoverageRow>,
    /// Z-scores ordered by replicate, then query.
    pub z_scores: Vec<f64>,
}

impl CoverageReport {
    pub fn row(&self, query_id: &str, alpha: f64, clamped: bool) -> Option<&CoverageRow> {
        self.rows
            .iter()
            .find(|r| r.query_id == query_id && r.alpha == alpha && r.clamped == clamped)
    }
}

struct QueryOutcome {
    covered: Vec<[bool; 2]>,
    width: Vec<[f64; 2]>,
    z: f64,
}

/// Simulate, estimate and score every query in every replicate. Replicates
/// run in parallel; the reduction is in replicate order.
pub fn coverage_experiment(cfg: &SimConfig, queries: &[SimQuery]) -> Result<CoverageReport> {
    let n = cfg.n();
    let mut prepared = Vec::with_capacity(queries.len());
    for sq in queries {
        RegionQuery::new(sq.q.clone(), sq.leaves.clone(), 0.5).validate(&cfg.tree, n)?;
        let h = collapse_region(&cfg.tree, &sq.leaves)?;
        let truth: f64 = sq.leaves.iter().map(|&l| sq.q.dot(&cfg.truth[l])).sum();
        prepared.push((h, truth));
    }
    let per_rep: Vec<Result<Vec<QueryOutcome>>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let meas = simulate_measurements(cfg, r)?;
            let store = run_two_pass_with(&cfg.tree, &meas, Parallelism::Sequential)?;
            queries
                .iter()
                .zip(&prepared)
                .map(|(sq, (h, truth))| score(&store, sq, h, *truth, &cfg.alphas))
                .collect()
        })
        .collect();

    let (na, nq) = (cfg.alphas.len(), queries.len());
    let mut hits = vec![[0usize; 2]; na * nq];
    let mut widths = vec![[0.0f64; 2]; na * nq];
    let mut z_scores = Vec::with_capacity(cfg.replicates * nq);
    for rep in per_rep {
        for (qi, o) in rep?.into_iter().enumerate() {
            for ai in 0..na {
                for c in 0..2 {
                    hits[qi * na + ai][c] += o.covered[ai][c] as usize;
                    widths[qi * na + ai][c] += o.width[ai][c];
                }
            }
            z_scores.push(o.z);
        }
    }
    let reps = cfg.replicates as f64;
    let mut rows = Vec::with_capacity(na * nq * 2);
    for (qi, sq) in queries.iter().enumerate() {
        for (ai, &alpha) in cfg.alphas.iter().enumerate() {
            for (c, clamped) in [false, true].into_iter().enumerate() {
                rows.push(CoverageRow {
                    query_id: sq.id.clone(),
                    alpha,
                    clamped,
                    coverage: hits[qi * na + ai][c] as f64 / reps,
                    mean_width: widths[qi * na + ai][c] / reps,
                });
            }
        }
    }
    Ok(CoverageReport {
        replicates: cfg.replicates,
        rows,
        z_scores,
    })
}

fn score(
    store: &StateStore,
    sq: &SimQuery,
    h: &[VertexId],
    truth: f64,
    alphas: &[f64],
) -> Result<QueryOutcome> {
    let (est, var) = region_moments(store, h, &sq.q)?;
    let mut covered = Vec::with_capacity(alphas.len());
    let mut width = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut c = [false; 2];
        let mut w = [0.0; 2];
        for (i, clamp) in [false, true].into_iter().enumerate() {
            let ci = confidence_interval(est, var, alpha, clamp)?;
            c[i] = ci.lower <= truth && truth <= ci.upper;
            w[i] = ci.upper - ci.lower;
        }
        covered.push(c);
        width.push(w);
    }
    let var = var.max(0.0);
    if var == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(QueryOutcome {
        covered,
        width,
        z: (est - truth) / var.sqrt(),
    })
}

/// `(β̃_{H,q} − β_{H,q}) / √Var(β̃_{H,q})` per query; `truth` is indexed by
/// vertex id.
pub fn z_scores(store: &StateStore, truth: &[Vector], queries: &[RegionQuery]) -> Result<Vec<f64>> {
    queries
        .iter()
        .map(|rq| {
            rq.validate(store.tree(), store.n())?;
            let h = collapse_region(store.tree(), &rq.leaves)?;
            let (est, var) = region_moments(store, &h, &rq.q)?;
            let t: f64 = rq.leaves.iter().map(|&l| rq.q.dot(&truth[l])).sum();
            if !(var > 0.0) {
                return Err(Error::ZeroVariance);
            }
            Ok((est - t) / var.sqrt())
        })
        .collect()
}

/// `(Φ⁻¹((i + 0.5)/N), z_(i))` pairs with `z` sorted ascending.
pub fn qq_export(z: &[f64]) -> Result<Vec<(f64, f64)>> {
    if z.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut sorted = z.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, e)| Ok((normal_quantile((i as f64 + 0.5) / n)?, e)))
        .collect()
}

/// Kolmogorov-Smirnov distance between the empirical CDF of `z` and Φ.
pub fn ks_statistic(z: &[f64]) -> Result<f64> {
    if z.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut sorted = z.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal_cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::complete_tree;

    fn scalar_config(var: f64, kind: NoiseKind, replicates: usize) -> SimConfig {
        let tree = complete_tree(2, 2);
        let v = tree.len();
        let leaf_beta: Vec<_> = (0..4).map(|i| Vector::from_element(1, 3.0 + i as f64)).collect();
        SimConfig::new(
            tree,
            vec![Matrix::from_element(1, 1, 1.0); v],
            vec![NoiseVar::Diagonal(Vector::from_element(1, var)); v],
            &leaf_beta,
            kind,
            replicates,
            vec![0.1, 0.05],
            17,
        )
        .unwrap()
    }

    /// Truncated, normalized pmf of the discrete Gaussian.
    fn dg_moments(sigma2: f64) -> (f64, f64, f64) {
        let w: Vec<(f64, f64)> = (-50..=50)
            .map(|x| (x as f64, (-(x as f64).powi(2) / (2.0 * sigma2)).exp()))
            .collect();
        let z: f64 = w.iter().map(|p| p.1).sum();
        let mean = w.iter().map(|(x, p)| x * p).sum::<f64>() / z;
        let var = w.iter().map(|(x, p)| x * x * p).sum::<f64>() / z - mean * mean;
        (mean, var, 1.0 / z)
    }

    #[test]
    fn truth_is_summed_from_leaves() {
        let cfg = scalar_config(1.0, NoiseKind::Gaussian, 1);
        let t = cfg.truth();
        assert_eq!(t[0][0], 3.0 + 4.0 + 5.0 + 6.0);
        assert_eq!(t[1][0], 7.0);
    }

    #[test]
    fn noiseless_limit_and_determinism() {
        let cfg = scalar_config(1e-18, NoiseKind::Gaussian, 1);
        let meas = simulate_measurements(&cfg, 0).unwrap();
        for (g, m) in meas.iter().enumerate() {
            assert!((m.obs()[0] - cfg.truth()[g][0]).abs() < 1e-6);
        }
        let cfg = scalar_config(2.0, NoiseKind::Gaussian, 1);
        assert_eq!(simulate_measurements(&cfg, 3).unwrap(), simulate_measurements(&cfg, 3).unwrap());
        assert_ne!(simulate_measurements(&cfg, 3).unwrap(), simulate_measurements(&cfg, 4).unwrap());
    }

    #[test]
    fn sample_mean_converges() {
        let cfg = scalar_config(4.0, NoiseKind::Gaussian, 1);
        let reps = 10_000;
        let mut sum = vec![0.0; cfg.tree().len()];
        for r in 0..reps {
            for (g, m) in simulate_measurements(&cfg, r).unwrap().iter().enumerate() {
                sum[g] += m.obs()[0];
            }
        }
        for (g, s) in sum.iter().enumerate() {
            let bound = 4.0 * 2.0 / (reps as f64).sqrt();
            assert!((s / reps as f64 - cfg.truth()[g][0]).abs() < bound, "vertex {g}");
        }
    }

    #[test]
    fn discrete_gaussian_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = 1_000_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..draws {
            let x = sample_discrete_gaussian(4.0, &mut rng) as f64;
            s1 += x;
            s2 += x * x;
        }
        let mean = s1 / draws as f64;
        let var = s2 / draws as f64 - mean * mean;
        let (m0, v0, _) = dg_moments(4.0);
        assert!((mean - m0).abs() < 0.01, "mean {mean}");
        assert!((var / v0 - 1.0).abs() < 0.02, "var {var} vs {v0}");

        let (_, _, p0) = dg_moments(0.01);
        assert!(p0 > 0.999);
        let zeros = (0..100_000)
            .filter(|_| sample_discrete_gaussian(0.01, &mut rng) == 0)
            .count();
        assert!(zeros >= 99_000);
    }

    #[test]
    fn z_scores_and_qq() {
        let cfg = scalar_config(1.0, NoiseKind::Gaussian, 1);
        let meas: Vec<_> = cfg
            .truth()
            .iter()
            .map(|b| VertexMeasurements::identity(b.clone(), 1.0).unwrap())
            .collect();
        let store = crate::twopass::run_two_pass(cfg.tree(), &meas).unwrap();
        let q = Vector::from_element(1, 1.0);
        let rq = RegionQuery::new(q, vec![3, 4], 0.05);
        let z = z_scores(&store, cfg.truth(), std::slice::from_ref(&rq)).unwrap();
        assert!(z[0].abs() < 1e-12);

        // shift the truth by one standard deviation
        let est = crate::query::estimate_query(&store, &rq).unwrap();
        let mut shifted = cfg.truth().to_vec();
        shifted[3][0] -= est.variance.sqrt();
        let z = z_scores(&store, &shifted, &[rq]).unwrap();
        assert!((z[0] - 1.0).abs() < 1e-12);

        assert_eq!(qq_export(&[0.0]).unwrap(), vec![(0.0, 0.0)]);
        let pairs = qq_export(&[1.5, -1.5]).unwrap();
        assert!((pairs[0].0 + pairs[1].0).abs() < 1e-12 && pairs[0].1 == -pairs[1].1);
        assert!(matches!(qq_export(&[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn clamping_never_lowers_coverage_of_zero_truth() {
        let tree = complete_tree(2, 1);
        let leaf_beta = vec![Vector::from_element(1, 0.0), Vector::from_element(1, 2.0)];
        let cfg = SimConfig::new(
            tree,
            vec![Matrix::from_element(1, 1, 1.0); 3],
            vec![NoiseVar::Diagonal(Vector::from_element(1, 1.0)); 3],
            &leaf_beta,
            NoiseKind::Gaussian,
            400,
            vec![0.1],
            1,
        )
        .unwrap();
        let q = SimQuery {
            id: "zero".into(),
            q: Vector::from_element(1, 1.0),
            leaves: vec![1],
        };
        let rep = coverage_experiment(&cfg, &[q]).unwrap();
        let raw = rep.row("zero", 0.1, false).unwrap().coverage;
        let clamped = rep.row("zero", 0.1, true).unwrap().coverage;
        assert!(clamped >= raw);
        assert_eq!(rep.z_scores.len(), 400);
    }

    #[test]
    fn config_errors() {
        let tree = complete_tree(2, 1);
        let lb = vec![Vector::from_element(1, 0.0); 2];
        let d = vec![Matrix::from_element(1, 1, 1.0); 3];
        let nz = vec![NoiseVar::Diagonal(Vector::from_element(1, 1.0)); 3];
        let mk = |reps, alphas: Vec<f64>| {
            SimConfig::new(tree.clone(), d.clone(), nz.clone(), &lb, NoiseKind::Gaussian, reps, alphas, 0)
        };
        assert!(matches!(mk(0, vec![0.1]), Err(Error::Config(_))));
        assert!(matches!(mk(1, vec![1.2]), Err(Error::Config(_))));
        assert!(matches!(
            SimConfig::new(tree.clone(), d.clone(), nz.clone(), &lb[..1], NoiseKind::Gaussian, 1, vec![], 0),
            Err(Error::Config(_))
        ));
        let full = vec![NoiseVar::Full(Matrix::from_element(1, 1, 1.0)); 3];
        assert!(matches!(
            SimConfig::new(tree, d, full, &lb, NoiseKind::DiscreteGaussian, 1, vec![], 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ks_of_perfect_grid_is_small() {
        let z: Vec<f64> = (0..1000)
            .map(|i| normal_quantile((i as f64 + 0.5) / 1000.0).unwrap())
            .collect();
        assert!(ks_statistic(&z).unwrap() <= 0.0005 + 1e-12);
    }
}
