//! Per-vertex measurement model `y = S β + u` and the local GLS estimate.

use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Matrix, Vector};

/// Default variance attached to soft equality-constraint rows.
pub const DEFAULT_CONSTRAINT_VARIANCE: f64 = 1.0 / 16384.0;

/// Noise variance of one vertex's observations.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseVar {
    /// Independent entries; one variance per observation.
    Diagonal(Vector),
    /// Full m x m SPD covariance.
    Full(Matrix),
}

impl NoiseVar {
    pub fn len(&self) -> usize {
        match self {
            NoiseVar::Diagonal(d) => d.len(),
            NoiseVar::Full(m) => m.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scaled(&self, lambda: f64) -> Self {
        match self {
            NoiseVar::Diagonal(d) => NoiseVar::Diagonal(d * lambda),
            NoiseVar::Full(m) => NoiseVar::Full(m * lambda),
        }
    }

    pub fn to_dense(&self) -> Matrix {
        match self {
            NoiseVar::Diagonal(d) => Matrix::from_diagonal(d),
            NoiseVar::Full(m) => m.clone(),
        }
    }
}

/// Design matrix, observations and noise variance at one vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexMeasurements {
    design: Matrix,
    obs: Vector,
    noise: NoiseVar,
}

impl VertexMeasurements {
    /// Validates shapes and noise positivity. Rank is checked by [`local_gls`].
    pub fn new(design: Matrix, obs: Vector, noise: NoiseVar) -> Result<Self> {
        let (m, n) = design.shape();
        if n == 0 {
            return Err(Error::DimensionMismatch("design has no columns".into()));
        }
        if obs.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "design has {m} rows but {} observations",
                obs.len()
            )));
        }
        if noise.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "design has {m} rows but noise variance has dimension {}",
                noise.len()
            )));
        }
        if design.iter().chain(obs.iter()).any(|v| !v.is_finite()) {
            return Err(Error::DimensionMismatch(
                "design and observations must be finite".into(),
            ));
        }
        match &noise {
            NoiseVar::Diagonal(d) => {
                if let Some(i) = d.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
                    return Err(Error::NonSpdNoise(format!(
                        "diagonal variance entry {i} is {}",
                        d[i]
                    )));
                }
            }
            NoiseVar::Full(v) => {
                let asym = (v - v.transpose()).abs().max();
                let scale = v.abs().max();
                if !(asym <= 1e-12 * scale.max(f64::MIN_POSITIVE)) {
                    return Err(Error::NonSpdNoise("full variance is not symmetric".into()));
                }
            }
        }
        Ok(Self { design, obs, noise })
    }

    /// Identity design with a common diagonal variance: `S = I_n`.
    pub fn identity(obs: Vector, variance: f64) -> Result<Self> {
        let n = obs.len();
        Self::new(
            Matrix::identity(n, n),
            obs,
            NoiseVar::Diagonal(Vector::from_element(n, variance)),
        )
    }

    pub fn design(&self) -> &Matrix {
        &self.design
    }

    pub fn obs(&self) -> &Vector {
        &self.obs
    }

    pub fn noise(&self) -> &NoiseVar {
        &self.noise
    }

    /// Number of observations `m`.
    pub fn rows(&self) -> usize {
        self.design.nrows()
    }

    /// Block dimension `n`.
    pub fn cols(&self) -> usize {
        self.design.ncols()
    }

    pub fn with_obs(&self, obs: Vector) -> Result<Self> {
        Self::new(self.design.clone(), obs, self.noise.clone())
    }

    pub fn with_noise_scaled(&self, lambda: f64) -> Result<Self> {
        Self::new(self.design.clone(), self.obs.clone(), self.noise.scaled(lambda))
    }
}

/// GLS estimate from a single vertex's own observations.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalEstimate {
    pub beta: Vector,
    pub var: Matrix,
}

/// `β = (Sᵀ V⁻¹ S)⁻¹ Sᵀ V⁻¹ y`, `Var = (Sᵀ V⁻¹ S)⁻¹`.
pub fn local_gls(meas: &VertexMeasurements) -> Result<LocalEstimate> {
    let s = meas.design();
    let y = meas.obs();
    let n = meas.cols();
    if meas.rows() < n {
        return Err(Error::RankDeficientDesign { pivot: meas.rows(), dim: n });
    }

    let (gram, rhs) = match meas.noise() {
        NoiseVar::Diagonal(d) => {
            // O(m n²) accumulation with weights 1/d_i
            let mut gram = Matrix::zeros(n, n);
            let mut rhs = Vector::zeros(n);
            for (i, row) in s.row_iter().enumerate() {
                let w = 1.0 / d[i];
                for a in 0..n {
                    let ra = row[a] * w;
                    if ra == 0.0 {
                        continue;
                    }
                    rhs[a] += ra * y[i];
                    for b in 0..=a {
                        gram[(a, b)] += ra * row[b];
                    }
                }
            }
            for a in 0..n {
                for b in 0..a {
                    gram[(b, a)] = gram[(a, b)];
                }
            }
            (gram, rhs)
        }
        NoiseVar::Full(v) => {
            let ch = Cholesky::factor(v).map_err(|pivot| {
                Error::NonSpdNoise(format!("factorization failed at pivot {pivot}"))
            })?;
            let ws = ch.whiten_mat(s);
            let wy = ch.whiten_vec(y);
            (ws.transpose() * &ws, ws.transpose() * wy)
        }
    };

    let ch = Cholesky::factor(&gram)
        .map_err(|pivot| Error::RankDeficientDesign { pivot, dim: n })?;
    let var = ch.inverse();
    let beta = ch.solve_vec(&rhs);
    Ok(LocalEstimate { beta, var })
}

/// Append `C β ≈ c` as extra observations with variance `eps_var` each.
///
/// Full noise matrices are promoted to block-diagonal with the new rows.
pub fn add_soft_constraints(
    meas: &VertexMeasurements,
    constraints: &Matrix,
    targets: &Vector,
    eps_var: f64,
) -> Result<VertexMeasurements> {
    if !(eps_var > 0.0 && eps_var.is_finite()) {
        return Err(Error::OutOfDomain(format!(
            "constraint variance must be positive, got {eps_var}"
        )));
    }
    let k = constraints.nrows();
    if constraints.ncols() != meas.cols() {
        return Err(Error::DimensionMismatch(format!(
            "constraint matrix has {} columns, block dimension is {}",
            constraints.ncols(),
            meas.cols()
        )));
    }
    if targets.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "{k} constraint rows but {} targets",
            targets.len()
        )));
    }
    if k == 0 {
        return Ok(meas.clone());
    }
    let m = meas.rows();
    let n = meas.cols();

    let mut design = Matrix::zeros(m + k, n);
    design.rows_mut(0, m).copy_from(meas.design());
    design.rows_mut(m, k).copy_from(constraints);

    let mut obs = Vector::zeros(m + k);
    obs.rows_mut(0, m).copy_from(meas.obs());
    obs.rows_mut(m, k).copy_from(targets);

    let noise = match meas.noise() {
        NoiseVar::Diagonal(d) => {
            let mut nd = Vector::from_element(m + k, eps_var);
            nd.rows_mut(0, m).copy_from(d);
            NoiseVar::Diagonal(nd)
        }
        NoiseVar::Full(v) => {
            let mut nv = Matrix::zeros(m + k, m + k);
            nv.view_mut((0, 0), (m, m)).copy_from(v);
            for i in m..m + k {
                nv[(i, i)] = eps_var;
            }
            NoiseVar::Full(nv)
        }
    };
    VertexMeasurements::new(design, obs, noise)
}

/// Rank test alone, without computing the estimate.
pub fn check_design_rank(meas: &VertexMeasurements) -> Result<()> {
    local_gls(meas).map(|_| ())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(v: &[f64]) -> NoiseVar {
        NoiseVar::Diagonal(Vector::from_row_slice(v))
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn scalar_identity_design() {
        let m = VertexMeasurements::new(
            Matrix::from_row_slice(1, 1, &[1.0]),
            Vector::from_row_slice(&[3.0]),
            diag(&[2.0]),
        )
        .unwrap();
        let e = local_gls(&m).unwrap();
        assert!(close(e.beta[0], 3.0, 1e-15));
        assert!(close(e.var[(0, 0)], 2.0, 1e-15));
    }

    #[test]
    fn mean_of_two_observations() {
        let m = VertexMeasurements::new(
            Matrix::from_row_slice(2, 1, &[1.0, 1.0]),
            Vector::from_row_slice(&[1.0, 3.0]),
            diag(&[1.0, 1.0]),
        )
        .unwrap();
        let e = local_gls(&m).unwrap();
        assert!(close(e.beta[0], 2.0, 1e-15));
        assert!(close(e.var[(0, 0)], 0.5, 1e-15));
    }

    #[test]
    fn two_cells_with_total() {
        // SᵀS = [[2,1],[1,2]], Sᵀy = [4,4] -> β = [4/3, 4/3], Var = (1/3)[[2,-1],[-1,2]]
        let m = VertexMeasurements::new(
            Matrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]),
            Vector::from_row_slice(&[1.0, 1.0, 3.0]),
            diag(&[1.0, 1.0, 1.0]),
        )
        .unwrap();
        let e = local_gls(&m).unwrap();
        assert!(close(e.beta[0], 4.0 / 3.0, 1e-14));
        assert!(close(e.beta[1], 4.0 / 3.0, 1e-14));
        let expected = Matrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0]) / 3.0;
        assert!((e.var - expected).abs().max() < 1e-14);
    }

    #[test]
    fn full_noise_matches_diagonal_when_diagonal() {
        let s = Matrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let y = Vector::from_row_slice(&[1.0, 2.0, 4.0]);
        let d = [0.5, 2.0, 1.5];
        let a = local_gls(&VertexMeasurements::new(s.clone(), y.clone(), diag(&d)).unwrap())
            .unwrap();
        let full = NoiseVar::Full(Matrix::from_diagonal(&Vector::from_row_slice(&d)));
        let b = local_gls(&VertexMeasurements::new(s, y, full).unwrap()).unwrap();
        assert!((a.beta - b.beta).abs().max() < 1e-13);
        assert!((a.var - b.var).abs().max() < 1e-13);
    }

    #[test]
    fn identity_design_identity_noise() {
        let y = Vector::from_row_slice(&[1.5, -2.0, 7.0]);
        let e = local_gls(&VertexMeasurements::identity(y.clone(), 1.0).unwrap()).unwrap();
        assert_eq!(e.beta, y);
        assert_eq!(e.var, Matrix::identity(3, 3));
    }

    #[test]
    fn square_invertible_design_inverts_exactly() {
        let s = Matrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let y = Vector::from_row_slice(&[5.0, 10.0]);
        let v = Matrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
        let e = local_gls(
            &VertexMeasurements::new(s.clone(), y.clone(), NoiseVar::Full(v.clone())).unwrap(),
        )
        .unwrap();
        let sinv = s.clone().try_inverse().unwrap();
        assert!((&e.beta - &sinv * &y).abs().max() < 1e-10);
        let expected = &sinv * v * sinv.transpose();
        assert!((e.var - expected).abs().max() < 1e-10);
    }

    #[test]
    fn noise_scaling_equivariance() {
        let m = VertexMeasurements::new(
            Matrix::from_row_slice(3, 2, &[1.0, 0.5, 0.0, 1.0, 1.0, 1.0]),
            Vector::from_row_slice(&[1.0, 2.0, 2.5]),
            diag(&[1.0, 3.0, 0.7]),
        )
        .unwrap();
        let a = local_gls(&m).unwrap();
        let lambda = 7.5;
        let b = local_gls(&m.with_noise_scaled(lambda).unwrap()).unwrap();
        assert!((&a.beta - &b.beta).abs().max() <= 1e-10 * a.beta.abs().max());
        assert!((a.var * lambda - &b.var).abs().max() <= 1e-10 * b.var.abs().max());
    }

    #[test]
    fn rank_deficient_and_bad_noise() {
        let m = VertexMeasurements::new(
            Matrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]),
            Vector::from_row_slice(&[1.0, 2.0]),
            diag(&[1.0, 1.0]),
        )
        .unwrap();
        assert!(matches!(
            local_gls(&m),
            Err(Error::RankDeficientDesign { .. })
        ));

        let short = VertexMeasurements::new(
            Matrix::from_row_slice(1, 2, &[1.0, 1.0]),
            Vector::from_row_slice(&[1.0]),
            diag(&[1.0]),
        )
        .unwrap();
        assert!(matches!(
            local_gls(&short),
            Err(Error::RankDeficientDesign { .. })
        ));

        assert!(matches!(
            VertexMeasurements::new(
                Matrix::identity(2, 2),
                Vector::zeros(2),
                diag(&[1.0, 0.0]),
            ),
            Err(Error::NonSpdNoise(_))
        ));

        let indefinite = VertexMeasurements::new(
            Matrix::identity(2, 2),
            Vector::zeros(2),
            NoiseVar::Full(Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])),
        )
        .unwrap();
        assert!(matches!(local_gls(&indefinite), Err(Error::NonSpdNoise(_))));
    }

    #[test]
    fn shape_errors() {
        assert!(matches!(
            VertexMeasurements::new(Matrix::identity(2, 2), Vector::zeros(3), diag(&[1.0, 1.0])),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(matches!(
            VertexMeasurements::new(Matrix::identity(2, 2), Vector::zeros(2), diag(&[1.0])),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn soft_constraint_appends_row() {
        let base = VertexMeasurements::identity(Vector::from_row_slice(&[4.0, 5.0]), 1.0).unwrap();
        let c = Matrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let out = add_soft_constraints(
            &base,
            &c,
            &Vector::from_row_slice(&[10.0]),
            DEFAULT_CONSTRAINT_VARIANCE,
        )
        .unwrap();
        assert_eq!(out.rows(), 3);
        match out.noise() {
            NoiseVar::Diagonal(d) => assert_eq!(d[2], 1.0 / 16384.0),
            _ => panic!("diagonal noise expected"),
        }
        assert_eq!(out.obs()[2], 10.0);
    }

    #[test]
    fn empty_constraint_set_is_identity() {
        let base = VertexMeasurements::identity(Vector::from_row_slice(&[4.0, 5.0]), 1.0).unwrap();
        let out = add_soft_constraints(&base, &Matrix::zeros(0, 2), &Vector::zeros(0), 1e-3)
            .unwrap();
        assert_eq!(out, base);
    }

    #[test]
    fn tight_constraint_pins_coordinate() {
        // mean-of-two example with an extra observation column so n=2:
        // rows [1,0],[1,0],[0,1] with y = [1,3,2]; pin β0 = 5
        let base = VertexMeasurements::new(
            Matrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]),
            Vector::from_row_slice(&[1.0, 3.0, 2.0]),
            diag(&[1.0, 1.0, 1.0]),
        )
        .unwrap();
        let pinned = add_soft_constraints(
            &base,
            &Matrix::from_row_slice(1, 2, &[1.0, 0.0]),
            &Vector::from_row_slice(&[5.0]),
            1e-6,
        )
        .unwrap();
        let e = local_gls(&pinned).unwrap();
        // precision-weighted: (1 + 3 + 5e6) / (2 + 1e6)
        let expected = (4.0 + 5.0e6) / (2.0 + 1.0e6);
        assert!(close(e.beta[0], expected, 1e-9));
        assert!(close(e.beta[0], 5.0, 1e-4));
    }

    #[test]
    fn soft_constraint_promotes_full_noise() {
        let base = VertexMeasurements::new(
            Matrix::identity(2, 2),
            Vector::from_row_slice(&[1.0, 2.0]),
            NoiseVar::Full(Matrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])),
        )
        .unwrap();
        let out = add_soft_constraints(
            &base,
            &Matrix::from_row_slice(1, 2, &[1.0, 1.0]),
            &Vector::from_row_slice(&[3.0]),
            0.25,
        )
        .unwrap();
        let NoiseVar::Full(v) = out.noise() else {
            panic!("full noise expected")
        };
        assert_eq!(v[(2, 2)], 0.25);
        assert_eq!(v[(0, 2)], 0.0);
        assert_eq!(v[(0, 1)], 0.5);
    }

    #[test]
    fn soft_constraint_errors() {
        let base = VertexMeasurements::identity(Vector::from_row_slice(&[4.0, 5.0]), 1.0).unwrap();
        assert!(matches!(
            add_soft_constraints(&base, &Matrix::zeros(1, 3), &Vector::zeros(1), 1.0),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(matches!(
            add_soft_constraints(&base, &Matrix::zeros(1, 2), &Vector::zeros(2), 1.0),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(add_soft_constraints(&base, &Matrix::zeros(1, 2), &Vector::zeros(1), 0.0).is_err());
    }
}
