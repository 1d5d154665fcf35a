//! Geometry and least-squares matrices, their authenticated/open partition,
//! null-space bases and dilution-of-precision figures.
//!
//! Row `j` of G holds the gradient of the predicted pseudorange of satellite
//! `j` with respect to the PVT state: `(p_hat - p_sat_j) / rho_hat_j` for the
//! position and a 1 in the clock column of the satellite's time reference.

use nalgebra::{DMatrix, DVector, Matrix3, SVD};

use crate::pvt::{ClockMode, PvtSolution};
use crate::scenario::Epoch;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GeometrySet {
    /// N x (3 + clocks) geometry matrix.
    pub g: DMatrix<f64>,
    /// (3 + clocks) x N least-squares matrix, the pseudoinverse of `g`.
    pub h: DMatrix<f64>,
    /// First `n_auth` columns of `h`.
    pub h_auth: DMatrix<f64>,
    /// Remaining columns of `h`.
    pub h_open: DMatrix<f64>,
    pub n_auth: usize,
    pub mode: ClockMode,
}

impl GeometrySet {
    pub fn from_matrix(g: DMatrix<f64>, n_auth: usize, mode: ClockMode) -> Result<Self> {
        if n_auth > g.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{n_auth} authenticated rows in a {}-row geometry",
                g.nrows()
            )));
        }
        if g.ncols() != 3 + mode.clock_count() {
            return Err(Error::DimensionMismatch(format!(
                "geometry has {} columns, mode needs {}",
                g.ncols(),
                3 + mode.clock_count()
            )));
        }
        let h = pseudoinverse(&g)?;
        let h_auth = h.columns(0, n_auth).into_owned();
        let h_open = h.columns(n_auth, h.ncols() - n_auth).into_owned();
        Ok(Self { g, h, h_auth, h_open, n_auth, mode })
    }

    pub fn n(&self) -> usize {
        self.g.nrows()
    }

    pub fn n_open(&self) -> usize {
        self.n() - self.n_auth
    }

    pub fn state_dim(&self) -> usize {
        self.g.ncols()
    }

    pub fn g_auth(&self) -> DMatrix<f64> {
        self.g.rows(0, self.n_auth).into_owned()
    }

    pub fn g_open(&self) -> DMatrix<f64> {
        self.g.rows(self.n_auth, self.n_open()).into_owned()
    }
}

/// Builds G and H for `epoch` linearized at `lin`. The clock layout follows
/// `lin.mode`.
pub fn build_geometry(epoch: &Epoch, lin: &PvtSolution) -> Result<GeometrySet> {
    let n = epoch.n();
    let cols = 3 + lin.mode.clock_count();
    let mut g = DMatrix::zeros(n, cols);
    for (j, obs) in epoch.observations.iter().enumerate() {
        let d = lin.pos - obs.pos_ecef;
        let rho = d.norm();
        if !(rho > 0.0) {
            return Err(Error::DegenerateGeometry(format!(
                "linearization point coincides with satellite {}",
                obs.sat_id
            )));
        }
        for a in 0..3 {
            g[(j, a)] = d[a] / rho;
        }
        match lin.mode {
            ClockMode::SingleRef => g[(j, 3)] = 1.0,
            ClockMode::MultiRef { m } => {
                if !(1..=m).contains(&obs.constellation) {
                    return Err(Error::DimensionMismatch(format!(
                        "satellite {} is in constellation {} but the state has {m} clocks",
                        obs.sat_id, obs.constellation
                    )));
                }
                g[(j, 3 + obs.constellation - 1)] = 1.0;
            }
        }
    }
    GeometrySet::from_matrix(g, epoch.n_auth(), lin.mode)
}

/// Default rank threshold: `max(rows, cols) * eps * sigma_max`.
pub fn rank_tolerance(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * sigma_max
}

fn max_singular(svd: &SVD<f64, nalgebra::Dyn, nalgebra::Dyn>) -> f64 {
    svd.singular_values.iter().cloned().fold(0.0, f64::max)
}

/// Moore-Penrose pseudoinverse `(G^T G)^-1 G^T` of a full-column-rank
/// matrix, evaluated through the SVD rather than the normal equations.
pub fn pseudoinverse(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (rows, cols) = g.shape();
    if rows < cols || cols == 0 {
        return Err(Error::DegenerateGeometry(format!("{rows}x{cols} matrix cannot have full column rank")));
    }
    let svd = SVD::new(g.clone(), true, true);
    let smax = max_singular(&svd);
    let tol = rank_tolerance(rows, cols, smax);
    if smax == 0.0 || svd.singular_values.iter().any(|&s| s <= tol) {
        return Err(Error::DegenerateGeometry(format!(
            "rank-deficient {rows}x{cols} geometry (singular values {:?})",
            svd.singular_values.as_slice()
        )));
    }
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let inv_s = DMatrix::from_diagonal(&svd.singular_values.map(|s| 1.0 / s));
    Ok(v_t.transpose() * inv_s * u.transpose())
}

/// Minimum-norm least-squares solution of `a x = b` with rank truncation at
/// the default tolerance. Returns the solution and the numerical rank.
pub fn min_norm_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, usize)> {
    let (rows, cols) = a.shape();
    if b.len() != rows {
        return Err(Error::DimensionMismatch(format!("rhs has {} rows, matrix {rows}", b.len())));
    }
    if rows == 0 || cols == 0 {
        return Ok((DVector::zeros(cols), 0));
    }
    let svd = SVD::new(a.clone(), true, true);
    let tol = rank_tolerance(rows, cols, max_singular(&svd));
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let mut x = DVector::zeros(cols);
    let mut rank = 0;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            rank += 1;
            let coef = u.column(i).dot(b) / s;
            x += v_t.row(i).transpose() * coef;
        }
    }
    Ok((x, rank))
}

/// Numerical rank at the default tolerance.
pub fn rank(a: &DMatrix<f64>) -> usize {
    if a.is_empty() {
        return 0;
    }
    let sv = a.clone().singular_values();
    let tol = rank_tolerance(a.nrows(), a.ncols(), sv.iter().cloned().fold(0.0, f64::max));
    sv.iter().filter(|&&s| s > tol).count()
}

/// Orthonormal basis of a null space, one basis vector per column.
#[derive(Debug, Clone, PartialEq)]
pub struct NullSpaceBasis {
    pub vectors: DMatrix<f64>,
    pub k: usize,
    /// Singular values at or below this were treated as zero.
    pub tol: f64,
}

/// Orthonormal basis of `N(a)` from the right singular vectors whose
/// singular values fall at or below `tol` (default: [`rank_tolerance`]).
pub fn null_space(a: &DMatrix<f64>, tol: Option<f64>) -> NullSpaceBasis {
    let (rows, cols) = a.shape();
    // Zero rows leave the null space alone and make the SVD return a full V.
    let padded = if rows < cols {
        let mut p = DMatrix::zeros(cols, cols);
        p.rows_mut(0, rows).copy_from(a);
        p
    } else {
        a.clone()
    };
    let svd = SVD::new(padded, false, true);
    let tol = tol.unwrap_or_else(|| rank_tolerance(rows, cols, max_singular(&svd)));
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let idx: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] <= tol).collect();
    let mut vectors = DMatrix::zeros(cols, idx.len());
    for (c, &i) in idx.iter().enumerate() {
        vectors.set_column(c, &v_t.row(i).transpose());
    }
    NullSpaceBasis { k: idx.len(), vectors, tol }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dop {
    pub gdop: f64,
    pub pdop: f64,
    pub hdop: f64,
    pub vdop: f64,
    pub tdop: f64,
    /// `sigma_l * sqrt(diag((G^T G)^-1))`: East, North, Up, then the clock
    /// term(s), meters.
    pub sigmas: Vec<f64>,
}

/// Dilution of precision from `(G^T G)^-1`. When `enu` is given, the
/// position columns are first rotated into that local frame so the per-axis
/// figures read East/North/Up.
pub fn dop(g: &DMatrix<f64>, sigma_l: f64, enu: Option<&Matrix3<f64>>) -> Result<Dop> {
    if g.ncols() < 4 || g.nrows() < g.ncols() {
        return Err(Error::DegenerateGeometry(format!("{}x{} geometry", g.nrows(), g.ncols())));
    }
    let mut g = g.clone();
    if let Some(r) = enu {
        let pos = g.columns(0, 3) * r.transpose();
        g.columns_mut(0, 3).copy_from(&pos);
    }
    let normal = g.transpose() * &g;
    let cov =
        normal.cholesky().ok_or_else(|| Error::DegenerateGeometry("G^T G is not positive definite".into()))?.inverse();
    let d: Vec<f64> = cov.diagonal().iter().cloned().collect();
    let clock: f64 = d[3..].iter().sum();
    Ok(Dop {
        gdop: d.iter().sum::<f64>().sqrt(),
        pdop: (d[0] + d[1] + d[2]).sqrt(),
        hdop: (d[0] + d[1]).sqrt(),
        vdop: d[2].sqrt(),
        tdop: clock.sqrt(),
        sigmas: d.iter().map(|v| sigma_l * v.sqrt()).collect(),
    })
}
