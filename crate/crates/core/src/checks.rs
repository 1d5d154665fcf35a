//! PVT cross-authentication checks: clock-bias consistency across time
//! references and distance to an a-priori position.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::pvt::{ClockMode, PvtSolution};
use crate::{Error, Result, SPEED_OF_LIGHT};

/// Outcome of a check. `passed` means the PVT is accepted as legitimate.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckVerdict {
    /// Metric components, meters.
    pub metric: Vec<f64>,
    pub passed: bool,
}

/// Calibration of the inter-system consistency test for one constellation
/// against the reference constellation 1.
#[derive(Debug, Clone, PartialEq)]
pub struct IsbCheckConfig {
    /// Tolerance `T`, meters.
    pub threshold_m: f64,
    /// Calibrated receiver bias `b`, meters.
    pub calib_bias_m: f64,
    /// Reference inter-system bias `c * ISB`, meters.
    pub isb_ref_m: f64,
}

impl IsbCheckConfig {
    pub fn new(threshold_m: f64, calib_bias_m: f64, isb_ref_m: f64) -> Self {
        Self { threshold_m, calib_bias_m, isb_ref_m }
    }

    /// Signed gap `c (t2 - t1) - b - c ISB` from clock terms in meters.
    pub fn gap_m(&self, clk1_m: f64, clk2_m: f64) -> f64 {
        (clk2_m - clk1_m) - self.calib_bias_m - self.isb_ref_m
    }
}

/// Linear clock check `C p <= delta_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeCheckConfig {
    /// N_c x (3+M) selection matrix.
    pub c_matrix: DMatrix<f64>,
    /// Per-row bounds, meters.
    pub delta_t: DVector<f64>,
}

/// Selection matrix pairing the reference clock with each other clock:
/// rows `e_1 - e_k` and `e_k - e_1` for k = 2..=M, in that order.
pub fn isb_c_matrix(m: usize) -> DMatrix<f64> {
    let pairs = m.saturating_sub(1);
    let mut c = DMatrix::zeros(2 * pairs, 3 + m);
    for k in 0..pairs {
        c[(2 * k, 3)] = 1.0;
        c[(2 * k, 4 + k)] = -1.0;
        c[(2 * k + 1, 3)] = -1.0;
        c[(2 * k + 1, 4 + k)] = 1.0;
    }
    c
}

impl TimeCheckConfig {
    pub fn new(c_matrix: DMatrix<f64>, delta_t: DVector<f64>) -> Result<Self> {
        if c_matrix.nrows() != delta_t.len() {
            return Err(Error::DimensionMismatch(format!(
                "C has {} rows but delta_t has {} entries",
                c_matrix.nrows(),
                delta_t.len()
            )));
        }
        Ok(Self { c_matrix, delta_t })
    }

    /// ISB specialization. With row `e_1 - e_k` bounded by `T - b_k - ISB_k`
    /// and row `e_k - e_1` by `T + b_k + ISB_k`, the pair encodes
    /// `|(c t_k - c t_1) - b_k - c ISB_k| <= T`.
    pub fn isb(m: usize, per_constellation: &[IsbCheckConfig]) -> Result<Self> {
        if m < 2 || per_constellation.len() != m - 1 {
            return Err(Error::DimensionMismatch(format!("{} ISB calibrations for M = {m}", per_constellation.len())));
        }
        let mut delta = DVector::zeros(2 * (m - 1));
        for (k, cfg) in per_constellation.iter().enumerate() {
            let offset = cfg.calib_bias_m + cfg.isb_ref_m;
            delta[2 * k] = cfg.threshold_m - offset;
            delta[2 * k + 1] = cfg.threshold_m + offset;
        }
        Self::new(isb_c_matrix(m), delta)
    }
}

/// Evaluates `theta_t = C p` and accepts iff every component is within its
/// bound.
pub fn time_check(p: &PvtSolution, cfg: &TimeCheckConfig) -> Result<CheckVerdict> {
    let ClockMode::MultiRef { m } = p.mode else {
        return Err(Error::DimensionMismatch("time check needs a multi-reference solution".into()));
    };
    if cfg.c_matrix.ncols() != 3 + m {
        return Err(Error::DimensionMismatch(format!(
            "C has {} columns, solution has {} states",
            cfg.c_matrix.ncols(),
            3 + m
        )));
    }
    let theta = &cfg.c_matrix * p.state();
    let passed = theta.iter().zip(cfg.delta_t.iter()).all(|(t, d)| t <= d);
    Ok(CheckVerdict { metric: theta.iter().cloned().collect(), passed })
}

/// Scalar form of the inter-system check from clock biases in seconds.
/// The metric is `|c (t2 - t1) - b - c ISB|`.
pub fn isb_check(t1_s: f64, t2_s: f64, cfg: &IsbCheckConfig) -> CheckVerdict {
    let gap = cfg.gap_m(SPEED_OF_LIGHT * t1_s, SPEED_OF_LIGHT * t2_s).abs();
    CheckVerdict { metric: vec![gap], passed: gap <= cfg.threshold_m }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionCheckConfig {
    /// A-priori position, ECEF meters.
    pub p_ref: Vector3<f64>,
    /// Accepted distance, meters.
    pub delta_pos: f64,
}

impl PositionCheckConfig {
    pub fn new(p_ref: Vector3<f64>, delta_pos: f64) -> Result<Self> {
        if !(delta_pos >= 0.0) {
            return Err(Error::Domain(format!("delta_pos must be >= 0, got {delta_pos}")));
        }
        Ok(Self { p_ref, delta_pos })
    }
}

/// Euclidean distance of the solved position from the reference.
pub fn position_check(p: &PvtSolution, cfg: &PositionCheckConfig) -> CheckVerdict {
    let d = (p.pos - cfg.p_ref).norm();
    CheckVerdict { metric: vec![d], passed: d <= cfg.delta_pos }
}
