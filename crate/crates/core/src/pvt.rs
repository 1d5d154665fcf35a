//! Iterative linearized least-squares PVT solver.
//!
//! Pseudorange model (clock states in meters):
//!
//! ```text
//! r_j = |p_sat_j - p| + c * t_sat_j + b_rx(k_j) + D_atm_j
//! ```
//!
//! where `b_rx(k)` is the receiver clock term of constellation `k`: its own
//! state in multi-reference mode, or `b_1 + c * ISB_k` in single-reference
//! mode with known inter-system biases. The receiver term enters with a plus
//! sign so that the clock columns of G are exactly +1 and a common range
//! delay `c * gamma` moves the solved clock by `+gamma`.

use nalgebra::{DVector, Vector3};

use crate::attacks::TamperVector;
use crate::geometry::{build_geometry, GeometrySet};
use crate::scenario::{Epoch, SatelliteObservation};
use crate::{Error, Result, SPEED_OF_LIGHT};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockMode {
    /// One clock bias per constellation time reference.
    MultiRef { m: usize },
    /// A single clock bias; other constellations related through known ISBs.
    SingleRef,
}

impl ClockMode {
    pub fn clock_count(&self) -> usize {
        match self {
            ClockMode::MultiRef { m } => *m,
            ClockMode::SingleRef => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PvtSolution {
    pub pos: Vector3<f64>,
    /// Receiver clock terms `c * t`, meters.
    pub clocks_m: Vec<f64>,
    pub mode: ClockMode,
}

impl PvtSolution {
    pub fn multi_ref(pos: Vector3<f64>, clocks_m: Vec<f64>) -> Self {
        let m = clocks_m.len();
        Self { pos, clocks_m, mode: ClockMode::MultiRef { m } }
    }

    pub fn single_ref(pos: Vector3<f64>, clock_m: f64) -> Self {
        Self { pos, clocks_m: vec![clock_m], mode: ClockMode::SingleRef }
    }

    /// ECEF origin with zero clocks.
    pub fn cold_start(mode: ClockMode) -> Self {
        Self { pos: Vector3::zeros(), clocks_m: vec![0.0; mode.clock_count()], mode }
    }

    /// State vector `[x, y, z, c t_1, ...]`.
    pub fn state(&self) -> DVector<f64> {
        DVector::from_iterator(3 + self.clocks_m.len(), self.pos.iter().chain(&self.clocks_m).cloned())
    }

    pub fn from_state(mode: ClockMode, state: &DVector<f64>) -> Result<Self> {
        if state.len() != 3 + mode.clock_count() {
            return Err(Error::LengthMismatch { expected: 3 + mode.clock_count(), got: state.len() });
        }
        Ok(Self {
            pos: Vector3::new(state[0], state[1], state[2]),
            clocks_m: state.iter().skip(3).cloned().collect(),
            mode,
        })
    }

    /// Clock bias of reference `i` (0-based) in seconds.
    pub fn clock_s(&self, i: usize) -> f64 {
        self.clocks_m[i] / SPEED_OF_LIGHT
    }

    pub fn is_finite(&self) -> bool {
        self.pos.iter().chain(&self.clocks_m).all(|v| v.is_finite())
    }

    /// Receiver clock term (meters) applied to a satellite of `constellation`.
    pub fn receiver_clock_m(&self, constellation: usize, isb_s: &[f64]) -> f64 {
        match self.mode {
            ClockMode::MultiRef { .. } => self.clocks_m[constellation - 1],
            ClockMode::SingleRef => {
                let isb = if constellation >= 2 { isb_s.get(constellation - 2).copied().unwrap_or(0.0) } else { 0.0 };
                self.clocks_m[0] + SPEED_OF_LIGHT * isb
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Stop once the update norm drops below this, meters.
    pub convergence_eps: f64,
    /// ISBs of constellations 2..=M against 1, seconds (single-ref mode).
    pub isb_known: Option<Vec<f64>>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { max_iters: 20, convergence_eps: 1e-8, isb_known: None }
    }
}

impl SolverConfig {
    pub fn with_isb(isb_s: Vec<f64>) -> Self {
        Self { isb_known: Some(isb_s), ..Self::default() }
    }

    fn isb(&self) -> &[f64] {
        self.isb_known.as_deref().unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub solution: PvtSolution,
    pub iterations: usize,
    /// Range residuals `r - r_hat` at the final solution, meters.
    pub final_residuals: DVector<f64>,
    pub converged: bool,
    /// Norm of the last applied update.
    pub last_step: f64,
    /// Geometry at the final solution.
    pub geometry: GeometrySet,
}

/// Error-free sum: `a + b == s + e` exactly.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Geometric range `|sat - rx|` as an unevaluated sum `hi + lo`.
///
/// Plain evaluation is off by a few ulp, i.e. several nanometers at
/// satellite distances, which is the size of the solver's default stopping
/// threshold; the compensated form keeps the residual floor well below it.
fn range_split(sat: &Vector3<f64>, rx: &Vector3<f64>) -> (f64, f64) {
    let (mut s_hi, mut s_lo) = (0.0, 0.0);
    for i in 0..3 {
        let (d, d_lo) = two_sum(sat[i], -rx[i]);
        let sq = d * d;
        let (t, e) = two_sum(s_hi, sq);
        s_hi = t;
        s_lo += e + d.mul_add(d, -sq) + 2.0 * d * d_lo;
    }
    let (s_hi, s_lo) = two_sum(s_hi, s_lo);
    let rho = s_hi.sqrt();
    if rho == 0.0 {
        return (0.0, 0.0);
    }
    (rho, ((-rho).mul_add(rho, s_hi) + s_lo) / (2.0 * rho))
}

/// Non-geometric part of the prediction: satellite clock, receiver clock
/// term and atmospheric delay, meters.
fn clock_and_delay_m(obs: &SatelliteObservation, est: &PvtSolution, isb_s: &[f64]) -> f64 {
    SPEED_OF_LIGHT * obs.sat_clock_bias_s + est.receiver_clock_m(obs.constellation, isb_s) + obs.atmo_delay_m
}

/// Predicted pseudorange of `obs` for receiver state `est` (no noise).
pub fn predict_pseudorange(obs: &SatelliteObservation, est: &PvtSolution, isb_s: &[f64]) -> f64 {
    let (hi, lo) = range_split(&obs.pos_ecef, &est.pos);
    hi + (lo + clock_and_delay_m(obs, est, isb_s))
}

fn check_solvable(epoch: &Epoch, mode: ClockMode, isb_s: &[f64]) -> Result<()> {
    let n = epoch.n();
    match mode {
        ClockMode::MultiRef { m } => {
            if n < 3 + m {
                return Err(Error::DegenerateGeometry(format!("{n} satellites for {} unknowns", 3 + m)));
            }
            let counts = epoch.constellation_counts(m);
            if let Some(k) = counts.iter().position(|&c| c == 0) {
                return Err(Error::DegenerateGeometry(format!("no satellite from constellation {}", k + 1)));
            }
            if let Some(o) = epoch.observations.iter().find(|o| !(1..=m).contains(&o.constellation)) {
                return Err(Error::DimensionMismatch(format!(
                    "satellite {} in constellation {} but the state has {m} clocks",
                    o.sat_id, o.constellation
                )));
            }
        }
        ClockMode::SingleRef => {
            if n < 4 {
                return Err(Error::DegenerateGeometry(format!("{n} satellites for 4 unknowns")));
            }
            if let Some(o) =
                epoch.observations.iter().find(|o| o.constellation < 1 || o.constellation - 1 > isb_s.len())
            {
                return Err(Error::DimensionMismatch(format!(
                    "satellite {} in constellation {} needs a known ISB ({} given)",
                    o.sat_id,
                    o.constellation,
                    isb_s.len()
                )));
            }
        }
    }
    Ok(())
}

fn residuals(epoch: &Epoch, est: &PvtSolution, isb_s: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        epoch.n(),
        epoch.observations.iter().map(|o| {
            let (hi, lo) = range_split(&o.pos_ecef, &est.pos);
            (o.pseudorange_m - hi) - (lo + clock_and_delay_m(o, est, isb_s))
        }),
    )
}

/// Solves the PVT of `epoch` starting from `initial`, iterating
/// `p <- p + H (r - r_hat)` until the update norm falls below
/// `cfg.convergence_eps` or `cfg.max_iters` updates have been applied.
/// Hitting the iteration cap is reported through `converged = false`.
pub fn solve(epoch: &Epoch, initial: &PvtSolution, cfg: &SolverConfig) -> Result<SolveReport> {
    if cfg.max_iters < 1 || !(cfg.convergence_eps > 0.0) {
        return Err(Error::Domain("max_iters must be >= 1 and convergence_eps > 0".into()));
    }
    if !initial.is_finite() {
        return Err(Error::Domain("initial solution is not finite".into()));
    }
    let isb_s = cfg.isb();
    check_solvable(epoch, initial.mode, isb_s)?;

    let mut est = initial.clone();
    let mut state = est.state();
    let mut iterations = 0;
    let mut converged = false;
    let mut last_step = f64::INFINITY;
    while iterations < cfg.max_iters {
        let geom = build_geometry(epoch, &est)?;
        let dp = &geom.h * residuals(epoch, &est, isb_s);
        state += &dp;
        est = PvtSolution::from_state(est.mode, &state)?;
        iterations += 1;
        last_step = dp.norm();
        if !last_step.is_finite() {
            return Err(Error::DegenerateGeometry("solver diverged".into()));
        }
        if last_step < cfg.convergence_eps {
            converged = true;
            break;
        }
    }
    let geometry = build_geometry(epoch, &est)?;
    let final_residuals = residuals(epoch, &est, isb_s);
    Ok(SolveReport { solution: est, iterations, final_residuals, converged, last_step, geometry })
}

/// Adds the tamper vector to the pseudoranges (`r_j += delta_r_j`).
pub fn apply_tamper(epoch: &Epoch, tamper: &TamperVector) -> Result<Epoch> {
    if tamper.delta_r.len() != epoch.n() {
        return Err(Error::LengthMismatch { expected: epoch.n(), got: tamper.delta_r.len() });
    }
    let mut out = epoch.clone();
    for (obs, d) in out.observations.iter_mut().zip(tamper.delta_r.iter()) {
        obs.pseudorange_m += d;
    }
    Ok(out)
}
