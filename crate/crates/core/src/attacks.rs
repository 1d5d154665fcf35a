//! Pseudorange tampering synthesizers.
//!
//! All tamper vectors are in meters, ordered like the epoch (authenticated
//! satellites first). Open ranges can be forged freely; authenticated ranges
//! can only be delayed by relaying.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector, Vector3};

use crate::checks::isb_c_matrix;
use crate::geometry::{build_geometry, min_norm_solve, null_space, rank, GeometrySet, NullSpaceBasis};
use crate::pvt::{apply_tamper, solve, ClockMode, PvtSolution, SolverConfig};
use crate::scenario::Epoch;
use crate::{Error, Result, SPEED_OF_LIGHT};

/// Above this target displacement the linear synthesis loses accuracy.
pub const LINEAR_RANGE_WARN_M: f64 = 10_000.0;

const AUTH_SNAP_M: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum AttackPlan {
    /// Move the PVT to `p_target` without disturbing the clock check.
    TimeTargeted { p_target: PvtSolution },
    /// Relay every signal with delay `gamma_t_s`, spending `xi` meters of
    /// position slack.
    PositionRelay { gamma_t_s: f64, xi: Vector3<f64> },
    /// Forge open signals so that the clock moves by `gamma_t_s` while the
    /// authenticated ranges stay untouched.
    PositionGeneration { gamma_t_s: f64 },
}

impl AttackPlan {
    /// Clock mode the attacker synthesizes in.
    pub fn native_mode(&self, m: usize) -> ClockMode {
        match self {
            AttackPlan::TimeTargeted { .. } => ClockMode::MultiRef { m },
            _ => ClockMode::SingleRef,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TamperKind {
    /// Forged open signals; authenticated components are exactly zero.
    Generation,
    /// Every signal delayed by the same amount.
    Relay,
    /// Relayed signals with per-satellite delays (relay with nonzero
    /// position slack).
    SelectiveDelay,
}

impl TamperKind {
    /// True when the tampered signals pass through the attacker's receiver
    /// and pick up its noise.
    pub fn is_relayed(&self) -> bool {
        !matches!(self, TamperKind::Generation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TamperVector {
    pub delta_r: DVector<f64>,
    pub kind: TamperKind,
}

impl TamperVector {
    pub fn zeros(n: usize, kind: TamperKind) -> Self {
        Self { delta_r: DVector::zeros(n), kind }
    }

    /// Satellites whose ranges carry attacker receiver noise.
    pub fn relayed_mask(&self) -> Vec<bool> {
        vec![self.kind.is_relayed(); self.delta_r.len()]
    }
}

/// Affine set of open-range tampers `particular + span(basis)` that move the
/// check metric by a prescribed amount.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibleSpace {
    /// Minimum-norm N_O-vector solving `C H_O x = delta'`.
    pub particular: DVector<f64>,
    /// Orthonormal basis of `N(C H_O)`.
    pub basis: NullSpaceBasis,
    pub dim: usize,
}

/// Tampers on the open ranges whose induced metric displacement
/// `C H_O x` equals `delta_prime`.
pub fn feasible_space(
    geom: &GeometrySet,
    c_matrix: &DMatrix<f64>,
    delta_prime: &DVector<f64>,
) -> Result<FeasibleSpace> {
    if c_matrix.ncols() != geom.state_dim() || c_matrix.nrows() != delta_prime.len() {
        return Err(Error::DimensionMismatch(format!(
            "C is {}x{}, state has {} entries, delta' has {}",
            c_matrix.nrows(),
            c_matrix.ncols(),
            geom.state_dim(),
            delta_prime.len()
        )));
    }
    let m = geom.mode.clock_count();
    if geom.n_open() < m {
        return Err(Error::RankDeficient(format!("{} open signals for {m} time references", geom.n_open())));
    }
    let a = c_matrix * &geom.h_open;
    let (rank_a, rank_c) = (rank(&a), rank(c_matrix));
    if rank_a != rank_c {
        return Err(Error::RankDeficient(format!("rank(C H_O) = {rank_a} but rank(C) = {rank_c}")));
    }
    let (particular, _) = min_norm_solve(&a, delta_prime)?;
    let residual = (&a * &particular - delta_prime).norm();
    if residual > 1e-9 * delta_prime.norm().max(1.0) {
        return Err(Error::Infeasible(format!("metric displacement outside range(C H_O), residual {residual:.3e} m")));
    }
    let basis = null_space(&a, None);
    Ok(FeasibleSpace { particular, dim: basis.k, basis })
}

/// Lifts open-coordinate vectors to full N-vectors (zeros on authenticated rows).
fn embed_open(geom: &GeometrySet, open: &DMatrix<f64>) -> DMatrix<f64> {
    let mut full = DMatrix::zeros(geom.n(), open.ncols());
    full.rows_mut(geom.n_auth, geom.n_open()).copy_from(open);
    full
}

struct Projection {
    u: DMatrix<f64>,
    hu: DMatrix<f64>,
    particular: DVector<f64>,
    rhs: DVector<f64>,
}

fn projection(
    geom: &GeometrySet,
    space: &FeasibleSpace,
    dp_target: &DVector<f64>,
    dp_legit: &DVector<f64>,
) -> Result<Projection> {
    let dim = geom.state_dim();
    if dp_target.len() != dim || dp_legit.len() != dim {
        return Err(Error::DimensionMismatch(format!("displacements must have {dim} entries")));
    }
    if space.particular.len() != geom.n_open() || space.basis.vectors.nrows() != geom.n_open() {
        return Err(Error::DimensionMismatch("feasible space does not match the geometry".into()));
    }
    let u = embed_open(geom, &space.basis.vectors);
    let particular = embed_open(geom, &DMatrix::from_column_slice(geom.n_open(), 1, space.particular.as_slice()))
        .column(0)
        .into_owned();
    let hu = &geom.h * &u;
    let rhs = dp_target - dp_legit - &geom.h * &particular;
    Ok(Projection { u, hu, particular, rhs })
}

/// Feasible tamper whose induced displacement `H dr` best matches
/// `dp_target - dp_legit`, from the normal equations
/// `alpha = (U^T H^T H U)^-1 U^T H^T (dp_target - dp_legit - H dr_p)`.
pub fn time_attack_exact(
    geom: &GeometrySet,
    space: &FeasibleSpace,
    dp_target: &DVector<f64>,
    dp_legit: &DVector<f64>,
) -> Result<TamperVector> {
    let pr = projection(geom, space, dp_target, dp_legit)?;
    let k = pr.u.ncols();
    let mut delta_r = pr.particular.clone();
    if k > 0 {
        if rank(&pr.hu) < k {
            return Err(Error::SingularProjection(format!("H U has rank {} < {k}", rank(&pr.hu))));
        }
        let normal = pr.hu.transpose() * &pr.hu;
        let chol = normal
            .cholesky()
            .ok_or_else(|| Error::SingularProjection("U^T H^T H U is not positive definite".into()))?;
        let alpha = chol.solve(&(pr.hu.transpose() * &pr.rhs));
        delta_r += &pr.u * alpha;
    }
    Ok(TamperVector { delta_r, kind: TamperKind::Generation })
}

/// Least-squares member of the feasible space: minimizes
/// `|H dr - (dp_target - dp_legit)|` over `dr` in the space.
pub fn time_attack_minimize(
    geom: &GeometrySet,
    space: &FeasibleSpace,
    dp_target: &DVector<f64>,
    dp_legit: &DVector<f64>,
) -> Result<TamperVector> {
    let pr = projection(geom, space, dp_target, dp_legit)?;
    let mut delta_r = pr.particular.clone();
    if pr.u.ncols() > 0 {
        let (alpha, _) = min_norm_solve(&pr.hu, &pr.rhs)?;
        delta_r += &pr.u * alpha;
    }
    Ok(TamperVector { delta_r, kind: TamperKind::Generation })
}

/// Relay tamper `c gamma_t 1 + G_pos xi`: a common delay plus per-satellite
/// delays that move the solution by `xi`.
pub fn relay_attack_position(geom: &GeometrySet, gamma_t_s: f64, xi: &Vector3<f64>) -> TamperVector {
    let common = SPEED_OF_LIGHT * gamma_t_s;
    let slack = geom.g.columns(0, 3) * xi;
    let delta_r = slack.map(|s| s + common);
    let kind = if *xi == Vector3::zeros() { TamperKind::Relay } else { TamperKind::SelectiveDelay };
    TamperVector { delta_r, kind }
}

/// Forged tamper moving every clock state by `c gamma_t` with no position
/// change and zero authenticated components: `dr = c gamma_t 1 + U beta`,
/// with `U` spanning `N(H)` and `beta` the minimum-norm solution of
/// `U_A beta = -c gamma_t 1`.
pub fn generation_attack_position(geom: &GeometrySet, gamma_t_s: f64, n_auth: usize) -> Result<TamperVector> {
    if n_auth != geom.n_auth {
        return Err(Error::DimensionMismatch(format!("n_auth {n_auth} but geometry has {}", geom.n_auth)));
    }
    let n = geom.n();
    let common = SPEED_OF_LIGHT * gamma_t_s;
    let null = null_space(&geom.h, None);
    let u_auth = null.vectors.rows(0, n_auth).into_owned();
    let rhs = DVector::from_element(n_auth, -common);
    let (beta, _) = min_norm_solve(&u_auth, &rhs)?;
    let residual = (&u_auth * &beta - &rhs).norm();
    if residual > 1e-9 * common.abs().max(1.0) {
        return Err(Error::Infeasible(format!(
            "cannot zero the {n_auth} authenticated ranges with {} open signals; \
             a generation attack needs N_O >= 4 and a full-rank authenticated null-space block",
            geom.n_open()
        )));
    }
    let mut delta_r = DVector::from_element(n, common) + &null.vectors * beta;
    for j in 0..n_auth {
        if delta_r[j].abs() >= AUTH_SNAP_M {
            return Err(Error::Infeasible(format!("authenticated component {j} is {:.3e} m", delta_r[j])));
        }
        delta_r[j] = 0.0;
    }
    Ok(TamperVector { delta_r, kind: TamperKind::Generation })
}

/// Inputs the attacker needs beyond the plan.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackContext {
    /// Constellation count.
    pub m: usize,
    /// ISBs against constellation 1, seconds, for single-reference solving.
    pub isb_s: Vec<f64>,
    /// Clock check the time attack must evade.
    pub c_matrix: DMatrix<f64>,
    /// Metric displacement budget.
    pub delta_prime: DVector<f64>,
    /// Re-linearization passes after the linear time-attack synthesis.
    pub refine_passes: usize,
}

impl AttackContext {
    /// ISB check with zero budget and no refinement.
    pub fn new(m: usize, isb_s: Vec<f64>) -> Self {
        let c_matrix = isb_c_matrix(m);
        let delta_prime = DVector::zeros(c_matrix.nrows());
        Self { m, isb_s, c_matrix, delta_prime, refine_passes: 0 }
    }

    pub fn with_refine_passes(mut self, passes: usize) -> Self {
        self.refine_passes = passes;
        self
    }

    fn solver(&self) -> SolverConfig {
        SolverConfig::with_isb(self.isb_s.clone())
    }
}

/// Builds the tamper for one (noiseless) epoch: solves the legitimate PVT in
/// the plan's native mode, linearizes there and runs the matching
/// synthesizer.
pub fn synthesize(epoch: &Epoch, plan: &AttackPlan, ctx: &AttackContext) -> Result<TamperVector> {
    let mode = plan.native_mode(ctx.m);
    let legit = solve(epoch, &PvtSolution::cold_start(mode), &ctx.solver())?.solution;
    match plan {
        AttackPlan::TimeTargeted { p_target } => synthesize_time_attack(epoch, &legit, p_target, ctx),
        AttackPlan::PositionRelay { gamma_t_s, xi } => {
            Ok(relay_attack_position(&build_geometry(epoch, &legit)?, *gamma_t_s, xi))
        }
        AttackPlan::PositionGeneration { gamma_t_s } => {
            generation_attack_position(&build_geometry(epoch, &legit)?, *gamma_t_s, epoch.n_auth())
        }
    }
}

/// Logs a warning when a time-attack target lies beyond the range where the
/// linearized attack stays accurate (1 mm slack for rounding).
pub fn warn_if_beyond_linear_range(from: &Vector3<f64>, target: &Vector3<f64>) {
    let distance = (target - from).norm();
    if distance > LINEAR_RANGE_WARN_M + 1e-3 {
        warn!("target is {:.1} km away; the linear attack model degrades beyond 10 km", distance / 1e3);
    }
}

/// Linear time-attack synthesis at `legit`, followed by
/// `ctx.refine_passes` corrections. Each correction re-solves the tampered
/// epoch, re-linearizes at the induced solution and adds the feasible
/// increment that moves it onto the target while restoring the metric
/// budget.
pub fn synthesize_time_attack(
    epoch: &Epoch,
    legit: &PvtSolution,
    p_target: &PvtSolution,
    ctx: &AttackContext,
) -> Result<TamperVector> {
    if p_target.mode != legit.mode {
        return Err(Error::DimensionMismatch("target and legitimate solutions use different clock modes".into()));
    }
    debug!("time attack over {:.1} m", (p_target.pos - legit.pos).norm());
    let geom = build_geometry(epoch, legit)?;
    let space = feasible_space(&geom, &ctx.c_matrix, &ctx.delta_prime)?;
    let target_state = p_target.state();
    let legit_state = legit.state();
    let mut tamper = time_attack_minimize(&geom, &space, &target_state, &legit_state)?;
    let solver = ctx.solver();
    for _ in 0..ctx.refine_passes {
        let induced = solve(&apply_tamper(epoch, &tamper)?, legit, &solver)?.solution;
        let geom = build_geometry(epoch, &induced)?;
        let budget = &ctx.delta_prime - &ctx.c_matrix * (induced.state() - &legit_state);
        let space = feasible_space(&geom, &ctx.c_matrix, &budget)?;
        let step = time_attack_minimize(&geom, &space, &target_state, &induced.state())?;
        tamper.delta_r += step.delta_r;
    }
    Ok(tamper)
}
