//! Detection statistics of the clock check and quadratic-form model of the
//! position check metric.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::erf::erfc_inv;

use crate::attacks::TamperVector;
use crate::geometry::GeometrySet;
use crate::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Gaussian tail probability `Q(x) = P(Z > x)`.
pub fn q(x: f64) -> f64 {
    0.5 * libm::erfc(x / SQRT_2)
}

fn phi(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Inverse of [`q`] on (0, 1): an inverse-erfc starting point polished by
/// Newton steps on `Q(x) - p` (the starting point alone is only good to
/// about 1e-10).
pub fn q_inv(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("Q^-1 needs 0 < p < 1, got {p}")));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    if p > 0.5 {
        return q_inv(1.0 - p).map(|x| -x);
    }
    let mut x = SQRT_2 * erfc_inv(2.0 * p);
    for _ in 0..4 {
        let step = (q(x) - p) / phi(x);
        x += step;
        if step.abs() <= 1e-16 * x.abs().max(1.0) {
            break;
        }
    }
    Ok(x)
}

/// Threshold `T = sigma0 Q^-1(p_fa / 2)` giving false-alarm rate `p_fa` for
/// the two-sided test `|theta| > T` on a zero-mean Gaussian metric.
pub fn threshold_from_pfa(p_fa: f64, sigma0: f64) -> Result<f64> {
    if !(p_fa > 0.0 && p_fa <= 1.0) {
        return Err(Error::Domain(format!("p_fa must lie in (0, 1], got {p_fa}")));
    }
    if !(sigma0 >= 0.0) {
        return Err(Error::Domain(format!("sigma0 must be >= 0, got {sigma0}")));
    }
    if p_fa == 1.0 {
        return Ok(0.0);
    }
    Ok(sigma0 * q_inv(p_fa / 2.0)?)
}

/// Probability that `|theta| <= threshold` for `theta ~ N(mu, sigma^2)`.
pub fn pass_probability(threshold: f64, sigma: f64, mu: f64) -> f64 {
    let p = q((-threshold - mu) / sigma) - q((threshold - mu) / sigma);
    p.clamp(0.0, 1.0)
}

/// Missed-detection probability at false-alarm rate `p_fa`:
/// `Q((-T - mu1) / sigma1) - Q((T - mu1) / sigma1)` with
/// `T = sigma0 Q^-1(p_fa / 2)`.
pub fn pmd_closed_form(p_fa: f64, sigma0: f64, sigma1: f64, mu1: f64) -> Result<f64> {
    if !(sigma0 > 0.0 && sigma1 > 0.0) {
        return Err(Error::Domain(format!("sigma0 and sigma1 must be > 0, got {sigma0}, {sigma1}")));
    }
    let t = threshold_from_pfa(p_fa, sigma0)?;
    Ok(pass_probability(t, sigma1, mu1))
}

/// Mean and covariance of the clock-check metric `theta_t = C p` under the
/// legitimate (0) and attacked (1) hypotheses.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricStats {
    /// Attack-induced mean shift `C H dr_T`, meters.
    pub mu: DVector<f64>,
    /// Legitimate std of the first metric component, meters.
    pub sigma0: f64,
    /// Attacked std of the first metric component, meters.
    pub sigma1: f64,
    pub cov0: DMatrix<f64>,
    pub cov1: DMatrix<f64>,
}

/// Closed-form metric statistics for a tamper applied under range noise
/// `sigma_l` at the victim and `sigma_a` at a relaying attacker.
pub fn metric_stats(
    geom: &GeometrySet,
    c_matrix: &DMatrix<f64>,
    tamper: &TamperVector,
    sigma_l: f64,
    sigma_a: f64,
) -> Result<MetricStats> {
    if c_matrix.ncols() != geom.state_dim() || c_matrix.nrows() == 0 {
        return Err(Error::DimensionMismatch(format!(
            "C has {} columns, state has {}",
            c_matrix.ncols(),
            geom.state_dim()
        )));
    }
    if tamper.delta_r.len() != geom.n() {
        return Err(Error::LengthMismatch { expected: geom.n(), got: tamper.delta_r.len() });
    }
    let sigma_t2 = if tamper.kind.is_relayed() { sigma_l * sigma_l + sigma_a * sigma_a } else { sigma_l * sigma_l };
    let ch = c_matrix * &geom.h;
    let shape = &ch * ch.transpose();
    let mu = &ch * &tamper.delta_r;
    Ok(MetricStats {
        mu,
        sigma0: sigma_l * shape[(0, 0)].sqrt(),
        sigma1: sigma_t2.sqrt() * shape[(0, 0)].sqrt(),
        cov0: &shape * (sigma_l * sigma_l),
        cov1: &shape * sigma_t2,
    })
}

/// `theta^2 = sum_i lambda_i (u_i + b_i)^2` with `u ~ N(0, I)`: the law of
/// `|e|^2` for `e ~ N(mean, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadFormModel {
    pub lambdas: Vector3<f64>,
    pub b_vec: Vector3<f64>,
    /// Eigenvectors of `cov`, one per column.
    pub p: Matrix3<f64>,
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
}

impl QuadFormModel {
    pub fn sample_theta_sq<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        (0..3)
            .map(|i| {
                let u: f64 = rng.sample(StandardNormal);
                self.lambdas[i] * (u + self.b_vec[i]).powi(2)
            })
            .sum()
    }

    /// `E[theta^2] = sum_i lambda_i (1 + b_i^2)`.
    pub fn mean_theta_sq(&self) -> f64 {
        (0..3).map(|i| self.lambdas[i] * (1.0 + self.b_vec[i].powi(2))).sum()
    }
}

pub fn quadform_model(mean: &Vector3<f64>, cov: &Matrix3<f64>) -> Result<QuadFormModel> {
    let scale = cov.amax();
    if !(scale > 0.0) || (cov - cov.transpose()).amax() > 1e-12 * scale {
        return Err(Error::NotSpd("covariance is zero or not symmetric".into()));
    }
    let eig = SymmetricEigen::new(*cov);
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::NotSpd(format!("eigenvalues {:?}", eig.eigenvalues.as_slice())));
    }
    let p = eig.eigenvectors;
    let lambdas = eig.eigenvalues;
    let rotated = p.transpose() * mean;
    let b_vec = Vector3::from_fn(|i, _| rotated[i] / lambdas[i].sqrt());
    Ok(QuadFormModel { lambdas, b_vec, p, mean: *mean, cov: *cov })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetMode {
    ClosedForm,
    Empirical,
}

impl DetMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DetMode::ClosedForm => "closed_form",
            DetMode::Empirical => "empirical",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold_m: f64,
    pub p_fa: f64,
    pub p_md: f64,
    /// Confidence half-widths; zero for closed-form points.
    pub fa_ci: f64,
    pub md_ci: f64,
}

/// Detection error tradeoff curve, points sorted by increasing threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct DetCurve {
    pub points: Vec<DetPoint>,
    /// Trials per hypothesis (0 for closed form).
    pub trials: usize,
    pub mode: DetMode,
}

fn interpolate(x0: f64, x1: f64, y0: f64, y1: f64, x: f64) -> f64 {
    if x1 == x0 {
        return y0.min(y1);
    }
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

impl DetCurve {
    pub fn new(mut points: Vec<DetPoint>, trials: usize, mode: DetMode) -> Self {
        points.sort_by(|a, b| a.threshold_m.total_cmp(&b.threshold_m));
        Self { points, trials, mode }
    }

    /// `p_md` at the given `p_fa`, linearly interpolated between the two
    /// bracketing points. `None` outside the sampled range.
    pub fn pmd_at_pfa(&self, p_fa: f64) -> Option<f64> {
        self.points.windows(2).find_map(|w| {
            let (a, b) = (&w[0], &w[1]);
            (a.p_fa >= p_fa && p_fa >= b.p_fa).then(|| interpolate(a.p_fa, b.p_fa, a.p_md, b.p_md, p_fa))
        })
    }

    /// `p_fa` at the given `p_md`, linearly interpolated.
    pub fn pfa_at_pmd(&self, p_md: f64) -> Option<f64> {
        self.points.windows(2).find_map(|w| {
            let (a, b) = (&w[0], &w[1]);
            (a.p_md <= p_md && p_md <= b.p_md).then(|| interpolate(a.p_md, b.p_md, a.p_fa, b.p_fa, p_md))
        })
    }

    /// Probabilities in [0, 1] and `p_fa` non-increasing along the curve.
    pub fn is_well_formed(&self) -> bool {
        let in_range = |p: f64| (0.0..=1.0).contains(&p);
        self.points.iter().all(|p| in_range(p.p_fa) && in_range(p.p_md))
            && self.points.windows(2).all(|w| w[1].p_fa <= w[0].p_fa && w[0].threshold_m <= w[1].threshold_m)
    }
}

/// Closed-form DET of the first metric component, one point per `p_fa`.
pub fn det_closed_form(stats: &MetricStats, pfa_grid: &[f64]) -> Result<DetCurve> {
    let points = pfa_grid
        .iter()
        .map(|&p_fa| {
            Ok(DetPoint {
                threshold_m: threshold_from_pfa(p_fa, stats.sigma0)?,
                p_fa,
                p_md: pmd_closed_form(p_fa, stats.sigma0, stats.sigma1, stats.mu[0])?,
                fa_ci: 0.0,
                md_ci: 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DetCurve::new(points, 0, DetMode::ClosedForm))
}

/// Scalar Gaussian metric model of one epoch: `N(0, sigma0^2)` when
/// legitimate, `N(mu, sigma1^2)` when attacked.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianMetric {
    pub sigma0: f64,
    pub sigma1: f64,
    pub mu: f64,
}

/// False-alarm rate of `|theta| > T` averaged over epochs.
pub fn pooled_pfa(threshold: f64, epochs: &[GaussianMetric]) -> f64 {
    epochs.iter().map(|e| 2.0 * q(threshold / e.sigma0)).sum::<f64>() / epochs.len() as f64
}

/// Missed-detection rate of `|theta| > T` averaged over epochs.
pub fn pooled_pmd(threshold: f64, epochs: &[GaussianMetric]) -> f64 {
    epochs.iter().map(|e| pass_probability(threshold, e.sigma1, e.mu)).sum::<f64>() / epochs.len() as f64
}

/// Common threshold whose epoch-averaged false-alarm rate is `p_fa`
/// (bisection; the averaged rate is decreasing in the threshold).
pub fn pooled_threshold(p_fa: f64, epochs: &[GaussianMetric]) -> Result<f64> {
    if !(p_fa > 0.0 && p_fa <= 1.0) {
        return Err(Error::Domain(format!("p_fa must lie in (0, 1], got {p_fa}")));
    }
    if epochs.is_empty() || epochs.iter().any(|e| !(e.sigma0 > 0.0 && e.sigma1 > 0.0)) {
        return Err(Error::Domain("pooled model needs epochs with positive sigmas".into()));
    }
    if p_fa == 1.0 {
        return Ok(0.0);
    }
    let mut lo = 0.0;
    let mut hi = epochs.iter().map(|e| e.sigma0).fold(0.0, f64::max) * 40.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if pooled_pfa(mid, epochs) > p_fa {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Closed-form DET of a metric whose model varies across epochs, evaluated
/// at common thresholds.
pub fn det_closed_form_pooled(epochs: &[GaussianMetric], pfa_grid: &[f64]) -> Result<DetCurve> {
    let points = pfa_grid
        .iter()
        .map(|&p_fa| {
            let t = pooled_threshold(p_fa, epochs)?;
            Ok(DetPoint { threshold_m: t, p_fa, p_md: pooled_pmd(t, epochs), fa_ci: 0.0, md_ci: 0.0 })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DetCurve::new(points, 0, DetMode::ClosedForm))
}

/// Half-width of the Wilson score interval for `k` successes out of `n`.
pub fn wilson_half_width(k: usize, n: usize, z: f64) -> f64 {
    if n == 0 {
        return 0.5;
    }
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = z * z;
    z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / (1.0 + z2 / n)
}
