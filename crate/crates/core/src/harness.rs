//! Monte Carlo experiments: legitimate and attacked solves per epoch and
//! repetition, check metrics, empirical DET curves and CSV output.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::analysis::{
    det_closed_form_pooled, metric_stats, wilson_half_width, DetCurve, DetMode, DetPoint, GaussianMetric,
};
use crate::attacks::{synthesize, warn_if_beyond_linear_range, AttackContext, AttackPlan, TamperVector};
use crate::checks::{isb_c_matrix, IsbCheckConfig, PositionCheckConfig};
use crate::coords::enu_offset_to_ecef;
use crate::geometry::{build_geometry, dop};
use crate::numfmt::format_sig;
use crate::pvt::{apply_tamper, solve, ClockMode, PvtSolution, SolverConfig};
use crate::scenario::{Epoch, NoiseDraw, NoiseModel, Scenario};
use crate::{Error, Result, SPEED_OF_LIGHT};

/// Confidence multiplier for Wilson intervals (95 %).
pub const WILSON_Z: f64 = 1.96;

/// Number of thresholds in the default DET grid.
pub const DEFAULT_GRID_POINTS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub enum CheckConfig {
    /// Clock consistency between constellations 1 and 2 (multi-reference
    /// victim). The metric is `|c (t2 - t1) - b - c ISB|`.
    Isb(IsbCheckConfig),
    /// Distance from a reference position (single-reference victim).
    Position(PositionCheckConfig),
}

impl CheckConfig {
    pub fn victim_mode(&self, m: usize) -> ClockMode {
        match self {
            CheckConfig::Isb(_) => ClockMode::MultiRef { m },
            CheckConfig::Position(_) => ClockMode::SingleRef,
        }
    }

    /// Scalar check statistic; the check passes when it is at most the
    /// threshold.
    pub fn metric(&self, p: &PvtSolution) -> Result<f64> {
        match self {
            CheckConfig::Isb(cfg) => Ok(signed_gap(cfg, p)?.abs()),
            CheckConfig::Position(cfg) => Ok((p.pos - cfg.p_ref).norm()),
        }
    }
}

fn signed_gap(cfg: &IsbCheckConfig, p: &PvtSolution) -> Result<f64> {
    match p.mode {
        ClockMode::MultiRef { m } if m >= 2 => Ok(cfg.gap_m(p.clocks_m[0], p.clocks_m[1])),
        _ => Err(Error::DimensionMismatch("clock check needs a multi-reference solution with M >= 2".into())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub attack: AttackPlan,
    pub check: CheckConfig,
    pub noise: NoiseModel,
    /// Monte Carlo repetitions per epoch.
    pub repetitions: usize,
    /// Re-linearization passes of the time-attack synthesizer.
    pub refine_passes: usize,
    /// Use the same victim noise for the legitimate and attacked trial of
    /// each (epoch, repetition).
    pub common_random_numbers: bool,
}

impl ExperimentConfig {
    pub fn new(attack: AttackPlan, check: CheckConfig, noise: NoiseModel, repetitions: usize) -> Self {
        Self { attack, check, noise, repetitions, refine_passes: 0, common_random_numbers: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hypothesis {
    /// Legitimate signals.
    H0,
    /// Under attack.
    H1,
}

impl Hypothesis {
    pub fn as_str(&self) -> &'static str {
        match self {
            Hypothesis::H0 => "H0",
            Hypothesis::H1 => "H1",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub epoch: usize,
    pub rep: usize,
    pub hyp: Hypothesis,
    pub metric_m: f64,
    pub solution: PvtSolution,
    /// Clock change of the first time reference against the noiseless
    /// legitimate solution, seconds.
    pub shift_clk_s: f64,
    /// Position change against the noiseless legitimate solution, meters.
    pub shift_pos_m: f64,
}

/// Per-epoch quantities shared by all repetitions.
#[derive(Debug, Clone)]
pub struct EpochPlan {
    /// Noiseless legitimate solution in the victim's mode.
    pub legit: PvtSolution,
    pub tamper: TamperVector,
    /// Noiseless tampered epoch.
    pub tampered: Epoch,
}

fn tag(epoch: usize, rep: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Trial { epoch, rep, source: Box::new(e) }
}

fn victim_solver(scenario: &Scenario) -> SolverConfig {
    SolverConfig::with_isb(scenario.meta.isb_true_s.clone())
}

/// Synthesizes the tamper of every epoch from noiseless data.
pub fn plan_epochs(scenario: &Scenario, cfg: &ExperimentConfig) -> Result<Vec<EpochPlan>> {
    let m = scenario.meta.m;
    let ctx = AttackContext::new(m, scenario.meta.isb_true_s.clone()).with_refine_passes(cfg.refine_passes);
    let solver = victim_solver(scenario);
    let mode = cfg.check.victim_mode(m);
    if let AttackPlan::TimeTargeted { p_target } = &cfg.attack {
        warn_if_beyond_linear_range(&scenario.meta.receiver_truth.pos_ecef, &p_target.pos);
    }
    let plans: Vec<Result<EpochPlan>> = scenario
        .epochs
        .par_iter()
        .enumerate()
        .map(|(i, epoch)| {
            let build = || {
                let legit = solve(epoch, &PvtSolution::cold_start(mode), &solver)?.solution;
                let tamper = synthesize(epoch, &cfg.attack, &ctx)?;
                let tampered = apply_tamper(epoch, &tamper)?;
                Ok(EpochPlan { legit, tamper, tampered })
            };
            build().map_err(tag(i, 0))
        })
        .collect();
    plans.into_iter().collect()
}

/// Reproducible RNG of one trial: stream `epoch * reps + rep` of the seed.
pub fn trial_rng(seed: u64, epoch: usize, rep: usize, reps: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch * reps + rep) as u64);
    rng
}

fn validate(scenario: &Scenario, cfg: &ExperimentConfig) -> Result<()> {
    if cfg.repetitions == 0 {
        return Err(Error::Domain("repetitions must be >= 1".into()));
    }
    if scenario.epochs.is_empty() {
        return Err(Error::Domain("scenario has no epochs".into()));
    }
    if matches!(cfg.check, CheckConfig::Isb(_)) && scenario.meta.m < 2 {
        return Err(Error::DimensionMismatch("clock check needs M >= 2".into()));
    }
    Ok(())
}

/// Runs one legitimate and one attacked trial per (epoch, repetition).
/// Records are ordered by epoch, then repetition, then H0 before H1, and
/// depend only on the inputs and the noise seed.
pub fn run_experiment(scenario: &Scenario, cfg: &ExperimentConfig) -> Result<Vec<TrialRecord>> {
    validate(scenario, cfg)?;
    let plans = plan_epochs(scenario, cfg)?;
    run_planned(scenario, cfg, &plans)
}

/// [`run_experiment`] with precomputed epoch plans.
pub fn run_planned(scenario: &Scenario, cfg: &ExperimentConfig, plans: &[EpochPlan]) -> Result<Vec<TrialRecord>> {
    validate(scenario, cfg)?;
    if plans.len() != scenario.epochs.len() {
        return Err(Error::LengthMismatch { expected: scenario.epochs.len(), got: plans.len() });
    }
    let reps = cfg.repetitions;
    let solver = victim_solver(scenario);
    let mode = cfg.check.victim_mode(scenario.meta.m);
    let trials: Vec<Result<[TrialRecord; 2]>> = (0..plans.len() * reps)
        .into_par_iter()
        .map(|idx| {
            let (e, rep) = (idx / reps, idx % reps);
            let run = || {
                let epoch = &scenario.epochs[e];
                let plan = &plans[e];
                let n = epoch.n();
                let mut rng = trial_rng(cfg.noise.seed, e, rep, reps);
                let draw0 = NoiseDraw::sample(n, &mut rng);
                let draw1 = if cfg.common_random_numbers { draw0.clone() } else { NoiseDraw::sample(n, &mut rng) };
                let noisy0 = draw0.apply(epoch, &cfg.noise, &vec![false; n])?;
                let noisy1 = draw1.apply(&plan.tampered, &cfg.noise, &plan.tamper.relayed_mask())?;
                let record = |hyp, noisy: &Epoch| -> Result<TrialRecord> {
                    let solution = solve(noisy, &PvtSolution::cold_start(mode), &solver)?.solution;
                    Ok(TrialRecord {
                        epoch: e,
                        rep,
                        hyp,
                        metric_m: cfg.check.metric(&solution)?,
                        shift_clk_s: (solution.clocks_m[0] - plan.legit.clocks_m[0]) / SPEED_OF_LIGHT,
                        shift_pos_m: (solution.pos - plan.legit.pos).norm(),
                        solution,
                    })
                };
                Ok([record(Hypothesis::H0, &noisy0)?, record(Hypothesis::H1, &noisy1)?])
            };
            run().map_err(tag(e, rep))
        })
        .collect();
    let mut out = Vec::with_capacity(2 * trials.len());
    for t in trials {
        out.extend(t?);
    }
    Ok(out)
}

fn split_metrics(records: &[TrialRecord]) -> Result<(Vec<f64>, Vec<f64>)> {
    let pick = |h| {
        let mut v: Vec<f64> = records.iter().filter(|r| r.hyp == h).map(|r| r.metric_m).collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let (h0, h1) = (pick(Hypothesis::H0), pick(Hypothesis::H1));
    if h0.is_empty() {
        return Err(Error::EmptyHypothesis("H0"));
    }
    if h1.is_empty() {
        return Err(Error::EmptyHypothesis("H1"));
    }
    Ok((h0, h1))
}

/// Count of sorted values `<= t`.
fn count_le(sorted: &[f64], t: f64) -> usize {
    sorted.partition_point(|&x| x <= t)
}

/// Empirical DET: at each threshold, the fraction of legitimate trials that
/// fail the check and of attacked trials that pass it.
pub fn empirical_det(records: &[TrialRecord], thresholds: &[f64]) -> Result<DetCurve> {
    let (h0, h1) = split_metrics(records)?;
    let (n0, n1) = (h0.len(), h1.len());
    let points = thresholds
        .iter()
        .map(|&t| {
            let fa = n0 - count_le(&h0, t);
            let md = count_le(&h1, t);
            DetPoint {
                threshold_m: t,
                p_fa: fa as f64 / n0 as f64,
                p_md: md as f64 / n1 as f64,
                fa_ci: wilson_half_width(fa, n0, WILSON_Z),
                md_ci: wilson_half_width(md, n1, WILSON_Z),
            }
        })
        .collect();
    Ok(DetCurve::new(points, n0.min(n1), DetMode::Empirical))
}

/// Empirical operating point at threshold `t`: `(p_fa, p_md)`.
pub fn empirical_rates(records: &[TrialRecord], t: f64) -> Result<(f64, f64)> {
    let (h0, h1) = split_metrics(records)?;
    Ok(((h0.len() - count_le(&h0, t)) as f64 / h0.len() as f64, count_le(&h1, t) as f64 / h1.len() as f64))
}

/// Smallest data threshold whose empirical false-alarm rate is at most
/// `p_fa`, with the rates it achieves.
pub fn empirical_point_at_pfa(records: &[TrialRecord], p_fa: f64) -> Result<DetPoint> {
    let (h0, h1) = split_metrics(records)?;
    let n0 = h0.len();
    let mut t = h0[n0 - 1];
    for &x in &h0 {
        if (n0 - count_le(&h0, x)) as f64 <= p_fa * n0 as f64 {
            t = x;
            break;
        }
    }
    point(&h0, &h1, t)
}

/// Largest threshold whose empirical missed-detection rate is at most
/// `p_md`, with the rates it achieves.
pub fn empirical_point_at_pmd(records: &[TrialRecord], p_md: f64) -> Result<DetPoint> {
    let (h0, h1) = split_metrics(records)?;
    let k = (p_md * h1.len() as f64).floor() as usize;
    let t = if k >= h1.len() {
        f64::INFINITY
    } else if h1[k] > 0.0 {
        // Just below the (k+1)-th smallest attacked metric.
        f64::from_bits(h1[k].to_bits() - 1)
    } else {
        -1.0
    };
    point(&h0, &h1, t)
}

fn point(h0: &[f64], h1: &[f64], t: f64) -> Result<DetPoint> {
    let fa = h0.len() - count_le(h0, t);
    let md = count_le(h1, t);
    Ok(DetPoint {
        threshold_m: t,
        p_fa: fa as f64 / h0.len() as f64,
        p_md: md as f64 / h1.len() as f64,
        fa_ci: wilson_half_width(fa, h0.len(), WILSON_Z),
        md_ci: wilson_half_width(md, h1.len(), WILSON_Z),
    })
}

/// Logarithmically spaced thresholds over `[sigma0 / 100, 10 max(metric)]`.
pub fn default_threshold_grid(sigma0: f64, records: &[TrialRecord]) -> Vec<f64> {
    let max_metric = records.iter().map(|r| r.metric_m).fold(0.0, f64::max);
    let mut hi = 10.0 * max_metric;
    if !(hi > 0.0) {
        hi = 1.0;
    }
    let mut lo = sigma0 / 100.0;
    if !(lo > 0.0) || lo >= hi {
        lo = hi * 1e-6;
    }
    let n = DEFAULT_GRID_POINTS;
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// Legitimate std of the check metric at the first epoch: the clock-gap std
/// for the clock check, `sigma_l * PDOP` for the position check.
pub fn nominal_sigma0(scenario: &Scenario, check: &CheckConfig, sigma_l: f64) -> Result<f64> {
    let m = scenario.meta.m;
    let epoch = scenario.epochs.first().ok_or_else(|| Error::Domain("scenario has no epochs".into()))?;
    let mode = check.victim_mode(m);
    let legit = solve(epoch, &PvtSolution::cold_start(mode), &victim_solver(scenario))?.solution;
    let geom = build_geometry(epoch, &legit)?;
    match check {
        CheckConfig::Isb(_) => {
            let c1 = isb_c_matrix(m).rows(0, 1).into_owned();
            let ch = c1 * &geom.h;
            Ok(sigma_l * ch.norm())
        }
        CheckConfig::Position(_) => Ok(sigma_l * dop(&geom.g, 1.0, None)?.pdop),
    }
}

/// Experiment plus empirical DET on the default grid.
pub fn run_det(scenario: &Scenario, cfg: &ExperimentConfig) -> Result<(Vec<TrialRecord>, DetCurve)> {
    let records = run_experiment(scenario, cfg)?;
    let sigma0 = nominal_sigma0(scenario, &cfg.check, cfg.noise.sigma_l)?;
    let curve = empirical_det(&records, &default_threshold_grid(sigma0, &records))?;
    Ok((records, curve))
}

/// Closed-form DET of the clock check, pooled over epochs. Each epoch's
/// attacked mean is the noiseless gap change actually induced by its
/// tamper, and its attacked std comes from the geometry at the induced
/// solution. Assumes a calibrated check (zero legitimate mean).
pub fn closed_form_det(scenario: &Scenario, cfg: &ExperimentConfig, pfa_grid: &[f64]) -> Result<DetCurve> {
    validate(scenario, cfg)?;
    let plans = plan_epochs(scenario, cfg)?;
    closed_form_det_planned(scenario, cfg, &plans, pfa_grid)
}

/// Per-epoch Gaussian models of the clock-check metric.
pub fn gaussian_metric_models(
    scenario: &Scenario,
    cfg: &ExperimentConfig,
    plans: &[EpochPlan],
) -> Result<Vec<GaussianMetric>> {
    let CheckConfig::Isb(isb) = &cfg.check else {
        return Err(Error::Domain("the position check has no closed-form detection model".into()));
    };
    let m = scenario.meta.m;
    let c = isb_c_matrix(m);
    let solver = victim_solver(scenario);
    plans
        .par_iter()
        .enumerate()
        .map(|(e, plan)| {
            let run = || {
                let legit_geom = build_geometry(&scenario.epochs[e], &plan.legit)?;
                let induced = solve(&plan.tampered, &plan.legit, &solver)?.solution;
                let attacked_geom = build_geometry(&plan.tampered, &induced)?;
                let s0 = metric_stats(&legit_geom, &c, &plan.tamper, cfg.noise.sigma_l, cfg.noise.sigma_a)?;
                let s1 = metric_stats(&attacked_geom, &c, &plan.tamper, cfg.noise.sigma_l, cfg.noise.sigma_a)?;
                Ok(GaussianMetric {
                    sigma0: s0.sigma0,
                    sigma1: s1.sigma1,
                    mu: signed_gap(isb, &induced)? - signed_gap(isb, &plan.legit)?,
                })
            };
            run().map_err(tag(e, 0))
        })
        .collect()
}

pub fn closed_form_det_planned(
    scenario: &Scenario,
    cfg: &ExperimentConfig,
    plans: &[EpochPlan],
    pfa_grid: &[f64],
) -> Result<DetCurve> {
    let models = gaussian_metric_models(scenario, cfg, plans)?;
    det_closed_form_pooled(&models, pfa_grid)
}

/// Target solution at an ENU offset from the scenario truth, keeping the
/// true receiver clocks.
pub fn target_from_enu(scenario: &Scenario, enu: &Vector3<f64>) -> PvtSolution {
    let truth = scenario.meta.receiver_truth.solution();
    PvtSolution::multi_ref(enu_offset_to_ecef(&truth.pos, enu), truth.clocks_m)
}

/// Target solution at an ECEF position, keeping the true receiver clocks.
pub fn target_from_ecef(scenario: &Scenario, pos: Vector3<f64>) -> PvtSolution {
    PvtSolution::multi_ref(pos, scenario.meta.receiver_truth.solution().clocks_m)
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub distance_m: f64,
    pub curve: DetCurve,
    pub records: Vec<TrialRecord>,
}

/// Repeats the time-attack experiment with targets at each distance along
/// a horizontal bearing (degrees clockwise from North) from the truth.
pub fn sweep_target_distance(
    scenario: &Scenario,
    cfg: &ExperimentConfig,
    distances_m: &[f64],
    bearing_deg: f64,
) -> Result<Vec<SweepResult>> {
    let (s, c) = bearing_deg.to_radians().sin_cos();
    distances_m
        .iter()
        .map(|&d| {
            if !(d > 0.0) {
                return Err(Error::Domain(format!("sweep distances must be > 0, got {d}")));
            }
            let mut run = cfg.clone();
            run.attack =
                AttackPlan::TimeTargeted { p_target: target_from_enu(scenario, &Vector3::new(d * s, d * c, 0.0)) };
            let (records, curve) = run_det(scenario, &run)?;
            Ok(SweepResult { distance_m: d, curve, records })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub t_s: f64,
    pub legit_clk_us: f64,
    pub attack_clk_us: f64,
}

/// Clock bias of the first time reference per epoch, legitimate and with
/// the attack switched on as a step at `t_start_s` (repetition 0 noise).
pub fn clock_trace(scenario: &Scenario, cfg: &ExperimentConfig, t_start_s: f64) -> Result<Vec<TraceRow>> {
    validate(scenario, cfg)?;
    let plans = plan_epochs(scenario, cfg)?;
    let mode = cfg.check.victim_mode(scenario.meta.m);
    let solver = victim_solver(scenario);
    scenario
        .epochs
        .par_iter()
        .enumerate()
        .map(|(e, epoch)| {
            let run = || {
                let n = epoch.n();
                let draw = NoiseDraw::sample(n, &mut trial_rng(cfg.noise.seed, e, 0, cfg.repetitions));
                let clk = |noisy: &Epoch| -> Result<f64> {
                    let s = solve(noisy, &PvtSolution::cold_start(mode), &solver)?.solution;
                    Ok(s.clocks_m[0] / SPEED_OF_LIGHT * 1e6)
                };
                let legit_clk_us = clk(&draw.apply(epoch, &cfg.noise, &vec![false; n])?)?;
                let attack_clk_us = if epoch.time_tag >= t_start_s {
                    clk(&draw.apply(&plans[e].tampered, &cfg.noise, &plans[e].tamper.relayed_mask())?)?
                } else {
                    legit_clk_us
                };
                Ok(TraceRow { epoch: e, t_s: epoch.time_tag, legit_clk_us, attack_clk_us })
            };
            run().map_err(tag(e, 0))
        })
        .collect()
}

const SIG: usize = 12;

fn f(x: f64) -> String {
    format_sig(x, SIG)
}

pub fn trials_csv(records: &[TrialRecord]) -> String {
    let mut out = String::from("epoch,rep,hyp,metric_m,x,y,z,clk_us,shift_clk_us,shift_pos_m\n");
    for r in records {
        let p = &r.solution.pos;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.rep,
            r.hyp.as_str(),
            f(r.metric_m),
            f(p.x),
            f(p.y),
            f(p.z),
            f(r.solution.clocks_m[0] / SPEED_OF_LIGHT * 1e6),
            f(r.shift_clk_s * 1e6),
            f(r.shift_pos_m)
        );
    }
    out
}

pub fn det_csv(curves: &[&DetCurve]) -> String {
    let mut out = String::from("threshold_m,p_fa,p_md,fa_ci,md_ci,mode\n");
    for c in curves {
        for p in &c.points {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                f(p.threshold_m),
                f(p.p_fa),
                f(p.p_md),
                f(p.fa_ci),
                f(p.md_ci),
                c.mode.as_str()
            );
        }
    }
    out
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("epoch,t_s,legit_clk_us,attack_clk_us\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.epoch, f(r.t_s), f(r.legit_clk_us), f(r.attack_clk_us));
    }
    out
}

/// Writes `contents` to `path`, mapping failures to [`Error::Io`].
pub fn write_text(path: impl AsRef<Path>, contents: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, contents).map_err(|source| Error::Io { path: path.display().to_string(), source })
}
