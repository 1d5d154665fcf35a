//! `gnssxa`: scenario generation, PVT solving, attack synthesis and
//! detection experiments from the command line.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use nalgebra::Vector3;
use serde_json::json;

use gnssxa::attacks::{synthesize, warn_if_beyond_linear_range, AttackContext, AttackPlan, TamperVector};
use gnssxa::checks::{IsbCheckConfig, PositionCheckConfig};
use gnssxa::coords::{ecef_to_enu_rotation, Geodetic};
use gnssxa::harness::{
    clock_trace, closed_form_det, det_csv, run_det, sweep_target_distance, target_from_ecef, target_from_enu,
    trace_csv, trials_csv, write_text, CheckConfig, ExperimentConfig,
};
use gnssxa::numfmt::format_sig;
use gnssxa::pvt::{solve, ClockMode, PvtSolution, SolverConfig};
use gnssxa::scenario::{generate_scenario, load_scenario, save_scenario, NoiseModel, ReceiverTruth, Scenario};
use gnssxa::{Error, SPEED_OF_LIGHT};

const EXIT_INFEASIBLE: u8 = 3;
const EXIT_DATA: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "gnssxa", version, about = "GNSS PVT cross-authentication attack simulator")]
struct Cli {
    /// Report errors as JSON on stderr.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scenario file.
    Gen(GenArgs),
    /// Solve the PVT of every epoch and print it as CSV.
    Solve(SolveArgs),
    /// Synthesize a time-targeted tamper for one epoch.
    AttackTime(AttackTimeArgs),
    /// Synthesize a relay or generation position attack for one epoch.
    AttackPos(AttackPosArgs),
    /// Run a Monte Carlo detection experiment and write its DET curve.
    Det(DetArgs),
    /// Repeat the time-attack experiment over target distances.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Authenticated satellites (count).
    #[arg(long)]
    n_auth: usize,
    /// Open satellites (count).
    #[arg(long)]
    n_open: usize,
    /// Constellations / time references (count).
    #[arg(long)]
    m: usize,
    /// Epochs at 1 s spacing (count).
    #[arg(long, default_value_t = 600)]
    epochs: usize,
    /// Geometry and receiver clock seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Receiver latitude, degrees.
    #[arg(long, default_value_t = 45.408, allow_hyphen_values = true)]
    lat_deg: f64,
    /// Receiver longitude, degrees.
    #[arg(long, default_value_t = 11.894, allow_hyphen_values = true)]
    lon_deg: f64,
    /// Receiver ellipsoidal height, meters.
    #[arg(long, default_value_t = 30.0, allow_hyphen_values = true)]
    alt_m: f64,
    /// Output scenario file (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SolveMode {
    /// One clock bias per constellation.
    Multi,
    /// One clock bias, scenario ISBs assumed known.
    Single,
}

#[derive(Args, Debug)]
struct SolveArgs {
    /// Scenario file (JSON).
    #[arg(long)]
    scenario: PathBuf,
    /// Clock formulation.
    #[arg(long, value_enum, default_value_t = SolveMode::Multi)]
    mode: SolveMode,
    /// Output CSV path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct TargetArgs {
    /// Target as an East,North,Up offset from the scenario truth, meters.
    #[arg(long, value_parser = parse_triple, allow_hyphen_values = true, conflicts_with = "target_lla")]
    target_enu: Option<Vector3<f64>>,
    /// Target as latitude (deg),longitude (deg),height (m).
    #[arg(long, value_parser = parse_triple, allow_hyphen_values = true)]
    target_lla: Option<Vector3<f64>>,
}

impl TargetArgs {
    fn resolve(&self, scenario: &Scenario) -> Result<PvtSolution, Error> {
        match (self.target_enu, self.target_lla) {
            (Some(enu), _) => Ok(target_from_enu(scenario, &enu)),
            (None, Some(lla)) => Ok(target_from_ecef(scenario, Geodetic::new(lla.x, lla.y, lla.z).to_ecef())),
            (None, None) => Err(Error::Domain("a time attack needs --target-enu or --target-lla".into())),
        }
    }
}

#[derive(Args, Debug)]
struct AttackTimeArgs {
    /// Scenario file (JSON).
    #[arg(long)]
    scenario: PathBuf,
    #[command(flatten)]
    target: TargetArgs,
    /// Epoch index to attack.
    #[arg(long, default_value_t = 0)]
    epoch: usize,
    /// Re-linearization passes after the linear synthesis (count).
    #[arg(long, default_value_t = 0)]
    refine_passes: usize,
    /// Output tamper file (JSON, meters).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum PosMode {
    /// Relay every signal with a common delay.
    Relay,
    /// Forge the open signals only.
    Generation,
}

#[derive(Args, Debug, Clone)]
struct PosAttackArgs {
    /// Position attack strategy.
    #[arg(long, value_enum)]
    mode: PosMode,
    /// Induced receiver clock shift, microseconds.
    #[arg(long, default_value_t = 10.0, allow_hyphen_values = true)]
    gamma_t_us: f64,
    /// Relay position slack as East,North,Up, meters.
    #[arg(long, value_parser = parse_triple, allow_hyphen_values = true)]
    xi_enu_m: Option<Vector3<f64>>,
}

impl PosAttackArgs {
    fn plan(&self, scenario: &Scenario) -> AttackPlan {
        let gamma_t_s = self.gamma_t_us * 1e-6;
        match self.mode {
            PosMode::Generation => AttackPlan::PositionGeneration { gamma_t_s },
            PosMode::Relay => {
                let enu = self.xi_enu_m.unwrap_or_else(Vector3::zeros);
                let rot = ecef_to_enu_rotation(&scenario.meta.receiver_truth.pos_ecef);
                AttackPlan::PositionRelay { gamma_t_s, xi: rot.transpose() * enu }
            }
        }
    }
}

#[derive(Args, Debug)]
struct AttackPosArgs {
    /// Scenario file (JSON).
    #[arg(long)]
    scenario: PathBuf,
    #[command(flatten)]
    attack: PosAttackArgs,
    /// Epoch index to attack.
    #[arg(long, default_value_t = 0)]
    epoch: usize,
    /// Output tamper file (JSON, meters).
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-epoch clock trace (CSV, microseconds).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Attack start time for the trace, seconds.
    #[arg(long, default_value_t = 60.0)]
    t_start_s: f64,
    #[command(flatten)]
    noise: NoiseArgs,
}

#[derive(Args, Debug, Clone)]
struct NoiseArgs {
    /// Victim range noise std, meters.
    #[arg(long = "sigma-l-m", alias = "sigma-l", default_value_t = 0.0)]
    sigma_l_m: f64,
    /// Attacker receiver range noise std (relay only), meters.
    #[arg(long = "sigma-a-m", alias = "sigma-a", default_value_t = 0.0)]
    sigma_a_m: f64,
    /// Noise seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

impl NoiseArgs {
    fn model(&self) -> Result<NoiseModel, Error> {
        NoiseModel::new(self.sigma_l_m, self.sigma_a_m, self.seed)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum AttackKind {
    /// Time-targeted generation attack against the clock check.
    Time,
    /// Relay (meaconing) position attack.
    Relay,
    /// Generation position attack.
    Generation,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CheckKind {
    /// Inter-system clock consistency check.
    Isb,
    /// Distance to the a-priori position.
    Position,
}

#[derive(Args, Debug, Clone)]
struct ExperimentArgs {
    /// Scenario file (JSON).
    #[arg(long)]
    scenario: PathBuf,
    #[command(flatten)]
    noise: NoiseArgs,
    /// Monte Carlo repetitions per epoch (count).
    #[arg(long, default_value_t = 35)]
    reps: usize,
    /// Time-attack re-linearization passes (count).
    #[arg(long, default_value_t = 0)]
    refine_passes: usize,
    /// Draw independent noise for the attacked trials instead of reusing
    /// the legitimate draw.
    #[arg(long)]
    independent_noise: bool,
    /// Check under test (default: isb for time attacks, position otherwise).
    #[arg(long, value_enum)]
    check: Option<CheckKind>,
}

impl ExperimentArgs {
    fn config(
        &self,
        scenario: &Scenario,
        attack: AttackPlan,
        default_check: CheckKind,
    ) -> Result<ExperimentConfig, Error> {
        let check = match self.check.unwrap_or(default_check) {
            CheckKind::Isb => {
                let isb = scenario.meta.isb_true_s.first().copied().unwrap_or(0.0);
                CheckConfig::Isb(IsbCheckConfig::new(f64::INFINITY, 0.0, SPEED_OF_LIGHT * isb))
            }
            CheckKind::Position => {
                CheckConfig::Position(PositionCheckConfig::new(scenario.meta.receiver_truth.pos_ecef, f64::INFINITY)?)
            }
        };
        let mut cfg = ExperimentConfig::new(attack, check, self.noise.model()?, self.reps);
        cfg.refine_passes = self.refine_passes;
        cfg.common_random_numbers = !self.independent_noise;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct DetArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Attack under test.
    #[arg(long, value_enum)]
    attack: AttackKind,
    #[command(flatten)]
    target: TargetArgs,
    /// Induced receiver clock shift for position attacks, microseconds.
    #[arg(long, default_value_t = 10.0, allow_hyphen_values = true)]
    gamma_t_us: f64,
    /// Relay position slack as East,North,Up, meters.
    #[arg(long, value_parser = parse_triple, allow_hyphen_values = true)]
    xi_enu_m: Option<Vector3<f64>>,
    /// Append closed-form points (clock check only) on this many
    /// log-spaced false-alarm rates in [1e-3, 1].
    #[arg(long, default_value_t = 0)]
    closed_form_points: usize,
    /// Output DET file (CSV).
    #[arg(long)]
    out: PathBuf,
    /// Also write every trial (CSV).
    #[arg(long)]
    trials: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Target distances, kilometers (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "1.7,10,25.5")]
    distances_km: Vec<f64>,
    /// Horizontal bearing of the targets, degrees clockwise from North.
    #[arg(long, default_value_t = 90.0, allow_hyphen_values = true)]
    bearing_deg: f64,
    /// Output directory; one det_<km>km.csv per distance.
    #[arg(long)]
    out_dir: PathBuf,
}

fn parse_triple(s: &str) -> Result<Vector3<f64>, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated numbers, got '{s}'"));
    }
    let mut v = [0.0; 3];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = p.parse::<f64>().map_err(|e| format!("'{p}': {e}"))?;
        if !slot.is_finite() {
            return Err(format!("'{p}' is not finite"));
        }
    }
    Ok(Vector3::from(v))
}

fn epoch_of(scenario: &Scenario, i: usize) -> Result<&gnssxa::scenario::Epoch, Error> {
    scenario
        .epochs
        .get(i)
        .ok_or_else(|| Error::Domain(format!("epoch {i} out of range (scenario has {})", scenario.epochs.len())))
}

fn tamper_json(t: &TamperVector, epoch: usize, scenario: &Scenario) -> String {
    let kind = format!("{:?}", t.kind).to_lowercase();
    let obs = &scenario.epochs[epoch].observations;
    let v = json!({
        "epoch": epoch,
        "kind": kind,
        "sat_ids": obs.iter().map(|o| o.sat_id.clone()).collect::<Vec<_>>(),
        "auth": obs.iter().map(|o| o.authenticated).collect::<Vec<_>>(),
        "delta_r_m": t.delta_r.iter().cloned().collect::<Vec<_>>(),
    });
    serde_json::to_string_pretty(&v).expect("json value") + "\n"
}

fn run_gen(a: &GenArgs) -> Result<(), Error> {
    let site = Geodetic::new(a.lat_deg, a.lon_deg, a.alt_m);
    let truth = ReceiverTruth::seeded(site.to_ecef(), a.m, a.seed);
    let scenario = generate_scenario(a.n_auth, a.n_open, a.m, &truth, a.epochs, a.seed)?;
    save_scenario(&scenario, &a.out)?;
    info!("wrote {} epochs to {}", scenario.epochs.len(), a.out.display());
    Ok(())
}

fn run_solve(a: &SolveArgs) -> Result<(), Error> {
    let scenario = load_scenario(&a.scenario)?;
    let mode = match a.mode {
        SolveMode::Multi => ClockMode::MultiRef { m: scenario.meta.m },
        SolveMode::Single => ClockMode::SingleRef,
    };
    let cfg = SolverConfig::with_isb(scenario.meta.isb_true_s.clone());
    let mut out = String::from("epoch,t_s,x,y,z");
    for k in 1..=mode.clock_count() {
        out.push_str(&format!(",clk{k}_us"));
    }
    out.push_str(",iterations,converged\n");
    for (i, epoch) in scenario.epochs.iter().enumerate() {
        let rep = solve(epoch, &PvtSolution::cold_start(mode), &cfg)?;
        let s = &rep.solution;
        let mut line = format!(
            "{i},{},{},{},{}",
            format_sig(epoch.time_tag, 12),
            format_sig(s.pos.x, 12),
            format_sig(s.pos.y, 12),
            format_sig(s.pos.z, 12)
        );
        for k in 0..s.clocks_m.len() {
            line.push_str(&format!(",{}", format_sig(s.clock_s(k) * 1e6, 12)));
        }
        line.push_str(&format!(",{},{}\n", rep.iterations, rep.converged));
        out.push_str(&line);
    }
    match &a.out {
        Some(p) => write_text(p, &out),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

fn run_attack_time(a: &AttackTimeArgs) -> Result<(), Error> {
    let scenario = load_scenario(&a.scenario)?;
    let epoch = epoch_of(&scenario, a.epoch)?;
    let p_target = a.target.resolve(&scenario)?;
    warn_if_beyond_linear_range(&scenario.meta.receiver_truth.pos_ecef, &p_target.pos);
    let plan = AttackPlan::TimeTargeted { p_target };
    let ctx = AttackContext::new(scenario.meta.m, scenario.meta.isb_true_s.clone()).with_refine_passes(a.refine_passes);
    let tamper = synthesize(epoch, &plan, &ctx)?;
    write_text(&a.out, &tamper_json(&tamper, a.epoch, &scenario))
}

fn run_attack_pos(a: &AttackPosArgs) -> Result<(), Error> {
    let scenario = load_scenario(&a.scenario)?;
    let epoch = epoch_of(&scenario, a.epoch)?;
    let plan = a.attack.plan(&scenario);
    let ctx = AttackContext::new(scenario.meta.m, scenario.meta.isb_true_s.clone());
    let tamper = synthesize(epoch, &plan, &ctx)?;
    write_text(&a.out, &tamper_json(&tamper, a.epoch, &scenario))?;
    if let Some(trace) = &a.trace {
        let check =
            CheckConfig::Position(PositionCheckConfig::new(scenario.meta.receiver_truth.pos_ecef, f64::INFINITY)?);
        let cfg = ExperimentConfig::new(plan, check, a.noise.model()?, 1);
        write_text(trace, &trace_csv(&clock_trace(&scenario, &cfg, a.t_start_s)?))?;
    }
    Ok(())
}

fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![hi],
        _ => (0..n).map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp()).collect(),
    }
}

fn run_det_cmd(a: &DetArgs) -> Result<(), Error> {
    let scenario = load_scenario(&a.exp.scenario)?;
    let (plan, default_check) = match a.attack {
        AttackKind::Time => (AttackPlan::TimeTargeted { p_target: a.target.resolve(&scenario)? }, CheckKind::Isb),
        AttackKind::Relay | AttackKind::Generation => {
            let mode = if a.attack == AttackKind::Relay { PosMode::Relay } else { PosMode::Generation };
            let pos = PosAttackArgs { mode, gamma_t_us: a.gamma_t_us, xi_enu_m: a.xi_enu_m };
            (pos.plan(&scenario), CheckKind::Position)
        }
    };
    let cfg = a.exp.config(&scenario, plan, default_check)?;
    let (records, curve) = run_det(&scenario, &cfg)?;
    let mut curves = vec![curve];
    if a.closed_form_points > 0 {
        curves.push(closed_form_det(&scenario, &cfg, &log_spaced(1e-3, 1.0, a.closed_form_points))?);
    }
    write_text(&a.out, &det_csv(&curves.iter().collect::<Vec<_>>()))?;
    if let Some(p) = &a.trials {
        write_text(p, &trials_csv(&records))?;
    }
    Ok(())
}

fn run_sweep(a: &SweepArgs) -> Result<(), Error> {
    let scenario = load_scenario(&a.exp.scenario)?;
    let placeholder = AttackPlan::TimeTargeted { p_target: scenario.meta.receiver_truth.solution() };
    let cfg = a.exp.config(&scenario, placeholder, CheckKind::Isb)?;
    let distances_m: Vec<f64> = a.distances_km.iter().map(|d| d * 1e3).collect();
    std::fs::create_dir_all(&a.out_dir)
        .map_err(|source| Error::Io { path: a.out_dir.display().to_string(), source })?;
    for (r, km) in sweep_target_distance(&scenario, &cfg, &distances_m, a.bearing_deg)?.iter().zip(&a.distances_km) {
        let path = a.out_dir.join(format!("det_{km}km.csv"));
        write_text(&path, &det_csv(&[&r.curve]))?;
    }
    Ok(())
}

fn error_kind(e: &Error) -> &'static str {
    match e.root() {
        Error::Parse { .. } => "parse",
        Error::Schema(_) => "schema",
        Error::Io { .. } => "io",
        Error::InfeasibleGeometry(_) => "infeasible_geometry",
        Error::DegenerateGeometry(_) => "degenerate_geometry",
        Error::DimensionMismatch(_) => "dimension_mismatch",
        Error::LengthMismatch { .. } => "length_mismatch",
        Error::RankDeficient(_) => "rank_deficient",
        Error::Infeasible(_) => "infeasible",
        Error::SingularProjection(_) => "singular_projection",
        Error::NotSpd(_) => "not_spd",
        Error::Domain(_) => "domain",
        Error::EmptyHypothesis(_) => "empty_hypothesis",
        Error::Trial { .. } => "trial",
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_infeasible_attack() {
        EXIT_INFEASIBLE
    } else {
        EXIT_DATA
    }
}

fn configure_threads() {
    let Ok(v) = std::env::var("GNSSXA_THREADS") else { return };
    match v.trim().parse::<usize>() {
        Ok(n) if n >= 1 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("could not size the worker pool: {e}");
            }
        }
        _ => log::warn!("ignoring GNSSXA_THREADS={v}: expected a positive integer"),
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Gen(a) => run_gen(a),
        Command::Solve(a) => run_solve(a),
        Command::AttackTime(a) => run_attack_time(a),
        Command::AttackPos(a) => run_attack_pos(a),
        Command::Det(a) => run_det_cmd(a),
        Command::Sweep(a) => run_sweep(a),
    }
}

fn report(e: &Error, as_json: bool) {
    if as_json {
        let v = json!({ "error": error_kind(e), "message": e.to_string(), "exit_code": exit_code(e) });
        eprintln!("{v}");
    } else {
        eprintln!("error: {e}");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    configure_threads();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e, cli.json);
            ExitCode::from(exit_code(&e))
        }
    }
}
