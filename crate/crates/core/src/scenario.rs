//! Observation data model, synthetic scenario generation, measurement noise
//! and the JSON scenario file format.
//!
//! Clock terms are stored in seconds here; the solver works in meters.
//! Earth rotation during signal flight (Sagnac) is not modeled by the
//! generator, and the solver does not correct for it either.

use std::fs;
use std::io;
use std::path::Path;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::coords::{ecef_to_enu_rotation, elevation, Geodetic};
use crate::numfmt::format_sig;
use crate::pvt::{predict_pseudorange, PvtSolution};
use crate::{Error, Result, SPEED_OF_LIGHT};

/// Orbit radius of the synthetic MEO shell (GPS-like), meters.
pub const MEO_RADIUS_M: f64 = 26_560_000.0;
/// Earth gravitational parameter, m^3/s^2.
const GM_EARTH: f64 = 3.986_004_418e14;
/// Minimum elevation a generated satellite may reach during the scenario.
pub const ELEVATION_MASK_DEG: f64 = 5.0;
/// Allowed range of satellite distance from the Earth's center for MEO.
pub const MEO_RADIUS_RANGE_M: (f64, f64) = (2.0e7, 3.0e7);

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct SatelliteObservation {
    pub sat_id: String,
    /// 1-based constellation (time reference) index.
    pub constellation: usize,
    pub authenticated: bool,
    pub pos_ecef: Vector3<f64>,
    /// Satellite clock bias, seconds.
    pub sat_clock_bias_s: f64,
    /// Total atmospheric delay, meters.
    pub atmo_delay_m: f64,
    /// Measured pseudorange, meters.
    pub pseudorange_m: f64,
}

/// One measurement epoch. Authenticated observations always come first.
#[derive(Debug, Clone, PartialEq)]
pub struct Epoch {
    pub time_tag: f64,
    pub observations: Vec<SatelliteObservation>,
}

impl Epoch {
    pub fn n(&self) -> usize {
        self.observations.len()
    }

    pub fn n_auth(&self) -> usize {
        self.observations.iter().filter(|o| o.authenticated).count()
    }

    pub fn n_open(&self) -> usize {
        self.n() - self.n_auth()
    }

    /// True when every authenticated observation precedes every open one.
    pub fn is_auth_first(&self) -> bool {
        let n_auth = self.n_auth();
        self.observations.iter().take(n_auth).all(|o| o.authenticated)
    }

    pub fn pseudoranges(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.pseudorange_m).collect()
    }

    /// Mask that is true on the open (non-authenticated) satellites.
    pub fn open_mask(&self) -> Vec<bool> {
        self.observations.iter().map(|o| !o.authenticated).collect()
    }

    /// Number of satellites per constellation, index 0 for constellation 1.
    pub fn constellation_counts(&self, m: usize) -> Vec<usize> {
        let mut counts = vec![0; m];
        for o in &self.observations {
            if (1..=m).contains(&o.constellation) {
                counts[o.constellation - 1] += 1;
            }
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReceiverTruth {
    pub pos_ecef: Vector3<f64>,
    /// True receiver clock bias for each constellation time reference, seconds.
    pub clock_bias_s: Vec<f64>,
}

impl ReceiverTruth {
    /// Truth at `pos` with seeded clock biases: a reference bias within
    /// +-100 us and inter-system offsets within +-50 ns.
    pub fn seeded(pos_ecef: Vector3<f64>, m: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c10c);
        let t1: f64 = rng.random_range(-100e-6..100e-6);
        let mut clock_bias_s = vec![t1];
        for _ in 1..m {
            clock_bias_s.push(t1 + rng.random_range(-50e-9..50e-9));
        }
        Self { pos_ecef, clock_bias_s }
    }

    /// Multi-reference PVT state equal to this truth (clocks in meters).
    pub fn solution(&self) -> PvtSolution {
        PvtSolution::multi_ref(self.pos_ecef, self.clock_bias_s.iter().map(|t| SPEED_OF_LIGHT * t).collect())
    }

    /// Single-reference PVT state equal to this truth (reference clock 1).
    pub fn single_ref_solution(&self) -> PvtSolution {
        PvtSolution::single_ref(self.pos_ecef, SPEED_OF_LIGHT * self.clock_bias_s[0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioMeta {
    /// Number of constellations (time references).
    pub m: usize,
    pub receiver_truth: ReceiverTruth,
    /// Inter-system bias of constellations 2..=m against constellation 1, seconds.
    pub isb_true_s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub meta: ScenarioMeta,
    pub epochs: Vec<Epoch>,
}

/// Range noise at the victim (`sigma_l`) and at the attacker's relay
/// receiver (`sigma_a`), both in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub sigma_l: f64,
    pub sigma_a: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn new(sigma_l: f64, sigma_a: f64, seed: u64) -> Result<Self> {
        if !(sigma_l >= 0.0 && sigma_a >= 0.0) || !sigma_l.is_finite() || !sigma_a.is_finite() {
            return Err(Error::Domain(format!(
                "noise standard deviations must be finite and >= 0 (sigma_l={sigma_l}, sigma_a={sigma_a})"
            )));
        }
        Ok(Self { sigma_l, sigma_a, seed })
    }

    pub fn noiseless() -> Self {
        Self { sigma_l: 0.0, sigma_a: 0.0, seed: 0 }
    }

    /// Standard deviation of a tampered range: victim noise plus, for relayed
    /// signals, the attacker receiver's noise.
    pub fn sigma_tampered(&self, relayed: bool) -> f64 {
        if relayed {
            self.sigma_l.hypot(self.sigma_a)
        } else {
            self.sigma_l
        }
    }
}

/// One set of standard-normal draws for an epoch: a victim-side component
/// for every satellite and an attacker-side component for every satellite.
/// Keeping them separate lets the legitimate and attacked copies of a trial
/// share the victim noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub victim: Vec<f64>,
    pub attacker: Vec<f64>,
}

impl NoiseDraw {
    pub fn sample<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let victim = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let attacker = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Self { victim, attacker }
    }

    /// Perturbs the pseudoranges: `sigma_l * z_v` on every satellite plus
    /// `sigma_a * z_a` on satellites flagged in `relayed_mask`.
    pub fn apply(&self, epoch: &Epoch, noise: &NoiseModel, relayed_mask: &[bool]) -> Result<Epoch> {
        let n = epoch.n();
        for len in [self.victim.len(), self.attacker.len(), relayed_mask.len()] {
            if len != n {
                return Err(Error::LengthMismatch { expected: n, got: len });
            }
        }
        let mut out = epoch.clone();
        for (j, obs) in out.observations.iter_mut().enumerate() {
            let mut e = noise.sigma_l * self.victim[j];
            if relayed_mask[j] {
                e += noise.sigma_a * self.attacker[j];
            }
            obs.pseudorange_m += e;
        }
        Ok(out)
    }
}

/// Adds independent zero-mean Gaussian noise to every pseudorange.
///
/// Untampered ranges get std `sigma_l`; ranges flagged in `tampered_mask`
/// get std `sqrt(sigma_l^2 + sigma_a^2)`. Generation attacks pass
/// `sigma_a = 0`.
pub fn add_noise<R: Rng + ?Sized>(
    epoch: &Epoch,
    noise: &NoiseModel,
    tampered_mask: &[bool],
    rng: &mut R,
) -> Result<Epoch> {
    NoiseDraw::sample(epoch.n(), rng).apply(epoch, noise, tampered_mask)
}

fn constellation_prefix(k: usize) -> String {
    match k {
        1 => "G".into(),
        2 => "E".into(),
        3 => "C".into(),
        4 => "R".into(),
        5 => "J".into(),
        _ => format!("S{k}-"),
    }
}

/// Constellation of each satellite, authenticated ones first.
///
/// When the open satellites can cover constellations 2..=m, the
/// authenticated satellites form constellation 1 and the open ones are dealt
/// over 2, ..., m, 1, 2, ... so that, given enough of them, every time
/// reference also has open satellites. Otherwise satellites are dealt
/// round-robin.
fn assign_constellations(n_auth: usize, n_open: usize, m: usize) -> Vec<usize> {
    if m == 1 {
        return vec![1; n_auth + n_open];
    }
    if n_auth >= 1 && n_open >= m - 1 {
        let mut out = vec![1; n_auth];
        out.extend((0..n_open).map(|i| 1 + (i + 1) % m));
        out
    } else {
        (0..n_auth + n_open).map(|i| 1 + i % m).collect()
    }
}

struct Orbit {
    p0: Vector3<f64>,
    along: Vector3<f64>,
    rate: f64,
}

impl Orbit {
    fn position(&self, t: f64) -> Vector3<f64> {
        let (s, c) = (self.rate * t).sin_cos();
        (self.p0 * c + self.along * s) * MEO_RADIUS_M
    }
}

/// Synthesizes a scenario with `n_auth` authenticated and `n_open` open
/// satellites on a circular MEO shell, seen from a static receiver.
///
/// Satellites get evenly spaced azimuth slots (shuffled, random offset) and
/// elevations uniform in [15, 75] degrees at the first epoch, then move along
/// circular orbits at the MEO angular rate; every satellite stays above the
/// 5 degree mask for the whole scenario. Pseudoranges are noiseless and
/// reproduce exactly through [`predict_pseudorange`] at the truth.
pub fn generate_scenario(
    n_auth: usize,
    n_open: usize,
    m: usize,
    receiver_truth: &ReceiverTruth,
    n_epochs: usize,
    geometry_seed: u64,
) -> Result<Scenario> {
    let n = n_auth + n_open;
    if n < 4 {
        return Err(Error::Domain(format!("need at least 4 satellites, got {n}")));
    }
    if m < 1 {
        return Err(Error::Domain("need at least one constellation".into()));
    }
    if m >= 2 && n < m {
        return Err(Error::Domain(format!("{n} satellites cannot cover {m} constellations")));
    }
    if receiver_truth.clock_bias_s.len() != m {
        return Err(Error::LengthMismatch { expected: m, got: receiver_truth.clock_bias_s.len() });
    }
    let rx = receiver_truth.pos_ecef;
    if !rx.iter().all(|v| v.is_finite()) || rx.norm() >= MEO_RADIUS_M * 0.9 {
        return Err(Error::InfeasibleGeometry(format!(
            "receiver at {:.1} m from the Earth's center cannot see the MEO shell",
            rx.norm()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(geometry_seed);
    let constellations = assign_constellations(n_auth, n_open, m);
    let to_ecef = ecef_to_enu_rotation(&rx).transpose();
    let rate = (GM_EARTH / MEO_RADIUS_M.powi(3)).sqrt();

    let az_offset: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(&mut rng);

    let mut orbits = Vec::with_capacity(n);
    for &slot in slots.iter() {
        let az = az_offset + std::f64::consts::TAU * slot as f64 / n as f64;
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let el = rng.random_range(15f64..75.0).to_radians();
            let los_enu = Vector3::new(el.cos() * az.sin(), el.cos() * az.cos(), el.sin());
            let u = to_ecef * los_enu;
            let pu = rx.dot(&u);
            let s = -pu + (pu * pu - rx.norm_squared() + MEO_RADIUS_M * MEO_RADIUS_M).sqrt();
            let p0 = (rx + u * s).normalize();
            let k = Vector3::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            );
            let normal = p0.cross(&k);
            if normal.norm() < 1e-6 {
                continue;
            }
            let along = normal.normalize().cross(&p0);
            let orbit = Orbit { p0, along, rate };
            let visible = (0..n_epochs.max(1))
                .all(|e| elevation(&rx, &orbit.position(e as f64)) > ELEVATION_MASK_DEG.to_radians());
            if visible {
                placed = Some(orbit);
                break;
            }
        }
        orbits.push(placed.ok_or_else(|| {
            Error::InfeasibleGeometry(format!(
                "could not keep a satellite above {ELEVATION_MASK_DEG} deg for {n_epochs} epochs"
            ))
        })?);
    }

    let mut per_const = vec![0usize; m];
    let sats: Vec<(String, usize, bool, f64, f64)> = constellations
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            per_const[k - 1] += 1;
            let id = format!("{}{:02}", constellation_prefix(k), per_const[k - 1]);
            let clk: f64 = rng.random_range(-200e-6..200e-6);
            let atmo: f64 = rng.random_range(2.0..15.0);
            (id, k, j < n_auth, clk, atmo)
        })
        .collect();

    let truth = receiver_truth.solution();
    let epochs = (0..n_epochs)
        .map(|e| {
            let t = e as f64;
            let observations = sats
                .iter()
                .zip(&orbits)
                .map(|((id, k, auth, clk, atmo), orbit)| {
                    let mut obs = SatelliteObservation {
                        sat_id: id.clone(),
                        constellation: *k,
                        authenticated: *auth,
                        pos_ecef: orbit.position(t),
                        sat_clock_bias_s: *clk,
                        atmo_delay_m: *atmo,
                        pseudorange_m: 0.0,
                    };
                    obs.pseudorange_m = predict_pseudorange(&obs, &truth, &[]);
                    obs
                })
                .collect();
            Epoch { time_tag: t, observations }
        })
        .collect();

    let c1 = receiver_truth.clock_bias_s[0];
    let isb_true_s = receiver_truth.clock_bias_s[1..].iter().map(|t| t - c1).collect();
    Ok(Scenario { meta: ScenarioMeta { m, receiver_truth: receiver_truth.clone(), isb_true_s }, epochs })
}

/// Receiver location used for the reference scenarios: 45.408 N, 11.894 E,
/// 30 m above the ellipsoid.
pub fn reference_site() -> Geodetic {
    Geodetic::new(45.408, 11.894, 30.0)
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileScenario {
    meta: FileMeta,
    epochs: Vec<FileEpoch>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileMeta {
    m: usize,
    receiver_truth: FileTruth,
    isb_true_s: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileTruth {
    pos_ecef: [f64; 3],
    clock_bias_s: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileEpoch {
    t: f64,
    sats: Vec<FileSat>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileSat {
    id: String,
    constellation: usize,
    auth: bool,
    pos_ecef: [f64; 3],
    clk_s: f64,
    atmo_m: f64,
    pr_m: f64,
}

/// Compact JSON with every float written to 17 significant digits.
struct SeventeenDigits;

impl serde_json::ser::Formatter for SeventeenDigits {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            let mut s = format_sig(value, 17);
            // Keep floats recognizable as floats for readers that care.
            if !s.contains(['.', 'e']) {
                s.push_str(".0");
            }
            writer.write_all(s.as_bytes())
        } else {
            writer.write_all(b"null")
        }
    }
}

impl From<&Scenario> for FileScenario {
    fn from(s: &Scenario) -> Self {
        let v3 = |v: &Vector3<f64>| [v.x, v.y, v.z];
        FileScenario {
            meta: FileMeta {
                m: s.meta.m,
                receiver_truth: FileTruth {
                    pos_ecef: v3(&s.meta.receiver_truth.pos_ecef),
                    clock_bias_s: s.meta.receiver_truth.clock_bias_s.clone(),
                },
                isb_true_s: s.meta.isb_true_s.clone(),
            },
            epochs: s
                .epochs
                .iter()
                .map(|e| FileEpoch {
                    t: e.time_tag,
                    sats: e
                        .observations
                        .iter()
                        .map(|o| FileSat {
                            id: o.sat_id.clone(),
                            constellation: o.constellation,
                            auth: o.authenticated,
                            pos_ecef: v3(&o.pos_ecef),
                            clk_s: o.sat_clock_bias_s,
                            atmo_m: o.atmo_delay_m,
                            pr_m: o.pseudorange_m,
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

impl From<FileScenario> for Scenario {
    fn from(f: FileScenario) -> Self {
        let v3 = |a: [f64; 3]| Vector3::new(a[0], a[1], a[2]);
        Scenario {
            meta: ScenarioMeta {
                m: f.meta.m,
                receiver_truth: ReceiverTruth {
                    pos_ecef: v3(f.meta.receiver_truth.pos_ecef),
                    clock_bias_s: f.meta.receiver_truth.clock_bias_s,
                },
                isb_true_s: f.meta.isb_true_s,
            },
            epochs: f
                .epochs
                .into_iter()
                .map(|e| Epoch {
                    time_tag: e.t,
                    observations: e
                        .sats
                        .into_iter()
                        .map(|s| SatelliteObservation {
                            sat_id: s.id,
                            constellation: s.constellation,
                            authenticated: s.auth,
                            pos_ecef: v3(s.pos_ecef),
                            sat_clock_bias_s: s.clk_s,
                            atmo_delay_m: s.atmo_m,
                            pseudorange_m: s.pr_m,
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

impl Scenario {
    /// Checks the structural rules a scenario file must obey.
    pub fn validate(&self) -> Result<()> {
        let m = self.meta.m;
        if m < 1 {
            return Err(Error::Schema("meta.m must be >= 1".into()));
        }
        let truth = &self.meta.receiver_truth;
        if truth.clock_bias_s.len() != m {
            return Err(Error::Schema(format!(
                "meta.receiver_truth.clock_bias_s has {} entries, expected m = {m}",
                truth.clock_bias_s.len()
            )));
        }
        if self.meta.isb_true_s.len() != m - 1 {
            return Err(Error::Schema(format!(
                "meta.isb_true_s has {} entries, expected m - 1 = {}",
                self.meta.isb_true_s.len(),
                m - 1
            )));
        }
        let truth_finite = truth.pos_ecef.iter().chain(&truth.clock_bias_s).all(|v| v.is_finite());
        if !truth_finite || !self.meta.isb_true_s.iter().all(|v| v.is_finite()) {
            return Err(Error::Schema("meta contains non-finite values".into()));
        }
        for (ei, epoch) in self.epochs.iter().enumerate() {
            let n = epoch.n();
            if n < 4 {
                return Err(Error::Schema(format!("epochs[{ei}]: under-determined, {n} satellites (need >= 4)")));
            }
            if !epoch.time_tag.is_finite() {
                return Err(Error::Schema(format!("epochs[{ei}].t is not finite")));
            }
            if !epoch.is_auth_first() {
                return Err(Error::Schema(format!("epochs[{ei}]: open satellite listed before an authenticated one")));
            }
            for (si, obs) in epoch.observations.iter().enumerate() {
                let at = format!("epochs[{ei}].sats[{si}] ({})", obs.sat_id);
                if !(1..=m).contains(&obs.constellation) {
                    return Err(Error::Schema(format!("{at}: constellation {} outside 1..={m}", obs.constellation)));
                }
                let finite = obs.pos_ecef.iter().all(|v| v.is_finite())
                    && obs.sat_clock_bias_s.is_finite()
                    && obs.atmo_delay_m.is_finite()
                    && obs.pseudorange_m.is_finite();
                if !finite {
                    return Err(Error::Schema(format!("{at}: non-finite field")));
                }
                if obs.atmo_delay_m < 0.0 {
                    return Err(Error::Schema(format!("{at}: atmo_m must be >= 0")));
                }
                let r = obs.pos_ecef.norm();
                if !(MEO_RADIUS_RANGE_M.0..=MEO_RADIUS_RANGE_M.1).contains(&r) {
                    log::warn!("{at}: satellite radius {r:.0} m outside the MEO range");
                }
            }
            for (i, a) in epoch.observations.iter().enumerate() {
                if epoch.observations[..i].iter().any(|b| b.sat_id == a.sat_id) {
                    return Err(Error::Schema(format!("epochs[{ei}]: duplicate satellite id {}", a.sat_id)));
                }
            }
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> String {
        let mut buf = Vec::new();
        let mut ser = serde_json::Serializer::with_formatter(&mut buf, SeventeenDigits);
        FileScenario::from(self).serialize(&mut ser).expect("in-memory serialization");
        buf.push(b'\n');
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: FileScenario = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })?;
        let scenario = Scenario::from(file);
        scenario.validate()?;
        Ok(scenario)
    }
}

pub fn save_scenario(scenario: &Scenario, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, scenario.to_json_string()).map_err(|source| Error::Io { path: path.display().to_string(), source })
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    Scenario::from_json_str(&text)
}
