//! Closed-loop platoon simulation.
//!
//! Vehicle 0 is a scripted background HV, vehicle 1 the human-driven platoon
//! leader (stochastic driver model), vehicles 2.. the controlled followers.
//! Vehicles are point masses; the gap of a vehicle is the distance to the
//! one directly ahead of it. Leader accelerations only depend on the seed and
//! the background HV, so runs with different controllers share them.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{Controller, ControllerConfig, ControllerKind};
use crate::driver::{equilibrium_headway, sample_accel, AccelBounds, DriverParams};
use crate::dynamics::State;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport, SafetyParams};
use crate::qp::QpStatus;
use crate::tree::{LeadEnv, PredecessorForecast};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlatoonConfig {
    pub n_followers: usize,
    /// Desired gap to the predecessor (m).
    pub desired_headway: f64,
    pub dt: f64,
    pub duration: f64,
    pub controller: ControllerKind,
    pub controller_cfg: ControllerConfig,
    /// Parameters of the human driver at the head of the platoon.
    pub driver_params: DriverParams,
    pub seed: u64,
    /// RNG stream within the seed; sweeps use the cell index.
    pub rng_stream: u64,
    pub initial_speed: f64,
    /// Initial gap between the leader and the background HV; defaults to the
    /// driver's equilibrium headway at the initial speed.
    pub initial_lead_gap: Option<f64>,
    /// Initial gaps of the followers; default to `desired_headway`.
    pub initial_gaps: Option<Vec<f64>>,
    /// Record per-step solver wall time. Timing columns are the only
    /// non-reproducible part of a trace.
    pub record_timing: bool,
}

impl Default for PlatoonConfig {
    fn default() -> Self {
        PlatoonConfig {
            n_followers: 2,
            desired_headway: 15.0,
            dt: 0.1,
            duration: 30.0,
            controller: ControllerKind::Sdhl,
            controller_cfg: ControllerConfig::default(),
            driver_params: DriverParams::default(),
            seed: 0,
            rng_stream: 0,
            initial_speed: 17.0,
            initial_lead_gap: None,
            initial_gaps: None,
            record_timing: true,
        }
    }
}

impl PlatoonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_followers == 0 {
            return Err(Error::param("n_followers", "at least one follower is required"));
        }
        if !(self.desired_headway > 0.0) {
            return Err(Error::param("desired_headway", "must be positive"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::param("dt", "must be positive"));
        }
        if !(self.duration >= self.dt) {
            return Err(Error::param("duration", "must cover at least one step"));
        }
        if (self.controller_cfg.dt - self.dt).abs() > 1e-12 {
            return Err(Error::param("controller_cfg.dt", "must equal the simulation step"));
        }
        if !(self.initial_speed >= 0.0) {
            return Err(Error::param("initial_speed", "must be nonnegative"));
        }
        if let Some(g) = &self.initial_gaps {
            if g.len() != self.n_followers || g.iter().any(|x| !(*x > 0.0)) {
                return Err(Error::param(
                    "initial_gaps",
                    "needs one positive gap per follower",
                ));
            }
        }
        if let Some(g) = self.initial_lead_gap {
            if !(g > 0.0) {
                return Err(Error::param("initial_lead_gap", "must be positive"));
            }
        }
        self.driver_params.validate()?;
        self.controller_cfg.validate()
    }

    pub fn n_vehicles(&self) -> usize {
        self.n_followers + 2
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioCase {
    /// Triangular speed wave around the base speed.
    Oscillation,
    /// Single speed drop, hold and recovery.
    Reduction,
    /// Piecewise-linear speed samples supplied by the user.
    CustomCsv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub case: ScenarioCase,
    /// Acceleration/deceleration magnitude of the background HV (m/s²).
    pub accel_magnitude: f64,
    /// Oscillation half-range (m/s) or speed reduction (m/s).
    pub range: f64,
    pub base_speed: f64,
    /// Cruise time before the first speed change (s).
    pub cruise_time: f64,
    /// Time spent at the reduced speed (s).
    pub hold_time: f64,
    pub recovery_accel: f64,
    /// `(t, v)` samples for [`ScenarioCase::CustomCsv`].
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub profile: Vec<[f64; 2]>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            case: ScenarioCase::Oscillation,
            accel_magnitude: 2.0,
            range: 2.0,
            base_speed: 17.0,
            cruise_time: 5.0,
            hold_time: 3.0,
            recovery_accel: 2.0,
            profile: Vec::new(),
        }
    }
}

impl ScenarioSpec {
    pub fn oscillation(accel: f64, range: f64) -> Self {
        ScenarioSpec {
            case: ScenarioCase::Oscillation,
            accel_magnitude: accel.abs(),
            range: range.abs(),
            ..ScenarioSpec::default()
        }
    }

    pub fn reduction(accel: f64, range: f64) -> Self {
        ScenarioSpec {
            case: ScenarioCase::Reduction,
            accel_magnitude: accel.abs(),
            range: range.abs(),
            ..ScenarioSpec::default()
        }
    }

    /// Reads a `t,v` CSV of background HV speeds.
    pub fn from_speed_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
        let mut profile = Vec::new();
        for (i, rec) in rdr.deserialize::<(f64, f64)>().enumerate() {
            let (t, v) = rec.map_err(|e| Error::Parse {
                row: i + 2,
                reason: e.to_string(),
            })?;
            profile.push([t, v]);
        }
        let spec = ScenarioSpec {
            case: ScenarioCase::CustomCsv,
            base_speed: profile.first().map_or(0.0, |p| p[1]),
            profile,
            ..ScenarioSpec::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self.case {
            ScenarioCase::CustomCsv => {
                if self.profile.len() < 2 {
                    return Err(Error::param("profile", "needs at least two samples"));
                }
                if self.profile.windows(2).any(|w| !(w[1][0] > w[0][0])) {
                    return Err(Error::param("profile", "times must be increasing"));
                }
                if self.profile.iter().any(|p| !(p[1] >= 0.0) || !p[0].is_finite()) {
                    return Err(Error::param("profile", "speeds must be finite and nonnegative"));
                }
            }
            _ => {
                if !(self.accel_magnitude >= 0.0) || !(self.range >= 0.0) {
                    return Err(Error::param("accel_magnitude", "magnitudes must be nonnegative"));
                }
                if !(self.base_speed >= 0.0) || !(self.cruise_time >= 0.0) || !(self.hold_time >= 0.0) {
                    return Err(Error::param("base_speed", "speeds and durations must be nonnegative"));
                }
                if self.case == ScenarioCase::Reduction && !(self.recovery_accel > 0.0) {
                    return Err(Error::param("recovery_accel", "must be positive"));
                }
            }
        }
        Ok(())
    }

    pub fn label(&self) -> &'static str {
        match self.case {
            ScenarioCase::Oscillation => "oscillation",
            ScenarioCase::Reduction => "reduction",
            ScenarioCase::CustomCsv => "custom_csv",
        }
    }
}

/// Speed of the background HV at time `t` together with its acceleration
/// (right derivative).
fn front_hv_motion(spec: &ScenarioSpec, t: f64) -> (f64, f64) {
    let base = spec.base_speed;
    let a = spec.accel_magnitude;
    let r = spec.range;
    match spec.case {
        ScenarioCase::Oscillation => {
            if t < spec.cruise_time || a == 0.0 || r == 0.0 {
                return (base, 0.0);
            }
            let quarter = r / a;
            let p = (t - spec.cruise_time) % (4.0 * quarter);
            if p < quarter {
                (base + a * p, a)
            } else if p < 3.0 * quarter {
                (base + r - a * (p - quarter), -a)
            } else {
                (base - r + a * (p - 3.0 * quarter), a)
            }
        }
        ScenarioCase::Reduction => {
            if a == 0.0 || r == 0.0 {
                return (base, 0.0);
            }
            let drop = r.min(base);
            let t1 = spec.cruise_time;
            let t2 = t1 + drop / a;
            let t3 = t2 + spec.hold_time;
            let t4 = t3 + drop / spec.recovery_accel;
            if t < t1 {
                (base, 0.0)
            } else if t < t2 {
                (base - a * (t - t1), -a)
            } else if t < t3 {
                (base - drop, 0.0)
            } else if t < t4 {
                (base - drop + spec.recovery_accel * (t - t3), spec.recovery_accel)
            } else {
                (base, 0.0)
            }
        }
        ScenarioCase::CustomCsv => {
            let pts = &spec.profile;
            let Some(last) = pts.last() else {
                return (0.0, 0.0);
            };
            if t < pts[0][0] {
                return (pts[0][1], 0.0);
            }
            if t >= last[0] {
                return (last[1], 0.0);
            }
            let i = pts.partition_point(|p| p[0] <= t) - 1;
            let [t0, v0] = pts[i];
            let [t1, v1] = pts[i + 1];
            let slope = (v1 - v0) / (t1 - t0);
            (v0 + slope * (t - t0), slope)
        }
    }
}

/// Target acceleration of the background HV at time `t`.
pub fn front_hv_profile(spec: &ScenarioSpec, t: f64) -> f64 {
    front_hv_motion(spec, t).1
}

pub fn front_hv_speed(spec: &ScenarioSpec, t: f64) -> f64 {
    front_hv_motion(spec, t).0.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    FrontHv,
    Lead,
    Cav,
}

impl Role {
    fn of(vehicle: usize) -> Role {
        match vehicle {
            0 => Role::FrontHv,
            1 => Role::Lead,
            _ => Role::Cav,
        }
    }
}

/// One vehicle at one step. Command, gap and solver fields are empty where
/// they do not apply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub vehicle: usize,
    pub role: Role,
    pub x: f64,
    pub v: f64,
    pub a: f64,
    pub u: Option<f64>,
    pub gap: Option<f64>,
    pub solve_ms: Option<f64>,
    pub qp_status: Option<QpStatus>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Collision {
    pub t: f64,
    pub vehicle: usize,
    pub gap: f64,
}

/// Rows ordered by step, then by vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub dt: f64,
    pub n_vehicles: usize,
    pub rows: Vec<TraceRow>,
    pub collision: Option<Collision>,
}

impl SimulationTrace {
    pub fn steps(&self) -> usize {
        self.rows.len() / self.n_vehicles.max(1)
    }

    pub fn vehicle_rows(&self, vehicle: usize) -> impl Iterator<Item = &TraceRow> + '_ {
        self.rows.iter().skip(vehicle).step_by(self.n_vehicles.max(1))
    }

    pub fn role_of(&self, vehicle: usize) -> Option<Role> {
        self.rows.get(vehicle).map(|r| r.role)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        for r in &self.rows {
            wtr.serialize(r).map_err(csv_err)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Parses a trace CSV. Collision information is not stored in the file;
    /// it is recovered from a nonpositive final gap.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut rows: Vec<TraceRow> = Vec::new();
        for (i, rec) in rdr.deserialize().enumerate() {
            rows.push(rec.map_err(|e| Error::Parse {
                row: i + 2,
                reason: e.to_string(),
            })?);
        }
        let n_vehicles = rows.iter().take_while(|r| r.t == rows[0].t).count();
        if n_vehicles == 0 || rows.len() % n_vehicles != 0 {
            return Err(Error::InvalidInput("trace has incomplete steps".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.vehicle != i % n_vehicles {
                return Err(Error::Parse {
                    row: i + 2,
                    reason: format!("expected vehicle {}", i % n_vehicles),
                });
            }
        }
        let dt = if rows.len() > n_vehicles {
            rows[n_vehicles].t - rows[0].t
        } else {
            0.0
        };
        Ok(SimulationTrace {
            dt,
            n_vehicles,
            rows,
            collision: None,
        })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

pub fn run_simulation(pc: &PlatoonConfig, spec: &ScenarioSpec) -> Result<SimulationTrace> {
    pc.validate()?;
    spec.validate()?;
    let nv = pc.n_vehicles();
    let dt = pc.dt;
    let h = pc.desired_headway;
    let tau = pc.controller_cfg.tau_a;
    let bounds = AccelBounds::default();

    let mut rng = ChaCha8Rng::seed_from_u64(pc.seed);
    rng.set_stream(pc.rng_stream);

    let v_init = front_hv_speed(spec, 0.0);
    let lead_gap = match pc.initial_lead_gap {
        Some(g) => g,
        None => equilibrium_headway(pc.initial_speed, &pc.driver_params)?,
    };
    let mut x = vec![0.0; nv];
    let mut v = vec![pc.initial_speed; nv];
    let mut a = vec![0.0; nv];
    v[0] = v_init;
    x[1] = -lead_gap;
    for i in 2..nv {
        let gap = pc.initial_gaps.as_ref().map_or(h, |g| g[i - 2]);
        x[i] = x[i - 1] - gap;
    }

    let mut controllers = (0..pc.n_followers)
        .map(|_| Controller::new(pc.controller, pc.controller_cfg.clone()))
        .collect::<Result<Vec<_>>>()?;

    // plans broadcast by each follower at the previous step
    let mut broadcast: Vec<Vec<f64>> = vec![Vec::new(); pc.n_followers];
    let steps = pc.steps();
    let mut rows = Vec::with_capacity(steps * nv);
    let mut collision = None;
    for k in 0..steps {
        let t = k as f64 * dt;
        let v_front_next = front_hv_speed(spec, t + dt);
        a[0] = (v_front_next - v[0]) / dt;

        let mut u = vec![None; nv];
        let mut solve = vec![None; nv];
        for (f, ctrl) in controllers.iter_mut().enumerate() {
            let i = f + 2;
            let x0 = State {
                gap_err_leader: (f + 1) as f64 * h - (x[1] - x[i]),
                dv_leader: v[1] - v[i],
                gap_err_pred: h - (x[i - 1] - x[i]),
                dv_pred: v[i - 1] - v[i],
                accel: a[i],
            };
            let env = LeadEnv {
                v_lead: v[1],
                headway: x[0] - x[1],
                a_lead: a[1],
                a_pred: a[i - 1],
                v_front: v[0],
            };
            let forecast = if f == 0 {
                PredecessorForecast::Leader
            } else {
                PredecessorForecast::Planned(broadcast[f - 1].iter().skip(1).copied().collect())
            };
            let out = ctrl.step(&x0, &env, &forecast)?;
            u[i] = Some(out.u0.u_a);
            solve[i] = Some((out.solve_time * 1e3, out.qp_status));
            broadcast[f] = out.accel_forecast;
        }

        for i in 0..nv {
            rows.push(TraceRow {
                t,
                vehicle: i,
                role: Role::of(i),
                x: x[i],
                v: v[i],
                a: a[i],
                u: u[i],
                gap: (i > 0).then(|| x[i - 1] - x[i]),
                solve_ms: solve[i].map(|s| s.0).filter(|_| pc.record_timing),
                qp_status: solve[i].map(|s| s.1),
            });
        }

        let a_lead_next = sample_accel(v[1], (x[0] - x[1]).max(0.0), dt, &pc.driver_params, &mut rng, &bounds)?;
        for i in 0..nv {
            let v_next = if i == 0 { v_front_next } else { (v[i] + a[i] * dt).max(0.0) };
            x[i] += 0.5 * (v[i] + v_next) * dt;
            v[i] = v_next;
        }
        a[1] = a_lead_next;
        for i in 2..nv {
            a[i] += dt * (u[i].unwrap_or(0.0) - a[i]) / tau;
        }

        if let Some(i) = (1..nv).find(|&i| x[i - 1] - x[i] <= 0.0) {
            collision = Some(Collision {
                t: t + dt,
                vehicle: i,
                gap: x[i - 1] - x[i],
            });
            break;
        }
    }

    Ok(SimulationTrace {
        dt,
        n_vehicles: nv,
        rows,
        collision,
    })
}

/// Outcome of one sweep cell for one controller.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub cell: usize,
    pub scenario: ScenarioSpec,
    pub seed: u64,
    pub controller: ControllerKind,
    /// `ok`, `collision`, or an error message.
    pub status: String,
    pub report: Option<MetricReport>,
}

impl SweepRow {
    pub fn header(n_followers: usize) -> Vec<String> {
        let mut h: Vec<String> = ["cell", "case", "accel", "range", "seed", "controller", "status"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for f in 1..=n_followers {
            for col in ["accel_range", "avg_magnitude", "avg_frequency", "min_ps", "min_gap"] {
                h.push(format!("f{f}_{col}"));
            }
        }
        for col in ["o_t", "o_t_infinite", "solve_mean_ms", "solve_median_ms", "solve_p99_ms"] {
            h.push(col.to_string());
        }
        h
    }

    pub fn record(&self, n_followers: usize) -> Vec<String> {
        let mut r = vec![
            self.cell.to_string(),
            self.scenario.label().to_string(),
            self.scenario.accel_magnitude.to_string(),
            self.scenario.range.to_string(),
            self.seed.to_string(),
            self.controller.as_str().to_string(),
            self.status.clone(),
        ];
        let width = Self::header(n_followers).len();
        if let Some(rep) = &self.report {
            for c in rep.cavs.iter().take(n_followers) {
                for val in [c.accel_range, c.avg_magnitude, c.avg_frequency, c.min_ps, c.min_gap] {
                    r.push(val.to_string());
                }
            }
            r.push(rep.oscillation_transfer.to_string());
            r.push(rep.oscillation_transfer_infinite.to_string());
            r.push(rep.solve_time.mean_ms.to_string());
            r.push(rep.solve_time.median_ms.to_string());
            r.push(rep.solve_time.p99_ms.to_string());
        }
        r.resize(width, String::new());
        r
    }
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], n_followers: usize, w: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    wtr.write_record(SweepRow::header(n_followers)).map_err(csv_err)?;
    for r in rows {
        wtr.write_record(r.record(n_followers)).map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

/// The published sensitivity grid: oscillation magnitudes ±1..3 m/s² over
/// ranges ±1..3 m/s, and reductions at 4..6 m/s² by 3..5 m/s.
pub fn standard_grid(case: ScenarioCase) -> Vec<ScenarioSpec> {
    let mut out = Vec::new();
    match case {
        ScenarioCase::Oscillation => {
            for a in [1.0, 2.0, 3.0] {
                for r in [1.0, 2.0, 3.0] {
                    out.push(ScenarioSpec::oscillation(a, r));
                }
            }
        }
        ScenarioCase::Reduction => {
            for a in [4.0, 5.0, 6.0] {
                for r in [3.0, 4.0, 5.0] {
                    out.push(ScenarioSpec::reduction(a, r));
                }
            }
        }
        ScenarioCase::CustomCsv => {}
    }
    out
}

/// Runs every (scenario, seed, controller) combination. Cells are indexed by
/// scenario and seed; both controllers of a cell share its RNG stream.
/// `threads` caps the worker count (`None` uses the global pool).
pub fn run_sweep(
    scenarios: &[ScenarioSpec],
    seeds: &[u64],
    controllers: &[ControllerKind],
    pc: &PlatoonConfig,
    safety: &SafetyParams,
    threads: Option<usize>,
) -> Result<Vec<SweepRow>> {
    if scenarios.is_empty() || seeds.is_empty() || controllers.is_empty() {
        return Err(Error::InvalidInput("sweep grid is empty".into()));
    }
    let mut jobs = Vec::new();
    for (si, spec) in scenarios.iter().enumerate() {
        for &seed in seeds {
            for &kind in controllers {
                jobs.push((si, spec, seed, kind));
            }
        }
    }
    let run = |&(cell, spec, seed, kind): &(usize, &ScenarioSpec, u64, ControllerKind)| {
        let cfg = PlatoonConfig {
            controller: kind,
            seed,
            rng_stream: cell as u64,
            ..pc.clone()
        };
        let (status, report) = match run_simulation(&cfg, spec).and_then(|tr| Ok((tr.collision.is_some(), evaluate(&tr, safety)?))) {
            Ok((hit, rep)) => ((if hit { "collision" } else { "ok" }).to_string(), Some(rep)),
            Err(e) => (format!("error: {e}"), None),
        };
        SweepRow {
            cell,
            scenario: spec.clone(),
            seed,
            controller: kind,
            status,
            report,
        }
    };
    Ok(match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::InvalidInput(e.to_string()))?
            .install(|| jobs.par_iter().map(run).collect()),
        None => jobs.par_iter().map(run).collect(),
    })
}
