use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use platoon_core::calibration::{calibrate, GaConfig, TrajectoryDataset};
use platoon_core::controller::{Controller, ControllerKind};
use platoon_core::driver::{equilibrium_headway, DriverParams};
use platoon_core::dynamics::State;
use platoon_core::metrics::{evaluate, SafetyParams, TimingStats};
use platoon_core::sim::{
    run_simulation, run_sweep, standard_grid, write_sweep_csv, PlatoonConfig, ScenarioCase, ScenarioSpec,
    SimulationTrace,
};
use platoon_core::tree::{LeadEnv, PredecessorForecast};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

const THREADS_ENV: &str = "PLATOON_SMPC_THREADS";

#[derive(Parser)]
#[command(name = "platoon-smpc", version, about = "Stochastic MPC platoon simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop simulation and write its trace and metrics.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scenario: ScenarioFlags,
        /// Background HV speed profile as a `t,v` CSV (replaces --case).
        #[arg(long)]
        speed_csv: Option<PathBuf>,
    },
    /// Run a grid of scenarios, seeds and controllers.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scenario: ScenarioFlags,
        /// Grid JSON: `{"scenarios": [...], "seeds": [...], "controllers": [...]}`.
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Number of seeds (0..N) when no grid file or --seed is given.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Fit the driver model to a trajectory CSV.
    Calibrate {
        /// CSV with header `t,v_lead,gap,a_lead_next`.
        #[arg(long)]
        data: PathBuf,
        /// GA settings JSON (any subset of the GA fields).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        generations: Option<usize>,
        #[arg(long)]
        population: Option<usize>,
    },
    /// Time controller steps for several tree sizes.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        controller: Option<ControllerArg>,
        #[arg(long)]
        branching: Option<usize>,
        /// Tree sizes to time.
        #[arg(long, value_delimiter = ',', default_value = "10,20,30,40,50,60,70,80,90,100")]
        nodes: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        reps: usize,
    },
    /// Recompute metrics from an existing trace CSV.
    Metrics {
        #[arg(long)]
        trace: PathBuf,
        /// Run config supplying the safety parameters.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Run config JSON; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    controller: Option<ControllerArg>,
    /// Tree size n_max.
    #[arg(long)]
    nodes: Option<usize>,
    /// Branching factor m.
    #[arg(long)]
    branching: Option<usize>,
}

#[derive(Args)]
struct ScenarioFlags {
    #[arg(long, value_enum)]
    case: Option<CaseArg>,
    /// Background HV acceleration magnitude (m/s²).
    #[arg(long, allow_negative_numbers = true)]
    accel: Option<f64>,
    /// Oscillation half-range or speed reduction (m/s).
    #[arg(long, allow_negative_numbers = true)]
    range: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ControllerArg {
    Sdhl,
    Baseline,
}

impl From<ControllerArg> for ControllerKind {
    fn from(c: ControllerArg) -> Self {
        match c {
            ControllerArg::Sdhl => ControllerKind::Sdhl,
            ControllerArg::Baseline => ControllerKind::Baseline,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CaseArg {
    Oscillation,
    Reduction,
}

impl From<CaseArg> for ScenarioCase {
    fn from(c: CaseArg) -> Self {
        match c {
            CaseArg::Oscillation => ScenarioCase::Oscillation,
            CaseArg::Reduction => ScenarioCase::Reduction,
        }
    }
}

/// Everything a run depends on besides its command line.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    platoon: PlatoonConfig,
    scenario: ScenarioSpec,
    safety: SafetyParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Grid {
    scenarios: Vec<ScenarioSpec>,
    seeds: Vec<u64>,
    controllers: Vec<ControllerKind>,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            scenarios: standard_grid(ScenarioCase::Oscillation)
                .into_iter()
                .chain(standard_grid(ScenarioCase::Reduction))
                .collect(),
            seeds: Vec::new(),
            controllers: vec![ControllerKind::Sdhl, ControllerKind::Baseline],
        }
    }
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    tool_version: &'static str,
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<String>,
    started_unix_s: f64,
    wall_seconds: f64,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        anyhow::anyhow!("{}: at `{at}`: {}", path.display(), e.inner())
    })
}

fn load_run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &common.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    let pc = &mut cfg.platoon;
    if let Some(s) = common.seed {
        pc.seed = s;
    }
    if let Some(c) = common.controller {
        pc.controller = c.into();
    }
    if let Some(n) = common.nodes {
        pc.controller_cfg.n_max = n;
    }
    if let Some(m) = common.branching {
        pc.controller_cfg.m = m;
    }
    Ok(cfg)
}

fn apply_scenario_flags(spec: &mut ScenarioSpec, flags: &ScenarioFlags) {
    if let Some(c) = flags.case {
        spec.case = c.into();
    }
    if let Some(a) = flags.accel {
        spec.accel_magnitude = a.abs();
    }
    if let Some(r) = flags.range {
        spec.range = r.abs();
    }
}

/// Collects named outputs in memory so a failed command leaves nothing behind.
struct Outputs {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    fn add_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_vec_pretty(value)?;
        text.push(b'\n');
        self.add(name, text);
        Ok(())
    }

    fn commit(mut self, manifest: Manifest) -> Result<()> {
        let mut m = manifest;
        m.outputs = self.files.iter().map(|f| f.0.clone()).collect();
        m.outputs.push("manifest.json".into());
        self.add_json("manifest.json", &m)?;
        fs::create_dir_all(&self.dir).with_context(|| format!("cannot create {}", self.dir.display()))?;
        for (name, bytes) in &self.files {
            let path = self.dir.join(name);
            fs::write(&path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
        }
        Ok(())
    }
}

fn manifest(command: &str, config: &impl Serialize, seeds: Vec<u64>, inputs: Vec<PathBuf>, start: (SystemTime, Instant)) -> Result<Manifest> {
    Ok(Manifest {
        command: command.to_string(),
        tool_version: env!("CARGO_PKG_VERSION"),
        config: serde_json::to_value(config)?,
        seeds,
        inputs,
        outputs: Vec::new(),
        started_unix_s: start.0.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
        wall_seconds: start.1.elapsed().as_secs_f64(),
    })
}

fn cmd_simulate(common: &Common, flags: &ScenarioFlags, speed_csv: Option<&Path>) -> Result<()> {
    let start = (SystemTime::now(), Instant::now());
    let mut cfg = load_run_config(common)?;
    apply_scenario_flags(&mut cfg.scenario, flags);
    if let Some(p) = speed_csv {
        cfg.scenario = ScenarioSpec::from_speed_csv(p)?;
    }
    let trace = run_simulation(&cfg.platoon, &cfg.scenario)?;
    let report = evaluate(&trace, &cfg.safety)?;

    let mut out = Outputs::new(&common.out);
    let mut csv = Vec::new();
    trace.write_csv(&mut csv)?;
    out.add("trace.csv", csv);
    out.add_json("metrics.json", &report)?;
    out.add_json("config.json", &cfg)?;
    let inputs = common.config.iter().cloned().chain(speed_csv.map(Path::to_path_buf)).collect();
    let m = manifest("simulate", &cfg, vec![cfg.platoon.seed], inputs, start)?;
    out.commit(m)
}

fn sweep_threads() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("{THREADS_ENV} must be a positive integer"))?;
            if n == 0 {
                bail!("{THREADS_ENV} must be a positive integer");
            }
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

fn cmd_sweep(common: &Common, flags: &ScenarioFlags, grid_path: Option<&Path>, n_seeds: u64) -> Result<()> {
    let start = (SystemTime::now(), Instant::now());
    let mut cfg = load_run_config(common)?;
    // timing would make reruns differ
    cfg.platoon.record_timing = false;
    let mut grid: Grid = match grid_path {
        Some(p) => read_json(p)?,
        None => Grid::default(),
    };
    if let Some(case) = flags.case {
        let case: ScenarioCase = case.into();
        grid.scenarios.retain(|s| s.case == case);
    }
    if let Some(a) = flags.accel {
        grid.scenarios.retain(|s| s.accel_magnitude == a.abs());
    }
    if let Some(r) = flags.range {
        grid.scenarios.retain(|s| s.range == r.abs());
    }
    if let Some(s) = common.seed {
        grid.seeds = vec![s];
    } else if grid.seeds.is_empty() {
        grid.seeds = (0..n_seeds).collect();
    }
    if let Some(c) = common.controller {
        grid.controllers = vec![c.into()];
    }
    let rows = run_sweep(&grid.scenarios, &grid.seeds, &grid.controllers, &cfg.platoon, &cfg.safety, sweep_threads()?)?;

    let mut out = Outputs::new(&common.out);
    let mut csv = Vec::new();
    write_sweep_csv(&rows, cfg.platoon.n_followers, &mut csv)?;
    out.add("sweep.csv", csv);
    out.add_json("config.json", &cfg)?;
    out.add_json("grid.json", &grid)?;
    let inputs = common.config.iter().cloned().chain(grid_path.map(Path::to_path_buf)).collect();
    let snapshot = serde_json::json!({ "run": cfg, "grid": grid });
    let m = manifest("sweep", &snapshot, grid.seeds.clone(), inputs, start)?;
    out.commit(m)
}

#[derive(Serialize)]
struct CalibrationOutput {
    params: DriverParams,
    fitness: f64,
    fitness_history: Vec<f64>,
}

fn cmd_calibrate(
    data: &Path,
    config: Option<&Path>,
    out_dir: &Path,
    seed: Option<u64>,
    generations: Option<usize>,
    population: Option<usize>,
) -> Result<()> {
    let start = (SystemTime::now(), Instant::now());
    let mut ga: GaConfig = match config {
        Some(p) => read_json(p)?,
        None => GaConfig::default(),
    };
    if let Some(s) = seed {
        ga.seed = s;
    }
    if let Some(g) = generations {
        ga.generations = g;
    }
    if let Some(p) = population {
        ga.population = p;
    }
    let dataset = TrajectoryDataset::from_path(data).with_context(|| format!("{}", data.display()))?;
    let fit = calibrate(&dataset, &ga)?;

    let mut out = Outputs::new(out_dir);
    out.add_json("params.json", &fit.params)?;
    out.add_json(
        "calibration.json",
        &CalibrationOutput {
            params: fit.params,
            fitness: fit.fitness,
            fitness_history: fit.fitness_history,
        },
    )?;
    out.add_json("ga.json", &ga)?;
    let inputs = std::iter::once(data.to_path_buf()).chain(config.map(Path::to_path_buf)).collect();
    let m = manifest("calibrate", &ga, vec![ga.seed], inputs, start)?;
    out.commit(m)
}

/// Representative step inputs: a lead vehicle near its car-following
/// equilibrium with moderate tracking errors.
fn bench_inputs(seed: u64, count: usize, params: &DriverParams) -> Result<Vec<(State, LeadEnv)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v_top = 0.9 * params.v0;
    (0..count)
        .map(|_| {
            let v = rng.random_range(0.5 * v_top..v_top);
            let env = LeadEnv {
                v_lead: v,
                headway: equilibrium_headway(v, params)? + rng.random_range(-3.0..3.0),
                a_lead: rng.random_range(-2.0..1.5),
                a_pred: rng.random_range(-2.0..1.5),
                v_front: v + rng.random_range(-1.0..1.0),
            };
            let x0 = State {
                gap_err_leader: rng.random_range(-3.0..3.0),
                dv_leader: rng.random_range(-1.5..1.5),
                gap_err_pred: rng.random_range(-3.0..3.0),
                dv_pred: rng.random_range(-1.5..1.5),
                accel: rng.random_range(-1.5..1.5),
            };
            Ok((x0, env))
        })
        .collect()
}

fn cmd_bench(common: &Common, nodes: &[usize], reps: usize) -> Result<()> {
    let start = (SystemTime::now(), Instant::now());
    if nodes.is_empty() || nodes.iter().any(|&n| !(1..=500).contains(&n)) {
        bail!("--nodes entries must lie in 1..=500");
    }
    if reps == 0 {
        bail!("--reps must be positive");
    }
    let cfg = load_run_config(common)?;
    let base = cfg.platoon.controller_cfg.clone();
    let inputs = bench_inputs(cfg.platoon.seed, reps, &base.driver_params)?;
    let mut csv = String::from("n_max,reps,mean_ms,median_ms,p99_ms\n");
    for &n_max in nodes {
        let mut ctrl = Controller::new(cfg.platoon.controller, platoon_core::controller::ControllerConfig { n_max, ..base.clone() })?;
        let mut ms = Vec::with_capacity(reps);
        for (x0, env) in &inputs {
            let t = Instant::now();
            ctrl.step(x0, env, &PredecessorForecast::Leader)?;
            ms.push(t.elapsed().as_secs_f64() * 1e3);
        }
        let s = TimingStats::from_ms(&ms);
        csv.push_str(&format!("{n_max},{reps},{},{},{}\n", s.mean_ms, s.median_ms, s.p99_ms));
    }

    let mut out = Outputs::new(&common.out);
    out.add("timing.csv", csv.into_bytes());
    let snapshot = serde_json::json!({ "run": cfg, "nodes": nodes, "reps": reps });
    let m = manifest("bench", &snapshot, vec![cfg.platoon.seed], common.config.iter().cloned().collect(), start)?;
    out.commit(m)
}

fn cmd_metrics(trace_path: &Path, config: Option<&Path>, out_dir: &Path) -> Result<()> {
    let start = (SystemTime::now(), Instant::now());
    let cfg: RunConfig = match config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    let file = fs::File::open(trace_path).with_context(|| format!("cannot read {}", trace_path.display()))?;
    let trace = SimulationTrace::read_csv(file).with_context(|| format!("{}", trace_path.display()))?;
    let report = evaluate(&trace, &cfg.safety)?;
    let mut out = Outputs::new(out_dir);
    out.add_json("metrics.json", &report)?;
    let inputs = std::iter::once(trace_path.to_path_buf()).chain(config.map(Path::to_path_buf)).collect();
    let m = manifest("metrics", &cfg.safety, Vec::new(), inputs, start)?;
    out.commit(m)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            common,
            scenario,
            speed_csv,
        } => cmd_simulate(&common, &scenario, speed_csv.as_deref()),
        Command::Sweep {
            common,
            scenario,
            grid,
            seeds,
        } => cmd_sweep(&common, &scenario, grid.as_deref(), seeds),
        Command::Calibrate {
            data,
            config,
            out,
            seed,
            generations,
            population,
        } => cmd_calibrate(&data, config.as_deref(), &out, seed, generations, population),
        Command::Bench { config, out, seed, controller, branching, nodes, reps } => {
            let common = Common { config, out, seed, controller, nodes: None, branching };
            cmd_bench(&common, &nodes, reps)
        }
        Command::Metrics { trace, config, out } => cmd_metrics(&trace, config.as_deref(), &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
