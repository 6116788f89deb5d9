//! Genetic-algorithm calibration of the stochastic driver model.
//!
//! The GA fits the deterministic part `(v0, β, sc, α)` by minimizing the
//! RMSE of one-step acceleration predictions. The noise scale is then
//! estimated from the residuals, which have standard deviation
//! `σ0·sqrt(v·dt)` under the model.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::driver::{mean_accel, optimal_velocity, DriverParams};
use crate::error::{Error, Result};

/// Speeds below this are left out of the noise estimate.
const MIN_NOISE_SPEED: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub v_lead: f64,
    pub gap: f64,
    pub a_lead_next: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub dt: f64,
    pub samples: Vec<Sample>,
}

impl TrajectoryDataset {
    /// Checks values and infers the time step. Rows are numbered as in the
    /// CSV file (header is row 1).
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidInput("dataset needs at least two samples".into()));
        }
        let dt = samples[1].t - samples[0].t;
        if !(dt > 0.0) {
            return Err(Error::Parse {
                row: 3,
                reason: "time must increase".into(),
            });
        }
        for (i, s) in samples.iter().enumerate() {
            let row = i + 2;
            if ![s.t, s.v_lead, s.gap, s.a_lead_next].iter().all(|x| x.is_finite()) {
                return Err(Error::Parse {
                    row,
                    reason: "non-finite value".into(),
                });
            }
            if !(s.gap > 0.0) {
                return Err(Error::Parse {
                    row,
                    reason: format!("gap must be positive, got {}", s.gap),
                });
            }
            if s.v_lead < 0.0 {
                return Err(Error::Parse {
                    row,
                    reason: format!("speed must be nonnegative, got {}", s.v_lead),
                });
            }
            if i > 0 {
                let step = s.t - samples[i - 1].t;
                if (step - dt).abs() > 1e-6 * dt.max(1.0) {
                    return Err(Error::Parse {
                        row,
                        reason: format!("non-uniform time step {step} (expected {dt})"),
                    });
                }
            }
        }
        Ok(TrajectoryDataset { dt, samples })
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers().map_err(|e| Error::Parse {
            row: 1,
            reason: e.to_string(),
        })?;
        if headers != vec!["t", "v_lead", "gap", "a_lead_next"] {
            return Err(Error::Parse {
                row: 1,
                reason: "expected header t,v_lead,gap,a_lead_next".into(),
            });
        }
        let mut samples = Vec::new();
        for (i, rec) in rdr.deserialize::<Sample>().enumerate() {
            samples.push(rec.map_err(|e| Error::Parse {
                row: i + 2,
                reason: e.to_string(),
            })?);
        }
        Self::new(samples)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        for s in &self.samples {
            wtr.serialize(s).map_err(|e| Error::Io(e.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Synthetic observations from the driver model: headways uniform over
/// `gap_range`, speeds within ±2 m/s of the optimal velocity, next-step
/// accelerations from the model (noise unclipped).
pub fn synthetic_dataset(
    params: &DriverParams,
    n: usize,
    gap_range: (f64, f64),
    dt: f64,
    seed: u64,
) -> Result<TrajectoryDataset> {
    params.validate()?;
    if !(gap_range.0 > 0.0 && gap_range.1 >= gap_range.0) {
        return Err(Error::param("gap_range", "needs 0 < lo <= hi"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let gap = rng.random_range(gap_range.0..=gap_range.1);
        let v = (optimal_velocity(gap, params)? + rng.random_range(-2.0..=2.0)).max(0.0);
        let z: f64 = StandardNormal.sample(&mut rng);
        let a = mean_accel(v, gap, params)? + params.sigma0 * (v * dt).sqrt() * z;
        samples.push(Sample {
            t: i as f64 * dt,
            v_lead: v,
            gap,
            a_lead_next: a,
        });
    }
    TrajectoryDataset::new(samples)
}

/// RMSE between predicted mean and observed next-step accelerations.
pub fn objective(p: &DriverParams, data: &TrajectoryDataset) -> Result<f64> {
    if data.samples.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let mut sse = 0.0;
    for s in &data.samples {
        let r = mean_accel(s.v_lead, s.gap, p)? - s.a_lead_next;
        sse += r * r;
    }
    Ok((sse / data.samples.len() as f64).sqrt())
}

/// Noise scale from normalized residuals (sample standard deviation).
pub fn estimate_sigma0(p: &DriverParams, data: &TrajectoryDataset) -> Result<f64> {
    let z: Vec<f64> = data
        .samples
        .iter()
        .filter(|s| s.v_lead > MIN_NOISE_SPEED)
        .map(|s| Ok((s.a_lead_next - mean_accel(s.v_lead, s.gap, p)?) / (s.v_lead * data.dt).sqrt()))
        .collect::<Result<_>>()?;
    if z.len() < 2 {
        return Err(Error::InvalidInput("too few moving samples to estimate noise".into()));
    }
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    let var = z.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (z.len() - 1) as f64;
    Ok(var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParamBounds {
    pub v0: [f64; 2],
    pub beta: [f64; 2],
    pub sc: [f64; 2],
    pub alpha: [f64; 2],
}

impl Default for ParamBounds {
    fn default() -> Self {
        ParamBounds {
            v0: [10.0, 40.0],
            beta: [0.1, 5.0],
            sc: [1.0, 30.0],
            alpha: [0.5, 5.0],
        }
    }
}

impl ParamBounds {
    fn as_array(&self) -> [[f64; 2]; 4] {
        [self.v0, self.beta, self.sc, self.alpha]
    }

    pub fn contains(&self, p: &DriverParams) -> bool {
        let genes = [p.v0, p.beta, p.sc, p.alpha];
        self.as_array().iter().zip(genes).all(|(b, g)| g >= b[0] && g <= b[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    /// Mutation standard deviation as a fraction of each parameter range,
    /// at the first and the last generation (linear in between).
    pub mutation_scale: [f64; 2],
    pub tournament_size: usize,
    pub param_bounds: ParamBounds,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            population: 64,
            generations: 200,
            crossover_rate: 0.9,
            mutation_rate: 0.25,
            mutation_scale: [0.1, 0.005],
            tournament_size: 3,
            param_bounds: ParamBounds::default(),
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 4 {
            return Err(Error::param("population", "must be at least 4"));
        }
        if self.generations == 0 {
            return Err(Error::param("generations", "must be positive"));
        }
        for (name, r) in [("crossover_rate", self.crossover_rate), ("mutation_rate", self.mutation_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::param(name, "must be a probability"));
            }
        }
        if self.mutation_scale.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::param("mutation_scale", "must be nonnegative"));
        }
        if self.tournament_size == 0 {
            return Err(Error::param("tournament_size", "must be positive"));
        }
        for b in self.param_bounds.as_array() {
            if !(b[0] > 0.0 && b[1] >= b[0]) {
                return Err(Error::param("param_bounds", "needs 0 < lo <= hi"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub params: DriverParams,
    pub fitness: f64,
    /// Best fitness after each generation, including the initial population.
    pub fitness_history: Vec<f64>,
}

type Genome = [f64; 4];

fn to_params(g: &Genome, sigma0: f64) -> DriverParams {
    DriverParams {
        v0: g[0],
        beta: g[1],
        sc: g[2],
        alpha: g[3],
        sigma0,
    }
}

pub fn calibrate(data: &TrajectoryDataset, cfg: &GaConfig) -> Result<Calibration> {
    cfg.validate()?;
    if data.samples.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let bounds = cfg.param_bounds.as_array();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fitness = |pop: &[Genome]| -> Vec<f64> {
        pop.par_iter()
            .map(|g| objective(&to_params(g, 0.0), data).unwrap_or(f64::INFINITY))
            .collect()
    };

    let mut pop: Vec<Genome> = (0..cfg.population)
        .map(|_| std::array::from_fn(|j| rng.random_range(bounds[j][0]..=bounds[j][1])))
        .collect();
    let mut fit = fitness(&pop);
    let best_of = |fit: &[f64]| (0..fit.len()).min_by(|&a, &b| fit[a].total_cmp(&fit[b])).unwrap();
    let mut history = vec![fit[best_of(&fit)]];

    for gen in 0..cfg.generations {
        let frac = gen as f64 / cfg.generations.max(2).saturating_sub(1) as f64;
        let scale = cfg.mutation_scale[0] + (cfg.mutation_scale[1] - cfg.mutation_scale[0]) * frac;
        let tournament = |rng: &mut ChaCha8Rng| {
            (0..cfg.tournament_size)
                .map(|_| rng.random_range(0..pop.len()))
                .min_by(|&a, &b| fit[a].total_cmp(&fit[b]))
                .unwrap()
        };
        let mut next = Vec::with_capacity(cfg.population);
        next.push(pop[best_of(&fit)]);
        while next.len() < cfg.population {
            let p1 = pop[tournament(&mut rng)];
            let p2 = pop[tournament(&mut rng)];
            let mut child = p1;
            if rng.random_bool(cfg.crossover_rate) {
                for j in 0..4 {
                    if rng.random_bool(0.5) {
                        child[j] = p2[j];
                    }
                }
            }
            for j in 0..4 {
                if rng.random_bool(cfg.mutation_rate) {
                    let width = bounds[j][1] - bounds[j][0];
                    let step = Normal::new(0.0, scale * width)
                        .map_err(|e| Error::param("mutation_scale", e.to_string()))?;
                    child[j] = (child[j] + step.sample(&mut rng)).clamp(bounds[j][0], bounds[j][1]);
                }
            }
            next.push(child);
        }
        pop = next;
        fit = fitness(&pop);
        history.push(fit[best_of(&fit)]);
    }

    let best = best_of(&fit);
    let params = to_params(&pop[best], 0.0);
    let sigma0 = estimate_sigma0(&params, data).unwrap_or(0.0);
    Ok(Calibration {
        params: DriverParams { sigma0, ..params },
        fitness: fit[best],
        fitness_history: history,
    })
}
