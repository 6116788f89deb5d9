//! Stochastic car-following model of the human-driven platoon leader.
//!
//! The deterministic part is the optimal velocity model; the stochastic part
//! is a Langevin term whose strength scales with the square root of speed.
//! For prediction the Gaussian increment is split into `m` bins, each
//! represented by its conditional mean and carrying its probability mass.
//! Bins either have equal probability or equal width over ±3 standard
//! deviations (outer bins extend to infinity).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest branching factor a controller accepts.
pub const MAX_BRANCHING: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriverParams {
    /// Free-flow speed (m/s).
    pub v0: f64,
    /// Reaction coefficient (1/s).
    pub beta: f64,
    /// Critical headway (m).
    pub sc: f64,
    /// Shape coefficient (dimensionless).
    pub alpha: f64,
    /// Dissipation coefficient (√m/s).
    pub sigma0: f64,
}

impl Default for DriverParams {
    /// Freeway-calibrated values.
    fn default() -> Self {
        DriverParams {
            v0: 19.65,
            beta: 1.92,
            sc: 5.38,
            alpha: 2.66,
            sigma0: 0.30,
        }
    }
}

impl DriverParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.v0, self.beta, self.sc, self.alpha, self.sigma0]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::param("driver_params", "all parameters must be finite"));
        }
        if self.v0 <= 0.0 {
            return Err(Error::param("v0", "must be positive"));
        }
        if self.beta <= 0.0 {
            return Err(Error::param("beta", "must be positive"));
        }
        if self.sc <= 0.0 {
            return Err(Error::param("sc", "must be positive"));
        }
        if self.sigma0 < 0.0 {
            return Err(Error::param("sigma0", "must be nonnegative"));
        }
        Ok(())
    }

    pub fn deterministic(mut self) -> Self {
        self.sigma0 = 0.0;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccelBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for AccelBounds {
    fn default() -> Self {
        AccelBounds { min: -5.0, max: 3.0 }
    }
}

impl AccelBounds {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min < max) {
            return Err(Error::param("bounds", format!("need min < max, got [{min}, {max}]")));
        }
        Ok(AccelBounds { min, max })
    }

    pub fn clamp(&self, a: f64) -> f64 {
        a.clamp(self.min, self.max)
    }
}

/// Discrete next-step acceleration distribution with strictly increasing support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccelDistribution {
    pub values: Vec<f64>,
    pub probs: Vec<f64>,
}

impl AccelDistribution {
    pub fn point(value: f64) -> Self {
        AccelDistribution {
            values: vec![value],
            probs: vec![1.0],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().zip(&self.probs).map(|(v, p)| v * p).sum()
    }

    /// Builds a distribution from nondecreasing support, summing the mass of
    /// repeated values.
    fn from_sorted(values: impl IntoIterator<Item = (f64, f64)>) -> Self {
        let mut out = AccelDistribution {
            values: Vec::new(),
            probs: Vec::new(),
        };
        for (v, p) in values {
            match out.values.last() {
                Some(&last) if last == v => *out.probs.last_mut().unwrap() += p,
                _ => {
                    out.values.push(v);
                    out.probs.push(p);
                }
            }
        }
        out
    }
}

pub fn optimal_velocity(s: f64, p: &DriverParams) -> Result<f64> {
    if !(s >= 0.0) {
        return Err(Error::InvalidInput(format!("headway must be nonnegative, got {s}")));
    }
    Ok(0.5 * p.v0 * ((s / p.sc - p.alpha).tanh() + p.alpha.tanh()))
}

/// Headway at which the optimal velocity equals `v`, if `v` is reachable.
pub fn equilibrium_headway(v: f64, p: &DriverParams) -> Result<f64> {
    let t = 2.0 * v / p.v0 - p.alpha.tanh();
    if !(v >= 0.0) || !(t < 1.0) {
        return Err(Error::InvalidInput(format!(
            "speed {v} is outside the optimal velocity range"
        )));
    }
    Ok((p.sc * (t.atanh() + p.alpha)).max(0.0))
}

pub fn mean_accel(v_l: f64, s: f64, p: &DriverParams) -> Result<f64> {
    Ok(p.beta * (optimal_velocity(s, p)? - v_l))
}

/// Standard deviation of the stochastic acceleration term over one step.
pub fn noise_sigma(v_l: f64, dt: f64, p: &DriverParams) -> f64 {
    p.sigma0 * v_l.max(0.0).sqrt() * dt.sqrt()
}

/// Conditional means of `m` equal-probability bins of the standard normal,
/// in increasing order.
pub fn standard_normal_bins(m: usize) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::param("m", "branching must be at least 1"));
    }
    let normal = Normal::standard();
    let pdf = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let edge_density = |i: usize| {
        if i == 0 || i == m {
            0.0
        } else {
            pdf(normal.inverse_cdf(i as f64 / m as f64))
        }
    };
    let mut bins: Vec<f64> = (0..m)
        .map(|i| m as f64 * (edge_density(i) - edge_density(i + 1)))
        .collect();
    // exact antisymmetry
    for i in 0..m / 2 {
        let v = 0.5 * (bins[m - 1 - i] - bins[i]);
        bins[i] = -v;
        bins[m - 1 - i] = v;
    }
    if m % 2 == 1 {
        bins[m / 2] = 0.0;
    }
    Ok(bins)
}

/// Half-width, in standard deviations, of the range split by
/// [`Discretization::EqualWidth`].
pub const EQUAL_WIDTH_SPAN: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discretization {
    /// `m` bins of mass `1/m`.
    #[default]
    EqualProbability,
    /// `m` bins of equal width over `±EQUAL_WIDTH_SPAN`; the central bins
    /// carry more mass than the tails.
    EqualWidth,
}

/// Support points and masses of an `m`-bin discretization of the standard
/// normal, in increasing order of support.
pub fn normal_bins(m: usize, scheme: Discretization) -> Result<Vec<(f64, f64)>> {
    match scheme {
        Discretization::EqualProbability => {
            let p = 1.0 / m as f64;
            Ok(standard_normal_bins(m)?.into_iter().map(|q| (q, p)).collect())
        }
        Discretization::EqualWidth => {
            if m == 0 {
                return Err(Error::param("m", "branching must be at least 1"));
            }
            let normal = Normal::standard();
            let edge = |i: usize| -> f64 {
                if i == 0 {
                    f64::NEG_INFINITY
                } else if i == m {
                    f64::INFINITY
                } else {
                    EQUAL_WIDTH_SPAN * (2.0 * i as f64 / m as f64 - 1.0)
                }
            };
            let pdf = |z: f64| {
                if z.is_finite() {
                    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
                } else {
                    0.0
                }
            };
            let mut bins: Vec<(f64, f64)> = (0..m)
                .map(|i| {
                    let (a, b) = (edge(i), edge(i + 1));
                    let mass = normal.cdf(b) - normal.cdf(a);
                    ((pdf(a) - pdf(b)) / mass, mass)
                })
                .collect();
            for i in 0..m / 2 {
                let j = m - 1 - i;
                let v = 0.5 * (bins[j].0 - bins[i].0);
                let p = 0.5 * (bins[j].1 + bins[i].1);
                bins[i] = (-v, p);
                bins[j] = (v, p);
            }
            if m % 2 == 1 {
                bins[m / 2].0 = 0.0;
            }
            let total: f64 = bins.iter().map(|b| b.1).sum();
            Ok(bins.into_iter().map(|(q, p)| (q, p / total)).collect())
        }
    }
}

fn discretize(mean: f64, sigma: f64, bins: &[(f64, f64)], bounds: &AccelBounds) -> AccelDistribution {
    AccelDistribution::from_sorted(bins.iter().map(|&(q, p)| (bounds.clamp(mean + q * sigma), p)))
}

/// Equal-probability discretization of the next-step acceleration.
pub fn predict_distribution(
    v_l: f64,
    s: f64,
    m: usize,
    dt: f64,
    p: &DriverParams,
    bounds: &AccelBounds,
) -> Result<AccelDistribution> {
    predict_distribution_with(v_l, s, m, Discretization::EqualProbability, dt, p, bounds)
}

pub fn predict_distribution_with(
    v_l: f64,
    s: f64,
    m: usize,
    scheme: Discretization,
    dt: f64,
    p: &DriverParams,
    bounds: &AccelBounds,
) -> Result<AccelDistribution> {
    Ok(discretize(
        mean_accel(v_l, s, p)?,
        noise_sigma(v_l, dt, p),
        &normal_bins(m, scheme)?,
        bounds,
    ))
}

/// Draws the leader's next acceleration. Advances `rng` by exactly one normal draw.
pub fn sample_accel<R: Rng + ?Sized>(
    v_l: f64,
    s: f64,
    dt: f64,
    p: &DriverParams,
    rng: &mut R,
    bounds: &AccelBounds,
) -> Result<f64> {
    let z: f64 = rng.sample(StandardNormal);
    let mean = mean_accel(v_l, s, p)?;
    Ok(bounds.clamp(mean + noise_sigma(v_l, dt, p) * z))
}

/// Lead-vehicle observation used when predicting its next acceleration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeadObservation {
    pub v_lead: f64,
    pub headway: f64,
    pub accel: f64,
}

/// Source of next-step acceleration distributions for the platoon leader.
pub trait LeadPredictor {
    fn predict(&self, obs: &LeadObservation) -> AccelDistribution;
}

/// Equal-probability discretization of the stochastic driver model.
#[derive(Debug, Clone)]
pub struct StochasticDriver {
    params: DriverParams,
    dt: f64,
    bounds: AccelBounds,
    bins: Vec<(f64, f64)>,
}

impl StochasticDriver {
    pub fn new(params: DriverParams, m: usize, dt: f64, bounds: AccelBounds) -> Result<Self> {
        Self::with_scheme(params, m, Discretization::EqualProbability, dt, bounds)
    }

    pub fn with_scheme(
        params: DriverParams,
        m: usize,
        scheme: Discretization,
        dt: f64,
        bounds: AccelBounds,
    ) -> Result<Self> {
        params.validate()?;
        if !(dt > 0.0) {
            return Err(Error::param("dt", "must be positive"));
        }
        Ok(StochasticDriver {
            params,
            dt,
            bounds,
            bins: normal_bins(m, scheme)?,
        })
    }

    pub fn params(&self) -> &DriverParams {
        &self.params
    }
}

impl LeadPredictor for StochasticDriver {
    fn predict(&self, obs: &LeadObservation) -> AccelDistribution {
        let v = obs.v_lead.max(0.0);
        let mean = self.params.beta * (optimal_velocity(obs.headway.max(0.0), &self.params).unwrap() - v);
        discretize(mean, noise_sigma(v, self.dt, &self.params), &self.bins, &self.bounds)
    }
}

/// Assumes the currently measured acceleration persists.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConstantAccel;

impl LeadPredictor for ConstantAccel {
    fn predict(&self, obs: &LeadObservation) -> AccelDistribution {
        AccelDistribution::point(obs.accel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table() -> DriverParams {
        DriverParams::default()
    }

    #[test]
    fn optimal_velocity_values() {
        let p = table();
        let s = p.alpha * p.sc;
        assert!((optimal_velocity(s, &p).unwrap() - 9.825 * 2.66f64.tanh()).abs() < 1e-12);
        assert!((optimal_velocity(s, &p).unwrap() - 9.729325501060142).abs() < 1e-12);
        assert_eq!(optimal_velocity(0.0, &p).unwrap(), 0.0);
        assert!((optimal_velocity(1000.0, &p).unwrap() - 19.55432550106014).abs() < 1e-12);
        assert!(optimal_velocity(-1.0, &p).is_err());
    }

    #[test]
    fn mean_accel_values() {
        let p = table();
        let s = p.alpha * p.sc;
        let v = optimal_velocity(s, &p).unwrap();
        assert_eq!(mean_accel(v, s, &p).unwrap(), 0.0);
        assert!((mean_accel(0.0, s, &p).unwrap() - 18.68030496203547).abs() < 1e-12);
        assert!(mean_accel(19.55432550106014, 1000.0, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn noise_sigma_values() {
        let p = table();
        assert_eq!(noise_sigma(0.0, 0.1, &p), 0.0);
        assert!((noise_sigma(16.0, 0.1, &p) - 0.3795).abs() < 1e-4);
        assert!((noise_sigma(4.0, 0.1, &p) * 2.0 - noise_sigma(16.0, 0.1, &p)).abs() < 1e-15);
        assert_eq!(noise_sigma(-3.0, 0.1, &p), 0.0);
    }

    #[test]
    fn equilibrium_headway_inverts_ovm() {
        let p = table();
        for v in [5.0, 12.0, 17.0, 19.0] {
            let s = equilibrium_headway(v, &p).unwrap();
            assert!((optimal_velocity(s, &p).unwrap() - v).abs() < 1e-9);
        }
        assert!(equilibrium_headway(25.0, &p).is_err());
    }

    #[test]
    fn two_bin_conditional_means() {
        let bins = standard_normal_bins(2).unwrap();
        let h = (2.0 / std::f64::consts::PI).sqrt();
        assert!((bins[0] + h).abs() < 1e-12 && (bins[1] - h).abs() < 1e-12);
    }

    #[test]
    fn degenerate_cases() {
        let p = table();
        let b = AccelBounds::default();
        let d = predict_distribution(16.0, 20.0, 1, 0.1, &p, &b).unwrap();
        assert_eq!(d.probs, vec![1.0]);
        assert_eq!(d.values, vec![b.clamp(mean_accel(16.0, 20.0, &p).unwrap())]);

        let d = predict_distribution(16.0, 20.0, 7, 0.1, &p.deterministic(), &b).unwrap();
        assert_eq!(d.len(), 1);
        assert!((d.probs[0] - 1.0).abs() < 1e-12);

        assert!(predict_distribution(16.0, 20.0, 0, 0.1, &p, &b).is_err());
    }

    #[test]
    fn clamping_merges_mass() {
        let p = DriverParams { sigma0: 5.0, ..table() };
        let b = AccelBounds::default();
        // far below optimal speed: mean is strongly positive, upper bins clamp to a_max
        let d = predict_distribution(5.0, 30.0, 8, 0.1, &p, &b).unwrap();
        assert!(d.len() < 8);
        assert_eq!(*d.values.last().unwrap(), 3.0);
        assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(d.values.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn sampling_is_seeded() {
        let p = table();
        let b = AccelBounds::default();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5)
                .map(|_| sample_accel(16.0, 20.0, 0.1, &p, &mut rng, &b).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
        assert_ne!(draw(11), draw(12));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let det = p.deterministic();
        let mean = mean_accel(16.0, 20.0, &det).unwrap();
        for _ in 0..10 {
            assert_eq!(sample_accel(16.0, 20.0, 0.1, &det, &mut rng, &b).unwrap(), b.clamp(mean));
        }
    }

    #[test]
    fn constant_predictor_is_a_point_mass() {
        let d = ConstantAccel.predict(&LeadObservation {
            v_lead: 10.0,
            headway: 20.0,
            accel: -1.5,
        });
        assert_eq!(d, AccelDistribution::point(-1.5));
    }
}
