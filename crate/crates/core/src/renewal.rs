//! Renewal-equation forward operator and stochastic epidemic simulation.
//!
//! All sequences are indexed by 0-based position; position 0 is the first
//! observed day. Expected incidence follows
//! `λ_t = R_t · Σ_{τ=1}^{min(t, M)} I_{t-τ} w_τ`, so lags reaching before
//! the first observation contribute nothing and `λ_0 = 0`.
//!
//! The simulated `λ` trajectory is computed from the *realised* history of
//! the same run: it is exactly the Poisson rate each count was drawn from.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma};

use crate::error::{Error, Result};

/// Daily non-negative case counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncidenceSeries {
    counts: Vec<u64>,
    start_day: i64,
}

impl IncidenceSeries {
    pub fn new(counts: Vec<u64>, start_day: i64) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidInput("incidence series is empty".into()));
        }
        Ok(Self { counts, start_day })
    }

    /// Series starting at day 1.
    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        Self::new(counts, 1)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn start_day(&self) -> i64 {
        self.start_day
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Day label of position `t`.
    pub fn day(&self, t: usize) -> i64 {
        self.start_day + t as i64
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }

    pub fn max_count(&self) -> u64 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    /// The first `len` days.
    pub fn truncated(&self, len: usize) -> Result<Self> {
        if len == 0 || len > self.len() {
            return Err(Error::InvalidInput(format!(
                "cannot truncate series of length {} to {len}",
                self.len()
            )));
        }
        Self::new(self.counts[..len].to_vec(), self.start_day)
    }
}

/// Discrete generation-interval weights `w_1..w_M` (lag 0 carries no mass).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationInterval {
    weights: Vec<f64>,
    mean_days: f64,
    sd_days: f64,
}

impl GenerationInterval {
    /// Gamma distribution with the given mean and SD, integrated over unit
    /// bins `[τ-1, τ]` for `τ = 1..=max_lag` and renormalised to sum to one.
    pub fn discretize(mean_days: f64, sd_days: f64, max_lag: usize) -> Result<Self> {
        if !(mean_days > 0.0 && mean_days.is_finite()) || !(sd_days > 0.0 && sd_days.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "generation interval needs positive mean and sd, got {mean_days}, {sd_days}"
            )));
        }
        if max_lag < 2 {
            return Err(Error::InvalidParameter(format!("max_lag must be >= 2, got {max_lag}")));
        }
        let shape = (mean_days / sd_days).powi(2);
        let rate = mean_days / (sd_days * sd_days);
        let gamma = Gamma::new(shape, rate).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let mut weights: Vec<f64> = (1..=max_lag)
            .map(|tau| gamma.cdf(tau as f64) - gamma.cdf(tau as f64 - 1.0))
            .collect();
        let total: f64 = weights.iter().sum();
        if !total.is_finite() || total <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "no generation-interval mass within {max_lag} days"
            )));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self {
            weights,
            mean_days,
            sd_days,
        })
    }

    /// Explicit weights for `τ = 1..`; must be non-negative and sum to one
    /// within 1e-9.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidParameter(
                "weights must be non-negative and finite".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("weights sum to {total}, not 1")));
        }
        let mean: f64 = weights.iter().enumerate().map(|(i, w)| (i + 1) as f64 * w).sum();
        let second: f64 = weights
            .iter()
            .enumerate()
            .map(|(i, w)| ((i + 1) as f64).powi(2) * w)
            .sum();
        Ok(Self {
            weights,
            mean_days: mean,
            sd_days: (second - mean * mean).max(0.0).sqrt(),
        })
    }

    /// `w_τ` for `τ = 1..=max_lag`, stored at index `τ - 1`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn max_lag(&self) -> usize {
        self.weights.len()
    }

    pub fn mean_days(&self) -> f64 {
        self.mean_days
    }

    pub fn sd_days(&self) -> f64 {
        self.sd_days
    }

    /// Shape of the moment-matched Gamma, `(mean/sd)²`.
    pub fn gamma_shape(&self) -> f64 {
        (self.mean_days / self.sd_days).powi(2)
    }

    /// Scale of the moment-matched Gamma, `sd²/mean`.
    pub fn gamma_scale(&self) -> f64 {
        self.sd_days * self.sd_days / self.mean_days
    }
}

/// Reproduction numbers aligned with an incidence series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtTrajectory {
    values: Vec<f64>,
}

impl RtTrajectory {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| **v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "reproduction number {bad} is not a finite value >= 0"
            )));
        }
        Ok(Self { values })
    }

    pub fn constant(value: f64, len: usize) -> Result<Self> {
        Self::new(vec![value; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.values.iter().map(|v| v * c).collect())
    }
}

/// Expected incidence `λ_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenewalIntensity {
    values: Vec<f64>,
}

impl RenewalIntensity {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| **v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "intensity {bad} is not a finite value >= 0"
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Total infectiousness `Λ_t = Σ_{τ=1}^{min(t, M)} I_{t-τ} w_τ` from the
/// first `t` entries of `history`.
pub fn total_infectiousness<T: Copy + Into<f64>>(history: &[T], weights: &[f64], t: usize) -> f64 {
    let mut acc = 0.0;
    for tau in 1..=t.min(weights.len()) {
        acc += history[t - tau].into() * weights[tau - 1];
    }
    acc
}

/// `Λ_t` for every position of `counts`.
pub fn infectiousness_profile(counts: &[f64], gi: &GenerationInterval) -> Vec<f64> {
    (0..counts.len())
        .map(|t| total_infectiousness(counts, gi.weights(), t))
        .collect()
}

/// `λ_t` at position `t` from the counts observed before `t`.
pub fn renewal_intensity(
    rt: &RtTrajectory,
    history: &IncidenceSeries,
    gi: &GenerationInterval,
    t: usize,
) -> Result<f64> {
    if t >= rt.len() {
        return Err(Error::Index {
            index: t,
            len: rt.len(),
        });
    }
    if t > history.len() {
        return Err(Error::InvalidInput(format!(
            "history of length {} does not cover the {t} days before position {t}",
            history.len()
        )));
    }
    let counts = history.as_f64();
    Ok(rt.values()[t] * total_infectiousness(&counts, gi.weights(), t))
}

/// `λ_t` at every position, with observed counts as the history term.
pub fn expected_incidence(
    rt: &RtTrajectory,
    observed: &IncidenceSeries,
    gi: &GenerationInterval,
) -> Result<RenewalIntensity> {
    if rt.len() != observed.len() {
        return Err(Error::InvalidInput(format!(
            "R_t has {} values but the series has {}",
            rt.len(),
            observed.len()
        )));
    }
    let counts = observed.as_f64();
    let values = rt
        .values()
        .iter()
        .enumerate()
        .map(|(t, r)| r * total_infectiousness(&counts, gi.weights(), t))
        .collect();
    RenewalIntensity::new(values)
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Poisson draw; a zero rate always yields zero.
pub fn sample_poisson<R: rand::Rng>(rate: f64, rng: &mut R) -> u64 {
    if rate <= 0.0 {
        return 0;
    }
    let dist = Poisson::new(rate).expect("finite positive Poisson rate");
    dist.sample(rng) as u64
}

/// Simulate `horizon` days of a renewal process seeded with `seed_cases`
/// cases on day one. Returns the realised counts and the Poisson rate used
/// on each day (zero on day one).
pub fn simulate_epidemic(
    rt: &RtTrajectory,
    gi: &GenerationInterval,
    seed_cases: u64,
    horizon: usize,
    rng_seed: u64,
) -> Result<(IncidenceSeries, RenewalIntensity)> {
    if horizon < 2 {
        return Err(Error::InvalidParameter(format!("horizon must be >= 2, got {horizon}")));
    }
    if rt.len() < horizon {
        return Err(Error::InvalidInput(format!(
            "R_t covers {} days, horizon is {horizon}",
            rt.len()
        )));
    }
    let mut rng = rng_for(rng_seed, 0);
    let mut counts = Vec::with_capacity(horizon);
    let mut history = Vec::with_capacity(horizon);
    let mut lambda = Vec::with_capacity(horizon);
    counts.push(seed_cases);
    history.push(seed_cases as f64);
    lambda.push(0.0);
    for t in 1..horizon {
        let rate = rt.values()[t] * total_infectiousness(&history, gi.weights(), t);
        let draw = sample_poisson(rate, &mut rng);
        counts.push(draw);
        history.push(draw as f64);
        lambda.push(rate);
    }
    Ok((IncidenceSeries::new(counts, 1)?, RenewalIntensity::new(lambda)?))
}
