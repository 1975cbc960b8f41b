//! Synthetic step-change epidemics with Bernoulli under-reporting.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::renewal::{rng_for, simulate_epidemic, GenerationInterval, IncidenceSeries, RenewalIntensity, RtTrajectory};

/// Piecewise-constant `R_t`. Change points are 1-based days: the new level
/// applies from the change-point day onward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepProfileSpec {
    pub levels: Vec<f64>,
    pub change_points: Vec<usize>,
    pub horizon: usize,
}

impl StepProfileSpec {
    /// 2.5 → 0.8 on day 40, 120 days.
    pub fn single_step() -> Self {
        Self {
            levels: vec![2.5, 0.8],
            change_points: vec![40],
            horizon: 120,
        }
    }

    /// 2.5 → 0.8 on day 40 → 1.8 on day 80, 120 days.
    pub fn double_step() -> Self {
        Self {
            levels: vec![2.5, 0.8, 1.8],
            change_points: vec![40, 80],
            horizon: 120,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 {
            return Err(Error::InvalidSpec(format!(
                "horizon must be >= 2, got {}",
                self.horizon
            )));
        }
        if self.levels.len() != self.change_points.len() + 1 {
            return Err(Error::InvalidSpec(format!(
                "{} levels need {} change points, got {}",
                self.levels.len(),
                self.levels.len().saturating_sub(1),
                self.change_points.len()
            )));
        }
        if let Some(bad) = self.levels.iter().find(|l| **l < 0.0 || !l.is_finite()) {
            return Err(Error::InvalidSpec(format!("level {bad} is not a finite value >= 0")));
        }
        if self.change_points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSpec("change points must be strictly increasing".into()));
        }
        if let Some(bad) = self.change_points.iter().find(|&&c| c <= 1 || c >= self.horizon) {
            return Err(Error::InvalidSpec(format!(
                "change point {bad} outside (1, {})",
                self.horizon
            )));
        }
        Ok(())
    }

    /// Change points as 0-based positions.
    pub fn change_positions(&self) -> Vec<usize> {
        self.change_points.iter().map(|c| c - 1).collect()
    }

    /// Sign of each level change: `true` when `R` goes down.
    pub fn change_is_downward(&self) -> Vec<bool> {
        self.levels.windows(2).map(|w| w[1] < w[0]).collect()
    }
}

pub fn make_step_profile(spec: &StepProfileSpec) -> Result<RtTrajectory> {
    spec.validate()?;
    let mut values = Vec::with_capacity(spec.horizon);
    let mut segment = 0;
    for day in 1..=spec.horizon {
        while segment < spec.change_points.len() && day >= spec.change_points[segment] {
            segment += 1;
        }
        values.push(spec.levels[segment]);
    }
    RtTrajectory::new(values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PeakRule {
    /// Argmax of the generating intensity, earliest tie.
    #[default]
    TrueLambdaPeak,
    /// Argmax of the raw counts, earliest tie.
    ObservedPeak,
}

/// Each day up to and including the peak is zeroed with probability
/// `p_pre`, each later day with probability `p_post`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub p_pre: f64,
    pub p_post: f64,
    #[serde(default)]
    pub peak_rule: PeakRule,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            p_pre: 0.3,
            p_post: 0.05,
            peak_rule: PeakRule::TrueLambdaPeak,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        for p in [self.p_pre, self.p_post] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidSpec(format!("mask probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn argmax_earliest<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Zero out reported counts at random. Returns the observed series and the
/// per-day mask indicator. Draws come from stream 1 of `rng_seed`, so the
/// same seed can drive both simulation and masking.
pub fn apply_zero_mask(
    raw: &IncidenceSeries,
    lambda_true: &RenewalIntensity,
    mask: &MaskSpec,
    rng_seed: u64,
) -> Result<(IncidenceSeries, Vec<bool>)> {
    mask.validate()?;
    if raw.len() != lambda_true.len() {
        return Err(Error::InvalidInput("raw counts and intensity differ in length".into()));
    }
    let peak = match mask.peak_rule {
        PeakRule::TrueLambdaPeak => argmax_earliest(lambda_true.values()),
        PeakRule::ObservedPeak => argmax_earliest(raw.counts()),
    };
    let mut rng = rng_for(rng_seed, 1);
    let mut indicator = Vec::with_capacity(raw.len());
    let mut observed = Vec::with_capacity(raw.len());
    for (t, &c) in raw.counts().iter().enumerate() {
        let p = if t <= peak { mask.p_pre } else { mask.p_post };
        let zeroed = rng.random::<f64>() < p;
        indicator.push(zeroed);
        observed.push(if zeroed { 0 } else { c });
    }
    Ok((IncidenceSeries::new(observed, raw.start_day())?, indicator))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReplica {
    pub true_rt: RtTrajectory,
    pub lambda_true: RenewalIntensity,
    pub raw_incidence: IncidenceSeries,
    pub observed_incidence: IncidenceSeries,
    pub mask_indicator: Vec<bool>,
    pub rng_seed: u64,
}

impl ScenarioReplica {
    pub fn is_masked(&self) -> bool {
        self.mask_indicator.iter().any(|&m| m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEnsemble {
    pub replicas: Vec<ScenarioReplica>,
    pub spec: StepProfileSpec,
    pub mask: Option<MaskSpec>,
    pub gi: GenerationInterval,
    pub seed_cases: u64,
    pub base_seed: u64,
}

/// Build one replica with the given seed.
pub fn generate_replica(
    spec: &StepProfileSpec,
    gi: &GenerationInterval,
    seed_cases: u64,
    mask: Option<&MaskSpec>,
    rng_seed: u64,
) -> Result<ScenarioReplica> {
    let true_rt = make_step_profile(spec)?;
    let (raw, lambda_true) = simulate_epidemic(&true_rt, gi, seed_cases, spec.horizon, rng_seed)?;
    let (observed, mask_indicator) = match mask {
        Some(m) => apply_zero_mask(&raw, &lambda_true, m, rng_seed)?,
        None => (raw.clone(), vec![false; raw.len()]),
    };
    Ok(ScenarioReplica {
        true_rt,
        lambda_true,
        raw_incidence: raw,
        observed_incidence: observed,
        mask_indicator,
        rng_seed,
    })
}

/// `n` replicas with seeds `base_seed + i`.
pub fn generate_ensemble(
    spec: &StepProfileSpec,
    gi: &GenerationInterval,
    n: usize,
    seed_cases: u64,
    mask: Option<MaskSpec>,
    base_seed: u64,
) -> Result<ScenarioEnsemble> {
    if n == 0 {
        return Err(Error::InvalidParameter("ensemble needs at least one replica".into()));
    }
    spec.validate()?;
    if let Some(m) = &mask {
        m.validate()?;
    }
    let replicas = (0..n as u64)
        .into_par_iter()
        .map(|i| generate_replica(spec, gi, seed_cases, mask.as_ref(), base_seed + i))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScenarioEnsemble {
        replicas,
        spec: spec.clone(),
        mask,
        gi: gi.clone(),
        seed_cases,
        base_seed,
    })
}
