//! Sliding-window Gamma-Poisson estimator of R_t.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma};

use crate::error::{Error, Result};
use crate::renewal::{infectiousness_profile, GenerationInterval, IncidenceSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpiEstimConfig {
    /// Window length in days.
    pub window: usize,
    pub prior_shape: f64,
    pub prior_scale: f64,
}

impl Default for EpiEstimConfig {
    fn default() -> Self {
        Self {
            window: 7,
            prior_shape: 1.0,
            prior_scale: 5.0,
        }
    }
}

impl EpiEstimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::InvalidConfig("window must be at least 1".into()));
        }
        for (name, v) in [("prior_shape", self.prior_shape), ("prior_scale", self.prior_scale)] {
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Posterior for the window ending at `position`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorEstimate {
    pub position: usize,
    pub shape: f64,
    pub rate: f64,
    /// `false` when the window carries no infectiousness; summaries are then absent.
    pub defined: bool,
    pub mean: Option<f64>,
    pub q025: Option<f64>,
    pub q975: Option<f64>,
}

/// Posterior mean and shape for given window sums.
pub fn posterior(sum_cases: f64, sum_infectiousness: f64, cfg: &EpiEstimConfig) -> (f64, f64) {
    (cfg.prior_shape + sum_cases, 1.0 / cfg.prior_scale + sum_infectiousness)
}

/// One estimate per window end `t = window..T`.
pub fn estimate(
    series: &IncidenceSeries,
    gi: &GenerationInterval,
    cfg: &EpiEstimConfig,
) -> Result<Vec<PosteriorEstimate>> {
    cfg.validate()?;
    let tau = cfg.window;
    if series.len() <= tau + 1 {
        return Err(Error::InvalidInput(format!(
            "series of length {} is too short for a {tau}-day window",
            series.len()
        )));
    }
    let counts = series.as_f64();
    let infect = infectiousness_profile(&counts, gi);
    (tau..series.len())
        .map(|t| {
            let lo = t + 1 - tau;
            let cases: f64 = counts[lo..=t].iter().sum();
            let lam: f64 = infect[lo..=t].iter().sum();
            let (shape, rate) = posterior(cases, lam, cfg);
            let defined = lam > 0.0;
            let (mean, q025, q975) = if defined {
                let dist = Gamma::new(shape, rate)
                    .map_err(|e| Error::InvalidInput(format!("posterior at position {t}: {e}")))?;
                (
                    Some(shape / rate),
                    Some(dist.inverse_cdf(0.025)),
                    Some(dist.inverse_cdf(0.975)),
                )
            } else {
                (None, None, None)
            };
            Ok(PosteriorEstimate {
                position: t,
                shape,
                rate,
                defined,
                mean,
                q025,
                q975,
            })
        })
        .collect()
}

/// Posterior means aligned to a series of length `total`.
pub fn aligned_means(estimates: &[PosteriorEstimate], total: usize) -> Vec<Option<f64>> {
    let mut out = vec![None; total];
    for e in estimates {
        if e.position < total {
            out[e.position] = e.mean;
        }
    }
    out
}
