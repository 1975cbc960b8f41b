//! Renewal-based zero-inflated Poisson objective, optimisation loop and the
//! products derived from a fitted network (λ̂, forecasts, reconstruction).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::grad::{self, Tape, Tensor, Var};
use crate::metrics::{incidence_errors, AccuracyReport};
use crate::model::{BatchOutput, InferenceOutput, ModelConfig, ModelParams, Network};
use crate::renewal::{infectiousness_profile, total_infectiousness, GenerationInterval, IncidenceSeries};
use crate::synth::ScenarioReplica;

/// Floor applied to the renewal intensity before taking logs.
pub const LAMBDA_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub smooth_weight: f64,
    pub huber_delta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub rng_seed: u64,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            smooth_weight: 0.1,
            huber_delta: 0.25,
            learning_rate: 1e-2,
            epochs: 300,
            optimizer: Optimizer::Adam,
            rng_seed: 0,
            grad_clip: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.smooth_weight < 0.0 || !self.smooth_weight.is_finite() {
            return bad("smooth_weight must be non-negative");
        }
        if self.huber_delta <= 0.0 || !self.huber_delta.is_finite() {
            return bad("huber_delta must be positive");
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 || !c.is_finite() {
                return bad("grad_clip must be positive");
            }
        }
        Ok(())
    }
}

/// `-log P_ZIP(count | λ, π)`, evaluated in log space.
pub fn zip_nll(count: u64, lambda: f64, pi: f64) -> f64 {
    let lambda = lambda.max(LAMBDA_FLOOR);
    let log_keep = (-pi).ln_1p();
    if count == 0 {
        if pi <= 0.0 {
            return lambda;
        }
        let a = pi.ln();
        let b = log_keep - lambda;
        let m = a.max(b);
        -(m + ((a - m).exp() + (b - m).exp()).ln())
    } else {
        let y = count as f64;
        -(log_keep + y * lambda.ln() - lambda - ln_gamma(y + 1.0))
    }
}

/// `-log Poisson(count | λ)`.
pub fn poisson_nll(count: u64, lambda: f64) -> f64 {
    let lambda = lambda.max(LAMBDA_FLOOR);
    let y = count as f64;
    lambda - y * lambda.ln() + ln_gamma(y + 1.0)
}

/// Zero-inflated Poisson probability mass.
pub fn zip_pmf(count: u64, lambda: f64, pi: f64) -> f64 {
    let poisson = (-poisson_nll(count, lambda)).exp();
    if count == 0 {
        pi + (1.0 - pi) * poisson
    } else {
        (1.0 - pi) * poisson
    }
}

/// `Σ huber(R̂_t − R̂_{t−1}, δ)`; zero for fewer than two values.
pub fn smoothness_penalty(rt_hat: &[f64], delta: f64) -> f64 {
    rt_hat.windows(2).map(|w| grad::huber(w[1] - w[0], delta)).sum()
}

/// Differentiable objective for a batched forward pass over consecutive
/// positions `first..first + batch`.
///
/// λ_t uses the observed history; the data term is averaged over positions.
pub fn total_loss(
    tape: &mut Tape,
    series: &IncidenceSeries,
    output: &BatchOutput,
    first: usize,
    gi: &GenerationInterval,
    cfg: &TrainConfig,
) -> Result<Var> {
    let batch = tape.shape(output.rt)[0];
    if first == 0 || first + batch > series.len() {
        return Err(Error::InvalidInput(format!(
            "positions {first}..{} do not fit a series of length {}",
            first + batch,
            series.len()
        )));
    }
    let counts = &series.counts()[first..first + batch];
    let hist = series.as_f64();
    let infect: Vec<f64> = (first..first + batch)
        .map(|t| total_infectiousness(&hist, gi.weights(), t))
        .collect();

    let lambda = {
        let inf = tape.constant(Tensor::vector(infect));
        let l = tape.mul(output.rt, inf)?;
        tape.clamp_min(l, LAMBDA_FLOOR)
    };
    let log_lambda = tape.log(lambda)?;
    let u = output.pi_logit;
    // log π = -softplus(-u), log(1-π) = -softplus(u)
    let neg_u = tape.neg(u);
    let sp_neg = tape.softplus(neg_u);
    let log_pi = tape.neg(sp_neg);
    let sp_pos = tape.softplus(u);
    let log_keep = tape.neg(sp_pos);

    // positive counts: -(log(1-π) + y log λ - λ - log y!)
    let y: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let lgam: Vec<f64> = y.iter().map(|&v| ln_gamma(v + 1.0)).collect();
    let y_t = tape.constant(Tensor::vector(y));
    let lgam_t = tape.constant(Tensor::vector(lgam));
    let ylog = tape.mul(y_t, log_lambda)?;
    let pos = tape.add(log_keep, ylog)?;
    let pos = tape.sub(pos, lambda)?;
    let pos = tape.sub(pos, lgam_t)?;
    let pos = tape.neg(pos);

    // zero counts: -logsumexp(log π, log(1-π) - λ), shifted by a detached max
    let b = tape.sub(log_keep, lambda)?;
    let shift: Vec<f64> = tape
        .value(log_pi)
        .data()
        .iter()
        .zip(tape.value(b).data())
        .map(|(x, y)| x.max(*y))
        .collect();
    let shift = tape.constant(Tensor::vector(shift));
    let ea = tape.sub(log_pi, shift)?;
    let ea = tape.exp(ea);
    let eb = tape.sub(b, shift)?;
    let eb = tape.exp(eb);
    let s = tape.add(ea, eb)?;
    let lse = tape.log(s)?;
    let lse = tape.add(lse, shift)?;
    let zero = tape.neg(lse);

    let zmask: Vec<f64> = counts.iter().map(|&c| if c == 0 { 1.0 } else { 0.0 }).collect();
    let pmask: Vec<f64> = zmask.iter().map(|z| 1.0 - z).collect();
    let zmask = tape.constant(Tensor::vector(zmask));
    let pmask = tape.constant(Tensor::vector(pmask));
    let zt = tape.mul(zero, zmask)?;
    let pt = tape.mul(pos, pmask)?;
    let nll = tape.add(zt, pt)?;
    let data_term = tape.mean(nll);

    if cfg.smooth_weight == 0.0 || batch < 2 {
        return Ok(data_term);
    }
    let next = tape.narrow(output.rt, 0, 1, batch - 1)?;
    let prev = tape.narrow(output.rt, 0, 0, batch - 1)?;
    let diff = tape.sub(next, prev)?;
    let hub = tape.huber(diff, cfg.huber_delta);
    let smooth = tape.sum(hub);
    let smooth = tape.scale(smooth, cfg.smooth_weight);
    Ok(tape.add(data_term, smooth)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParams,
    pub train_config: TrainConfig,
    /// Position of the first estimate.
    pub first: usize,
    pub rt_hat: Vec<f64>,
    pub pi_hat: Vec<f64>,
    /// `R̂_t Λ_t` with Λ from the observed history.
    pub lambda_hat: Vec<f64>,
    pub loss_history: Vec<f64>,
}

impl FitResult {
    pub fn inference(&self) -> InferenceOutput {
        InferenceOutput {
            first: self.first,
            rt_hat: self.rt_hat.clone(),
            pi_hat: self.pi_hat.clone(),
        }
    }

    pub fn aligned_rt(&self, total: usize) -> Vec<Option<f64>> {
        self.inference().aligned_rt(total)
    }

    /// Rows of `(position, R̂, π̂, λ̂)`.
    pub fn rows(&self) -> impl Iterator<Item = (usize, f64, f64, f64)> + '_ {
        (0..self.rt_hat.len()).map(|i| (self.first + i, self.rt_hat[i], self.pi_hat[i], self.lambda_hat[i]))
    }
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Trains a freshly initialised network on one series.
pub fn fit(
    series: &IncidenceSeries,
    gi: &GenerationInterval,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<FitResult> {
    fit_with_progress(series, gi, mcfg, tcfg, |_, _| {})
}

/// [`fit`] with a callback receiving `(epoch, loss)` after every epoch.
pub fn fit_with_progress(
    series: &IncidenceSeries,
    gi: &GenerationInterval,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<FitResult> {
    mcfg.validate()?;
    tcfg.validate()?;
    let len = mcfg.context_len;
    if series.len() <= len + 5 {
        return Err(Error::InvalidInput(format!(
            "series of length {} is too short for context length {len}",
            series.len()
        )));
    }
    let count_scale = 1.0 + series.max_count() as f64;
    let mut params = ModelParams::init(mcfg, count_scale, series.len(), tcfg.rng_seed)?;
    let history = series.as_f64();
    let positions: Vec<usize> = (len..series.len()).collect();

    let mut state: BTreeMap<String, AdamState> = params
        .tensors
        .iter()
        .map(|(k, t)| {
            let n = t.numel();
            (
                k.clone(),
                AdamState {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                },
            )
        })
        .collect();
    let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut loss_history = Vec::with_capacity(tcfg.epochs);

    for epoch in 0..tcfg.epochs {
        let mut tape = Tape::new();
        let net = Network::bind(&mut tape, &params, true);
        let loss = net
            .forward_positions(&mut tape, &history, &positions)
            .and_then(|out| total_loss(&mut tape, series, &out, len, gi, tcfg))
            .map_err(|e| match e {
                Error::Grad(grad::GradError::Domain(_)) => Error::NonFiniteLoss { epoch, value: f64::NAN },
                e => e,
            })?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, value });
        }
        tape.backward(loss)?;
        let grads: Vec<(String, Tensor)> = net
            .vars()
            .map(|(name, v)| {
                let g = tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
                (name.to_string(), g)
            })
            .collect();
        drop(net);
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, value: norm });
        }
        let clip = match tcfg.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let step = (epoch + 1) as i32;
        let bc1 = 1.0 - beta1.powi(step);
        let bc2 = 1.0 - beta2.powi(step);
        for (name, g) in grads {
            let p = params.tensors.get_mut(&name).expect("bound parameter");
            let st = state.get_mut(&name).expect("optimiser state");
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi * clip;
                match tcfg.optimizer {
                    Optimizer::Sgd => *w -= tcfg.learning_rate * gi,
                    Optimizer::Adam => {
                        st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * gi;
                        st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * gi * gi;
                        let mh = st.m[i] / bc1;
                        let vh = st.v[i] / bc2;
                        *w -= tcfg.learning_rate * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        loss_history.push(value);
        progress(epoch, value);
    }

    let inference = crate::model::infer_trajectory(series, &params)?;
    let lambda_hat = inference
        .rt_hat
        .iter()
        .enumerate()
        .map(|(i, r)| r * total_infectiousness(&history, gi.weights(), len + i))
        .collect();
    Ok(FitResult {
        params,
        train_config: tcfg.clone(),
        first: len,
        rt_hat: inference.rt_hat,
        pi_hat: inference.pi_hat,
        lambda_hat,
        loss_history,
    })
}

/// Future reproduction numbers and expected incidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub rt: Vec<f64>,
    pub incidence: Vec<f64>,
}

/// Recursive renewal projection with `rt_at(history)` supplying R̂ for the
/// position just past the end of `history`. Expected incidence (not a draw)
/// is appended at each step.
pub fn forecast_with(
    history: &[f64],
    gi: &GenerationInterval,
    horizon: usize,
    mut rt_at: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Forecast> {
    if horizon == 0 {
        return Err(Error::InvalidParameter("forecast horizon must be at least 1".into()));
    }
    if history.is_empty() {
        return Err(Error::InvalidInput("forecast needs a non-empty history".into()));
    }
    let mut hist = history.to_vec();
    let mut out = Forecast {
        rt: Vec::with_capacity(horizon),
        incidence: Vec::with_capacity(horizon),
    };
    for _ in 0..horizon {
        let r = rt_at(&hist)?;
        let lambda = r * total_infectiousness(&hist, gi.weights(), hist.len());
        out.rt.push(r);
        out.incidence.push(lambda);
        hist.push(lambda);
    }
    Ok(out)
}

/// Extends `series` by `horizon` days using the fitted network.
pub fn forecast(
    fit: &FitResult,
    series: &IncidenceSeries,
    gi: &GenerationInterval,
    horizon: usize,
) -> Result<Forecast> {
    forecast_from_params(&fit.params, series, gi, horizon)
}

pub fn forecast_from_params(
    params: &ModelParams,
    series: &IncidenceSeries,
    gi: &GenerationInterval,
    horizon: usize,
) -> Result<Forecast> {
    if series.len() < params.config.context_len {
        return Err(Error::InvalidInput(format!(
            "series of length {} is shorter than the context length {}",
            series.len(),
            params.config.context_len
        )));
    }
    forecast_with(&series.as_f64(), gi, horizon, |hist| {
        let mut tape = Tape::new();
        let net = Network::bind(&mut tape, params, false);
        let out = net.forward_positions(&mut tape, hist, &[hist.len()])?;
        Ok(tape.value(out.rt).item())
    })
}

/// λ̂ compared against each reconstruction target on the same positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub lambda_true: AccuracyReport,
    pub observed: AccuracyReport,
    pub raw: AccuracyReport,
    pub lambda_renewal: AccuracyReport,
}

pub fn reconstruction_report(
    fit: &FitResult,
    replica: &ScenarioReplica,
    gi: &GenerationInterval,
) -> Result<ReconstructionReport> {
    let total = replica.observed_incidence.len();
    let truth_len = [
        replica.true_rt.len(),
        replica.lambda_true.len(),
        replica.raw_incidence.len(),
    ];
    if truth_len.iter().any(|&n| n != total) || total == 0 {
        return Err(Error::InvalidInput(
            "replica ground truth is missing or misaligned".into(),
        ));
    }
    if fit.first + fit.lambda_hat.len() > total {
        return Err(Error::InvalidInput("fit covers positions beyond the replica".into()));
    }
    let mut est = vec![None; total];
    for (i, &l) in fit.lambda_hat.iter().enumerate() {
        est[fit.first + i] = Some(l);
    }
    let observed = replica.observed_incidence.as_f64();
    let raw = replica.raw_incidence.as_f64();
    let infect = infectiousness_profile(&observed, gi);
    let renewal: Vec<f64> = replica
        .true_rt
        .values()
        .iter()
        .zip(&infect)
        .map(|(r, l)| r * l)
        .collect();
    let range = fit.first..total;
    let report = ReconstructionReport {
        lambda_true: incidence_errors(&est, replica.lambda_true.values(), range.clone())?,
        observed: incidence_errors(&est, &observed, range.clone())?,
        raw: incidence_errors(&est, &raw, range.clone())?,
        lambda_renewal: incidence_errors(&est, &renewal, range)?,
    };
    let n = report.lambda_true.n_valid;
    debug_assert!([
        report.observed.n_valid,
        report.raw.n_valid,
        report.lambda_renewal.n_valid
    ]
    .iter()
    .all(|&m| m == n));
    Ok(report)
}

#[cfg(test)]
mod tests;
