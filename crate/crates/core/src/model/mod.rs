//! Conditional inverse mapping `(t, H_t) -> (R_t, π_t)`.
//!
//! The network has four parts:
//!
//! * a time embedding: fixed Fourier features of the normalised day index
//!   followed by a two-layer MLP;
//! * a history encoder: the last `L` counts (scaled by the series maximum)
//!   and their first differences run through two dilated causal TCN stacks
//!   with different kernel sizes, are projected to `embed_dim` and refined
//!   by transformer encoder layers;
//! * a fusion step: the time embedding queries the encoded history tokens by
//!   multi-head cross-attention, and the embedding, the last history token
//!   and the attention output are concatenated;
//! * two heads: softplus for `R_t > 0` and sigmoid for `π_t ∈ (0, 1)`.
//!
//! The window for day `t` ends at day `t-1`, so estimates are prospective.

mod network;
mod params;

pub use network::{encode_history, forward, history_input, infer_trajectory, BatchOutput, Network};
pub use params::{ModelParams, PARAMS_FORMAT, PARAMS_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::renewal::RtTrajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// History window length `L` in days.
    pub context_len: usize,
    /// Non-trainable Fourier frequencies.
    pub fourier_freqs: Vec<f64>,
    /// One TCN branch per kernel size.
    pub kernel_sizes: Vec<usize>,
    pub tcn_channels: usize,
    pub dilations: Vec<usize>,
    pub embed_dim: usize,
    pub attn_heads: usize,
    pub attn_layers: usize,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            context_len: 21,
            fourier_freqs: vec![1.0, 2.0, 4.0, 8.0, 16.0],
            kernel_sizes: vec![3, 7],
            tcn_channels: 16,
            dilations: vec![1, 2, 4],
            embed_dim: 32,
            attn_heads: 2,
            attn_layers: 1,
            head_hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.context_len < 2 {
            return bad(format!("context_len must be >= 2, got {}", self.context_len));
        }
        if self.fourier_freqs.is_empty() {
            return bad("fourier_freqs is empty".into());
        }
        if self.fourier_freqs.iter().any(|a| *a <= 0.0 || !a.is_finite()) {
            return bad("fourier_freqs must be positive".into());
        }
        if self.kernel_sizes.is_empty() || self.kernel_sizes.contains(&0) {
            return bad("kernel_sizes must be non-empty and positive".into());
        }
        if let Some(&k) = self.kernel_sizes.iter().max() {
            if k > self.context_len {
                return bad(format!("kernel size {k} exceeds context_len {}", self.context_len));
            }
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return bad("dilations must be non-empty and positive".into());
        }
        for (name, v) in [
            ("tcn_channels", self.tcn_channels),
            ("embed_dim", self.embed_dim),
            ("attn_heads", self.attn_heads),
            ("head_hidden", self.head_hidden),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.embed_dim.is_multiple_of(self.attn_heads) {
            return bad(format!(
                "embed_dim {} not divisible by attn_heads {}",
                self.embed_dim, self.attn_heads
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.attn_heads
    }
}

/// `[cos(α_j π t/T)]_j ++ [sin(α_j π t/T)]_j`.
pub fn fourier_time_features(t: f64, freqs: &[f64], horizon: usize) -> Result<Vec<f64>> {
    if freqs.is_empty() {
        return Err(Error::InvalidConfig("fourier_freqs is empty".into()));
    }
    if horizon == 0 {
        return Err(Error::InvalidInput("horizon must be >= 1".into()));
    }
    let tn = t / horizon as f64;
    let arg = |a: f64| a * std::f64::consts::PI * tn;
    Ok(freqs
        .iter()
        .map(|&a| arg(a).cos())
        .chain(freqs.iter().map(|&a| arg(a).sin()))
        .collect())
}

/// Point estimates for positions `first..first + len`.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutput {
    /// Position of the first estimate (equals the context length).
    pub first: usize,
    pub rt_hat: Vec<f64>,
    pub pi_hat: Vec<f64>,
}

impl InferenceOutput {
    pub fn len(&self) -> usize {
        self.rt_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rt_hat.is_empty()
    }

    /// Estimates aligned to a series of length `total`, `None` before `first`.
    pub fn aligned_rt(&self, total: usize) -> Vec<Option<f64>> {
        (0..total)
            .map(|t| t.checked_sub(self.first).and_then(|i| self.rt_hat.get(i).copied()))
            .collect()
    }

    pub fn rt_trajectory(&self) -> Result<RtTrajectory> {
        RtTrajectory::new(self.rt_hat.clone())
    }
}
