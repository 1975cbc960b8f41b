use std::collections::BTreeMap;

use super::{fourier_time_features, InferenceOutput, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::grad::{Tape, Tensor, Var};
use crate::renewal::IncidenceSeries;

const LN_EPS: f64 = 1e-5;

/// Per-window outputs of a batched forward pass, each of shape `[batch]`.
#[derive(Debug, Clone, Copy)]
pub struct BatchOutput {
    pub rt: Var,
    pub pi_logit: Var,
    pub pi: Var,
}

/// [`ModelParams`] registered on a tape.
pub struct Network<'p> {
    params: &'p ModelParams,
    vars: BTreeMap<&'p str, Var>,
}

/// Two-channel network input `[2, batch, L]` for the windows ending just
/// before each position: scaled counts and their first differences, with
/// the difference at each window's first slot set to zero.
pub fn history_input(history: &[f64], positions: &[usize], context: usize, scale: f64) -> Result<Tensor> {
    let batch = positions.len();
    if batch == 0 {
        return Err(Error::InvalidInput("no positions to evaluate".into()));
    }
    let mut data = vec![0.0; 2 * batch * context];
    for (b, &t) in positions.iter().enumerate() {
        if t < context || t > history.len() {
            return Err(Error::OutOfContext { t, context });
        }
        let window = &history[t - context..t];
        let (level, diff) = data.split_at_mut(batch * context);
        for j in 0..context {
            level[b * context + j] = window[j] / scale;
            if j > 0 {
                diff[b * context + j] = (window[j] - window[j - 1]) / scale;
            }
        }
    }
    Ok(Tensor::new(vec![2, batch, context], data)?)
}

impl<'p> Network<'p> {
    /// Register every parameter; `trainable = false` records them as constants.
    pub fn bind(tape: &mut Tape, params: &'p ModelParams, trainable: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.as_str(), v)
            })
            .collect();
        Self { params, vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    /// Parameter handles in name order.
    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> + '_ {
        self.vars.iter().map(|(k, v)| (*k, *v))
    }

    fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    fn linear(&self, tape: &mut Tape, x: Var, prefix: &str, w: &str, b: &str) -> Result<Var> {
        let y = tape.matmul(x, self.var(&format!("{prefix}.{w}")))?;
        Ok(tape.add_bias(y, self.var(&format!("{prefix}.{b}")), 1)?)
    }

    /// `[batch*len, E]` -> `[batch*heads, len, E/heads]`.
    fn split_heads(&self, tape: &mut Tape, x: Var, batch: usize, len: usize) -> Result<Var> {
        let (h, dh) = (self.config().attn_heads, self.config().head_dim());
        let x = tape.reshape(x, &[batch, len, h, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        Ok(tape.reshape(x, &[batch * h, len, dh])?)
    }

    fn merge_heads(&self, tape: &mut Tape, x: Var, batch: usize, len: usize) -> Result<Var> {
        let (h, dh) = (self.config().attn_heads, self.config().head_dim());
        let x = tape.reshape(x, &[batch, h, len, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        Ok(tape.reshape(x, &[batch * len, h * dh])?)
    }

    fn tcn_branch(&self, tape: &mut Tape, input: Var, branch: usize) -> Result<Var> {
        let mut x = input;
        for (li, &d) in self.config().dilations.iter().enumerate() {
            let y = tape.causal_conv1d(x, self.var(&format!("tcn.{branch}.{li}.w")), d)?;
            let y = tape.add_bias(y, self.var(&format!("tcn.{branch}.{li}.b")), 0)?;
            let y = tape.silu(y);
            x = if li == 0 { y } else { tape.add(x, y)? };
        }
        Ok(x)
    }

    /// History tokens `[batch*L, E]` for an input built by [`history_input`].
    pub fn encode_tokens(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let cfg = self.config();
        let (batch, len) = {
            let s = tape.shape(input);
            (s[1], s[2])
        };
        let branches = (0..cfg.kernel_sizes.len())
            .map(|b| self.tcn_branch(tape, input, b))
            .collect::<Result<Vec<_>>>()?;
        let feats = tape.concat(&branches, 0)?; // [C*branches, batch, L]
        let feats = tape.permute(feats, &[1, 2, 0])?;
        let width = cfg.tcn_channels * cfg.kernel_sizes.len();
        let feats = tape.reshape(feats, &[batch * len, width])?;
        let mut x = self.linear(tape, feats, "proj", "w", "b")?;
        let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
        for l in 0..cfg.attn_layers {
            let p = format!("enc.{l}");
            let q = self.linear(tape, x, &p, "wq", "bq")?;
            let k = self.linear(tape, x, &p, "wk", "bk")?;
            let v = self.linear(tape, x, &p, "wv", "bv")?;
            let (q, k, v) = (
                self.split_heads(tape, q, batch, len)?,
                self.split_heads(tape, k, batch, len)?,
                self.split_heads(tape, v, batch, len)?,
            );
            let a = tape.softmax_attention(q, k, v, scale)?;
            let a = self.merge_heads(tape, a, batch, len)?;
            let a = self.linear(tape, a, &p, "wo", "bo")?;
            let r = tape.add(x, a)?;
            x = tape.layer_norm(
                r,
                self.var(&format!("{p}.ln1.g")),
                self.var(&format!("{p}.ln1.b")),
                LN_EPS,
            )?;
            let f = self.linear(tape, x, &format!("{p}.ff1"), "w", "b")?;
            let f = tape.silu(f);
            let f = self.linear(tape, f, &format!("{p}.ff2"), "w", "b")?;
            let r = tape.add(x, f)?;
            x = tape.layer_norm(
                r,
                self.var(&format!("{p}.ln2.g")),
                self.var(&format!("{p}.ln2.b")),
                LN_EPS,
            )?;
        }
        Ok(x)
    }

    /// Estimates for each position in `positions`, using `history` as the
    /// incidence record (entries at or after a position are never read).
    pub fn forward_positions(&self, tape: &mut Tape, history: &[f64], positions: &[usize]) -> Result<BatchOutput> {
        let cfg = self.config();
        let batch = positions.len();
        let len = cfg.context_len;
        let e = cfg.embed_dim;
        let input = history_input(history, positions, len, self.params.count_scale)?;
        let input = tape.constant(input);
        let tokens = self.encode_tokens(tape, input)?;

        let mut tf = Vec::with_capacity(batch * 2 * cfg.fourier_freqs.len());
        for &t in positions {
            tf.extend(fourier_time_features(
                (t + 1) as f64,
                &cfg.fourier_freqs,
                self.params.time_horizon,
            )?);
        }
        let tf = tape.constant(Tensor::new(vec![batch, 2 * cfg.fourier_freqs.len()], tf)?);
        let emb = self.linear(tape, tf, "time", "w1", "b1")?;
        let emb = tape.silu(emb);
        let emb = self.linear(tape, emb, "time", "w2", "b2")?;

        let q = self.linear(tape, emb, "fuse", "wq", "bq")?;
        let k = self.linear(tape, tokens, "fuse", "wk", "bk")?;
        let v = self.linear(tape, tokens, "fuse", "wv", "bv")?;
        let q = self.split_heads(tape, q, batch, 1)?;
        let k = self.split_heads(tape, k, batch, len)?;
        let v = self.split_heads(tape, v, batch, len)?;
        let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
        let cross = tape.softmax_attention(q, k, v, scale)?;
        let cross = self.merge_heads(tape, cross, batch, 1)?;
        let cross = self.linear(tape, cross, "fuse", "wo", "bo")?;

        let tokens3 = tape.reshape(tokens, &[batch, len, e])?;
        let last = tape.narrow(tokens3, 1, len - 1, 1)?;
        let last = tape.reshape(last, &[batch, e])?;
        let z = tape.concat(&[emb, last, cross], 1)?;

        let head = |tape: &mut Tape, name: &str| -> Result<Var> {
            let hdn = self.linear(tape, z, name, "w1", "b1")?;
            let hdn = tape.silu(hdn);
            let out = self.linear(tape, hdn, name, "w2", "b2")?;
            Ok(tape.reshape(out, &[batch])?)
        };
        let r_raw = head(tape, "r_head")?;
        let rt = tape.softplus(r_raw);
        let pi_logit = head(tape, "pi_head")?;
        let pi = tape.sigmoid(pi_logit);
        Ok(BatchOutput { rt, pi_logit, pi })
    }
}

/// Final-step history representation for a single window of length `L`.
pub fn encode_history(window: &[f64], params: &ModelParams) -> Result<Vec<f64>> {
    let len = params.config.context_len;
    if window.len() != len {
        return Err(Error::Grad(crate::grad::GradError::Shape(format!(
            "window has {} days, expected {len}",
            window.len()
        ))));
    }
    let mut tape = Tape::new();
    let net = Network::bind(&mut tape, params, false);
    let input = history_input(window, &[len], len, params.count_scale)?;
    let input = tape.constant(input);
    let tokens = net.encode_tokens(&mut tape, input)?;
    let e = params.config.embed_dim;
    Ok(tape.value(tokens).data()[(len - 1) * e..].to_vec())
}

/// `(R_t, π_t)` at position `t` from the `L` counts before it.
pub fn forward(t: usize, window: &[f64], params: &ModelParams) -> Result<(f64, f64)> {
    let len = params.config.context_len;
    if t < len {
        return Err(Error::OutOfContext { t, context: len });
    }
    if window.len() != len {
        return Err(Error::Grad(crate::grad::GradError::Shape(format!(
            "window has {} days, expected {len}",
            window.len()
        ))));
    }
    // place the window so that it ends just before position t
    let mut history = vec![0.0; t];
    history[t - len..].copy_from_slice(window);
    let mut tape = Tape::new();
    let net = Network::bind(&mut tape, params, false);
    let out = net.forward_positions(&mut tape, &history, &[t])?;
    Ok((tape.value(out.rt).item(), tape.value(out.pi).item()))
}

/// Estimates at every position with a full window, `t = L..T`.
pub fn infer_trajectory(series: &IncidenceSeries, params: &ModelParams) -> Result<InferenceOutput> {
    let len = params.config.context_len;
    if series.len() <= len {
        return Err(Error::InvalidInput(format!(
            "series of length {} needs more than {len} days",
            series.len()
        )));
    }
    let history = series.as_f64();
    let positions: Vec<usize> = (len..series.len()).collect();
    let mut tape = Tape::new();
    let net = Network::bind(&mut tape, params, false);
    let out = net.forward_positions(&mut tape, &history, &positions)?;
    Ok(InferenceOutput {
        first: len,
        rt_hat: tape.value(out.rt).data().to_vec(),
        pi_hat: tape.value(out.pi).data().to_vec(),
    })
}
