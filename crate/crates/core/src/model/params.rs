use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::grad::Tensor;

pub const PARAMS_FORMAT: &str = "cirl-params";
pub const PARAMS_VERSION: u32 = 1;

/// Trainable tensors keyed by name, plus the constants inference needs to
/// reproduce training-time inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// Counts are divided by this before entering the network.
    pub count_scale: f64,
    /// Day index normaliser for the time features.
    pub time_horizon: usize,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    params: ModelParams,
}

impl ModelParams {
    /// Uniform `[-1/√fan_in, 1/√fan_in]` weights and biases; layer-norm gains
    /// start at one and their offsets at zero.
    pub fn init(config: &ModelConfig, count_scale: f64, time_horizon: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if count_scale <= 0.0 || !count_scale.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "count_scale must be positive, got {count_scale}"
            )));
        }
        if time_horizon == 0 {
            return Err(Error::InvalidParameter("time_horizon must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        let mut uniform = |name: String, shape: &[usize], fan_in: usize| {
            let s = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-s..s)).collect();
            tensors.insert(name, Tensor::new(shape.to_vec(), data).expect("valid shape"));
        };
        let c = config.tcn_channels;
        let e = config.embed_dim;
        let f = 2 * config.fourier_freqs.len();
        let h = config.head_hidden;

        for (bi, &k) in config.kernel_sizes.iter().enumerate() {
            for (li, _) in config.dilations.iter().enumerate() {
                let cin = if li == 0 { 2 } else { c };
                uniform(format!("tcn.{bi}.{li}.w"), &[c, cin, k], cin * k);
                uniform(format!("tcn.{bi}.{li}.b"), &[c], cin * k);
            }
        }
        let cat = c * config.kernel_sizes.len();
        uniform("proj.w".into(), &[cat, e], cat);
        uniform("proj.b".into(), &[e], cat);
        for l in 0..config.attn_layers {
            for m in ["wq", "wk", "wv", "wo"] {
                uniform(format!("enc.{l}.{m}"), &[e, e], e);
                uniform(format!("enc.{l}.b{}", &m[1..]), &[e], e);
            }
            uniform(format!("enc.{l}.ff1.w"), &[e, 2 * e], e);
            uniform(format!("enc.{l}.ff1.b"), &[2 * e], e);
            uniform(format!("enc.{l}.ff2.w"), &[2 * e, e], 2 * e);
            uniform(format!("enc.{l}.ff2.b"), &[e], 2 * e);
        }
        uniform("time.w1".into(), &[f, e], f);
        uniform("time.b1".into(), &[e], f);
        uniform("time.w2".into(), &[e, e], e);
        uniform("time.b2".into(), &[e], e);
        for m in ["wq", "wk", "wv", "wo"] {
            uniform(format!("fuse.{m}"), &[e, e], e);
            uniform(format!("fuse.b{}", &m[1..]), &[e], e);
        }
        for head in ["r_head", "pi_head"] {
            uniform(format!("{head}.w1"), &[3 * e, h], 3 * e);
            uniform(format!("{head}.b1"), &[h], 3 * e);
            uniform(format!("{head}.w2"), &[h, 1], h);
            uniform(format!("{head}.b2"), &[1], h);
        }
        for l in 0..config.attn_layers {
            for ln in ["ln1", "ln2"] {
                tensors.insert(format!("enc.{l}.{ln}.g"), Tensor::new(vec![e], vec![1.0; e])?);
                tensors.insert(format!("enc.{l}.{ln}.b"), Tensor::zeros(&[e]));
            }
        }
        Ok(Self {
            config: config.clone(),
            count_scale,
            time_horizon,
            tensors,
        })
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.count_scale.is_finite() && self.tensors.values().all(Tensor::is_finite)
    }

    /// Checks every tensor against a fresh initialisation of the stored config.
    pub fn validate(&self) -> Result<()> {
        let reference = Self::init(&self.config, self.count_scale, self.time_horizon, 0)?;
        if reference.tensors.len() != self.tensors.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} tensors, found {}",
                reference.tensors.len(),
                self.tensors.len()
            )));
        }
        for (name, t) in &reference.tensors {
            match self.tensors.get(name) {
                Some(own) if own.shape() == t.shape() => {}
                Some(own) => {
                    return Err(Error::InvalidInput(format!(
                        "{name} has shape {:?}, expected {:?}",
                        own.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::InvalidInput(format!("missing tensor {name}"))),
            }
        }
        if !self.is_finite() {
            return Err(Error::InvalidInput("parameters contain non-finite values".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ParamsFile {
            format: PARAMS_FORMAT.into(),
            version: PARAMS_VERSION,
            params: self.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ParamsFile = serde_json::from_str(text)?;
        if file.format != PARAMS_FORMAT {
            return Err(Error::InvalidInput(format!(
                "not a parameter file (format {:?})",
                file.format
            )));
        }
        if file.version != PARAMS_VERSION {
            return Err(Error::InvalidInput(format!(
                "parameter file version {} unsupported (expected {PARAMS_VERSION})",
                file.version
            )));
        }
        file.params.validate()?;
        Ok(file.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
