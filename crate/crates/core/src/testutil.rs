//! Central finite-difference oracle shared by unit tests.

use crate::grad::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Largest norm-wise relative error between reverse-mode gradients of
/// `build` and central differences with the given step, over all inputs.
pub fn max_gradient_error(inputs: &[Tensor], step: f64, build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).item()
    };

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        let mut xs = inputs.to_vec();
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = input.data()[j];
            xs[i].data_mut()[j] = orig + step;
            let up = eval(&xs);
            xs[i].data_mut()[j] = orig - step;
            let down = eval(&xs);
            xs[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        let a = analytic[i].data();
        let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = na.max(nn);
        let err = if denom < 1e-12 { diff } else { diff / denom };
        worst = worst.max(err);
    }
    worst
}

/// Small network for tests that only exercise plumbing.
pub fn tiny_model() -> crate::model::ModelConfig {
    crate::model::ModelConfig {
        context_len: 8,
        fourier_freqs: vec![1.0, 3.0],
        kernel_sizes: vec![2, 3],
        tcn_channels: 3,
        dilations: vec![1, 2],
        embed_dim: 4,
        attn_heads: 2,
        attn_layers: 1,
        head_hidden: 5,
    }
}
