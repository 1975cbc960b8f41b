use super::*;
use crate::renewal::{simulate_epidemic, RtTrajectory};
use crate::synth::{generate_replica, MaskSpec, StepProfileSpec};

fn gi() -> GenerationInterval {
    GenerationInterval::discretize(8.0, 3.0, 30).unwrap()
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        context_len: 7,
        fourier_freqs: vec![1.0, 2.0],
        kernel_sizes: vec![2, 3],
        tcn_channels: 4,
        dilations: vec![1, 2],
        embed_dim: 8,
        attn_heads: 2,
        attn_layers: 1,
        head_hidden: 8,
    }
}

#[test]
fn zip_nll_examples() {
    assert!((zip_nll(0, 1.0, 0.0) - 1.0).abs() < 1e-12);
    let expect = -(0.5 + 0.5 * (-1.0f64).exp()).ln();
    assert!((zip_nll(0, 1.0, 0.5) - expect).abs() < 1e-12);
    assert!((zip_nll(0, 1.0, 0.5) - 0.37989).abs() < 1e-5);
    let expect = 3.0 - 3.0 * 3.0f64.ln() + 6.0f64.ln();
    assert!((zip_nll(3, 3.0, 0.0) - expect).abs() < 1e-12);
    assert!((zip_nll(3, 3.0, 0.0) - 1.49592).abs() < 1e-5);
}

#[test]
fn zip_reduces_to_poisson() {
    for &lambda in &[1e-3, 0.1, 1.0, 5.0, 20.0, 300.0] {
        for y in 0..50 {
            assert!((zip_nll(y, lambda, 0.0) - poisson_nll(y, lambda)).abs() <= 1e-10);
        }
    }
}

#[test]
fn zip_pmf_sums_to_one() {
    for &lambda in &[0.1, 1.0, 5.0, 20.0] {
        for &pi in &[0.0, 0.3, 0.9] {
            let k = (lambda + 40.0 * f64::sqrt(lambda) + 40.0).ceil() as u64;
            let total: f64 = (0..=k).map(|y| zip_pmf(y, lambda, pi)).sum();
            assert!((total - 1.0).abs() <= 1e-9, "λ={lambda} π={pi}: {total}");
        }
    }
}

#[test]
fn smoothness_examples() {
    assert_eq!(smoothness_penalty(&[1.2; 6], 0.25), 0.0);
    assert!((smoothness_penalty(&[1.0, 1.2], 0.25) - 0.02).abs() < 1e-12);
    assert!((smoothness_penalty(&[1.0, 1.1, 3.1], 1.0) - 1.505).abs() < 1e-12);
    assert_eq!(smoothness_penalty(&[2.0], 1.0), 0.0);
    assert_eq!(smoothness_penalty(&[], 1.0), 0.0);
}

/// Builds the loss on a tape where R̂ and the π logits are leaves.
fn loss_from_leaves(
    series: &IncidenceSeries,
    rt: &[f64],
    logits: &[f64],
    first: usize,
    cfg: &TrainConfig,
) -> (Tape, Var, Var, Var) {
    let mut tape = Tape::new();
    let r = tape.param(Tensor::vector(rt.to_vec()));
    let u = tape.param(Tensor::vector(logits.to_vec()));
    let pi = tape.sigmoid(u);
    let out = BatchOutput { rt: r, pi_logit: u, pi };
    let loss = total_loss(&mut tape, series, &out, first, &gi(), cfg).unwrap();
    (tape, loss, r, u)
}

#[test]
fn total_loss_matches_scalar_formulas() {
    let counts: Vec<u64> = vec![3, 5, 0, 7, 2, 0, 4, 6, 0, 1];
    let series = IncidenceSeries::from_counts(counts.clone()).unwrap();
    let rt = [1.1, 0.9, 1.4, 0.7, 1.0, 1.3];
    let logits = [-1.0, 0.5, -2.0, 0.3, 1.5, -0.4];
    let first = 4;
    let cfg = TrainConfig {
        smooth_weight: 0.7,
        huber_delta: 0.25,
        ..TrainConfig::default()
    };
    let (tape, loss, _, _) = loss_from_leaves(&series, &rt, &logits, first, &cfg);
    let hist = series.as_f64();
    let nll: f64 = (0..rt.len())
        .map(|i| {
            let lam = rt[i] * total_infectiousness(&hist, gi().weights(), first + i);
            zip_nll(counts[first + i], lam, grad::sigmoid(logits[i]))
        })
        .sum::<f64>()
        / rt.len() as f64;
    let expect = nll + 0.7 * smoothness_penalty(&rt, 0.25);
    assert!((tape.value(loss).item() - expect).abs() < 1e-12);

    let no_smooth = TrainConfig {
        smooth_weight: 0.0,
        ..cfg
    };
    let (tape, loss, _, _) = loss_from_leaves(&series, &rt, &logits, first, &no_smooth);
    assert!((tape.value(loss).item() - nll).abs() < 1e-12);
}

#[test]
fn perfect_fit_limit_is_one_per_step() {
    // constant history of ones: Λ_t = Σ_{τ<=t} w_τ, choose R̂ = 1/Λ_t
    let series = IncidenceSeries::from_counts(vec![1; 60]).unwrap();
    let hist = series.as_f64();
    let first = 40;
    let rt: Vec<f64> = (first..60)
        .map(|t| 1.0 / total_infectiousness(&hist, gi().weights(), t))
        .collect();
    let logits = vec![-40.0; rt.len()];
    let cfg = TrainConfig {
        smooth_weight: 0.0,
        ..TrainConfig::default()
    };
    let (tape, loss, _, _) = loss_from_leaves(&series, &rt, &logits, first, &cfg);
    assert!((tape.value(loss).item() - 1.0).abs() < 1e-9);
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let counts: Vec<u64> = vec![2, 4, 0, 6, 3, 0, 5, 8, 0, 2, 9, 0];
    let series = IncidenceSeries::from_counts(counts).unwrap();
    let cfg = TrainConfig {
        smooth_weight: 0.3,
        huber_delta: 0.2,
        ..TrainConfig::default()
    };
    let first = 3;
    let rt = crate::testutil::random_tensor(&[9], 0.3, 2.5, 5);
    let u = crate::testutil::random_tensor(&[9], -2.0, 2.0, 6);
    let err = crate::testutil::max_gradient_error(&[rt, u], 1e-6, |tape, v| {
        let pi = tape.sigmoid(v[1]);
        let out = BatchOutput {
            rt: v[0],
            pi_logit: v[1],
            pi,
        };
        total_loss(tape, &series, &out, first, &gi(), &cfg).unwrap()
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn heavy_smoothing_dominates_the_gradient() {
    let counts: Vec<u64> = (0..30).map(|i| (i % 7 + 1) as u64).collect();
    let series = IncidenceSeries::from_counts(counts).unwrap();
    let rt: Vec<f64> = (0..20).map(|i| 1.0 + 0.4 * ((i * 5 % 3) as f64 - 1.0)).collect();
    let logits = vec![-1.0; 20];
    let norm = |w: f64| {
        let cfg = TrainConfig {
            smooth_weight: w,
            ..TrainConfig::default()
        };
        let (mut tape, loss, r, _) = loss_from_leaves(&series, &rt, &logits, 10, &cfg);
        tape.backward(loss).unwrap();
        tape.grad(r).unwrap().data().iter().map(|g| g * g).sum::<f64>().sqrt()
    };
    assert!(norm(1e3) > 100.0 * norm(0.0));
}

#[test]
fn total_loss_rejects_misaligned_positions() {
    let series = IncidenceSeries::from_counts(vec![1; 10]).unwrap();
    let mut tape = Tape::new();
    let r = tape.param(Tensor::vector(vec![1.0; 5]));
    let u = tape.param(Tensor::vector(vec![0.0; 5]));
    let pi = tape.sigmoid(u);
    let out = BatchOutput { rt: r, pi_logit: u, pi };
    assert!(total_loss(&mut tape, &series, &out, 7, &gi(), &TrainConfig::default()).is_err());
}

#[test]
fn config_validation() {
    TrainConfig::default().validate().unwrap();
    for bad in [
        TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            huber_delta: -1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            smooth_weight: f64::NAN,
            ..TrainConfig::default()
        },
        TrainConfig {
            grad_clip: Some(0.0),
            ..TrainConfig::default()
        },
    ] {
        assert!(bad.validate().is_err());
    }
    let parsed: TrainConfig = serde_json::from_str(r#"{"epochs": 5, "optimizer": "sgd"}"#).unwrap();
    assert_eq!(parsed.epochs, 5);
    assert_eq!(parsed.optimizer, Optimizer::Sgd);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 5}"#).is_err());
}

fn quick_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        learning_rate: 1e-2,
        rng_seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn fit_descends_and_is_deterministic() {
    let rt = RtTrajectory::constant(1.3, 50).unwrap();
    let (series, _) = simulate_epidemic(&rt, &gi(), 5, 50, 11).unwrap();
    let a = fit(&series, &gi(), &tiny_model(), &quick_cfg(30)).unwrap();
    assert_eq!(a.loss_history.len(), 30);
    assert!(a.loss_history.iter().all(|l| l.is_finite()));
    let min = a.loss_history.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(min <= a.loss_history[0]);
    assert!(a.loss_history.last().unwrap() < &a.loss_history[0]);
    assert_eq!(a.first, 7);
    assert_eq!(a.rt_hat.len(), 43);
    let hist = series.as_f64();
    for (t, r, pi, l) in a.rows() {
        assert!(r > 0.0 && pi > 0.0 && pi < 1.0);
        assert!((l - r * total_infectiousness(&hist, gi().weights(), t)).abs() < 1e-12);
    }
    let b = fit(&series, &gi(), &tiny_model(), &quick_cfg(30)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn fit_rejects_short_series_and_bad_configs() {
    let series = IncidenceSeries::from_counts(vec![3; 12]).unwrap();
    assert!(fit(&series, &gi(), &tiny_model(), &quick_cfg(2)).is_err());
    let series = IncidenceSeries::from_counts(vec![3; 40]).unwrap();
    assert!(fit(&series, &gi(), &tiny_model(), &quick_cfg(0)).is_err());
}

#[test]
fn fit_aborts_on_non_finite_loss() {
    let rt = RtTrajectory::constant(1.3, 40).unwrap();
    let (series, _) = simulate_epidemic(&rt, &gi(), 5, 40, 2).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e200,
        grad_clip: None,
        optimizer: Optimizer::Sgd,
        ..quick_cfg(50)
    };
    match fit(&series, &gi(), &tiny_model(), &cfg) {
        Err(Error::NonFiniteLoss { epoch, .. }) => assert!(epoch > 0 && epoch < 50),
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn fit_recovers_constant_reproduction_number() {
    let rt = RtTrajectory::constant(1.5, 80).unwrap();
    let (series, _) = simulate_epidemic(&rt, &gi(), 10, 80, 7).unwrap();
    let cfg = TrainConfig {
        rng_seed: 7,
        ..crate::train::TrainConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 300,
        learning_rate: 1e-2,
        ..cfg
    };
    let f = fit(&series, &gi(), &ModelConfig::default(), &cfg).unwrap();
    let mut r = f.rt_hat.clone();
    r.sort_by(f64::total_cmp);
    let median = crate::metrics::quantile_sorted(&r, 0.5);
    assert!((median - 1.5).abs() <= 0.3, "median {median}");
}

#[test]
fn forecast_fixed_point_and_zero_regime() {
    let history = vec![20.0; 60];
    let f = forecast_with(&history, &gi(), 10, |_| Ok(1.0)).unwrap();
    assert_eq!(f.incidence.len(), 10);
    for l in &f.incidence {
        assert!((l - 20.0).abs() < 1e-9);
    }
    let f = forecast_with(&history, &gi(), 5, |_| Ok(0.0)).unwrap();
    assert!(f.incidence.iter().all(|&l| l == 0.0));
    assert!(matches!(
        forecast_with(&history, &gi(), 0, |_| Ok(1.0)),
        Err(Error::InvalidParameter(_))
    ));
}

#[test]
fn forecast_feeds_expected_incidence_back() {
    let history = vec![10.0; 40];
    let f = forecast_with(&history, &gi(), 3, |_| Ok(2.0)).unwrap();
    let mut h = history.clone();
    for &l in &f.incidence {
        let expect = 2.0 * total_infectiousness(&h, gi().weights(), h.len());
        assert_eq!(l, expect);
        h.push(l);
    }
}

#[test]
fn network_forecast_uses_fitted_parameters() {
    let rt = RtTrajectory::constant(1.2, 40).unwrap();
    let (series, _) = simulate_epidemic(&rt, &gi(), 5, 40, 4).unwrap();
    let mut fitted = fit(&series, &gi(), &tiny_model(), &quick_cfg(3)).unwrap();
    // softplus(ln(e - 1)) = 1: force R̂ ≡ 1 through the real network
    for (name, t) in fitted.params.tensors.iter_mut() {
        if name == "r_head.w2" {
            t.data_mut().fill(0.0);
        }
        if name == "r_head.b2" {
            t.data_mut()[0] = (std::f64::consts::E - 1.0).ln();
        }
    }
    let flat = IncidenceSeries::from_counts(vec![20; 40]).unwrap();
    let f = forecast(&fitted, &flat, &gi(), 10).unwrap();
    for (r, l) in f.rt.iter().zip(&f.incidence) {
        assert!((r - 1.0).abs() < 1e-12);
        assert!((l - 20.0).abs() < 1e-9);
    }
    assert!(forecast(&fitted, &flat, &gi(), 0).is_err());
}

#[test]
fn reconstruction_targets_share_positions() {
    let spec = StepProfileSpec {
        levels: vec![1.6, 0.9],
        change_points: vec![25],
        horizon: 45,
    };
    let replica = generate_replica(&spec, &gi(), 5, None, 9).unwrap();
    let f = fit(&replica.observed_incidence, &gi(), &tiny_model(), &quick_cfg(3)).unwrap();
    let rep = reconstruction_report(&f, &replica, &gi()).unwrap();
    assert_eq!(rep.observed, rep.raw);
    assert_eq!(rep.lambda_true.n_valid, 45 - 7);
    assert_eq!(rep.lambda_renewal.valid_indices, rep.raw.valid_indices);

    let mask = MaskSpec {
        p_pre: 0.5,
        p_post: 0.5,
        ..MaskSpec::default()
    };
    let masked = generate_replica(&spec, &gi(), 5, Some(&mask), 9).unwrap();
    let f = fit(&masked.observed_incidence, &gi(), &tiny_model(), &quick_cfg(3)).unwrap();
    let rep = reconstruction_report(&f, &masked, &gi()).unwrap();
    let raw = masked.raw_incidence.as_f64();
    let n = f.lambda_hat.len() as f64;
    let mse: f64 = f
        .lambda_hat
        .iter()
        .enumerate()
        .map(|(i, l)| (l - raw[7 + i]).powi(2))
        .sum::<f64>()
        / n;
    assert!((rep.raw.rmse - mse.sqrt()).abs() < 1e-9);
    assert_ne!(rep.raw, rep.observed);
}

#[test]
fn reconstruction_against_its_own_truth_is_exact() {
    let spec = StepProfileSpec {
        levels: vec![1.6, 0.9],
        change_points: vec![25],
        horizon: 45,
    };
    let replica = generate_replica(&spec, &gi(), 5, None, 9).unwrap();
    let mut f = fit(&replica.observed_incidence, &gi(), &tiny_model(), &quick_cfg(2)).unwrap();
    f.lambda_hat = replica.lambda_true.values()[f.first..].to_vec();
    let rep = reconstruction_report(&f, &replica, &gi()).unwrap();
    assert_eq!(rep.lambda_true.rmse, 0.0);
    // λ_true uses raw counts, which equal observed counts without a mask
    assert!(rep.lambda_renewal.rmse < 1e-9);
}
