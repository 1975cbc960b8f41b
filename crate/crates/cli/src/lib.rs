//! Subcommand implementations behind the `cirl` binary.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use cirl_core::epiestim::{self, EpiEstimConfig};
use cirl_core::experiment::{
    run_benchmark, run_on_ensemble, simulate_scenario, write_report, BenchmarkConfig, GiConfig, RunManifest,
    ScenarioConfig, TOOL_VERSION,
};
use cirl_core::io::{
    epiestim_csv, file_sha256, fit_csv, opt, parse_incidence_csv, read_ensemble, write_ensemble, write_file,
    IncidenceTable,
};
use cirl_core::metrics::{incidence_errors, summarize, AccuracyReport};
use cirl_core::model::{ModelConfig, ModelParams};
use cirl_core::plot::{Figure, PlotSeries};
use cirl_core::renewal::infectiousness_profile;
use cirl_core::synth::MaskSpec;
use cirl_core::train::{fit_with_progress, forecast_from_params, reconstruction_report, FitResult, TrainConfig};
use cirl_core::Error;

/// Process exit codes by failure category.
pub mod exit {
    pub const OK: u8 = 0;
    pub const USAGE: u8 = 2;
    pub const PARSE: u8 = 3;
    pub const CONFIG: u8 = 4;
    pub const COMPUTE: u8 = 5;
    pub const IO: u8 = 6;
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Parse { .. } | Error::Json(_) => exit::PARSE,
        Error::InvalidConfig(_) | Error::InvalidParameter(_) | Error::InvalidSpec(_) | Error::InvalidInput(_) => {
            exit::CONFIG
        }
        Error::Io(_) => exit::IO,
        Error::Replica { source, .. } => exit_code(source),
        Error::NonFiniteLoss { .. } | Error::Grad(_) | Error::OutOfContext { .. } | Error::Index { .. } => {
            exit::COMPUTE
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "cirl",
    version,
    about = "Estimate time-varying reproduction numbers from incidence data"
)]
pub struct Cli {
    /// Suppress progress messages on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic ensemble directory.
    Simulate(SimulateArgs),
    /// Fit CIRL and the EpiEstim baseline over synthetic ensembles and summarise.
    Benchmark(BenchmarkArgs),
    /// Train CIRL on one incidence CSV.
    Fit(FitArgs),
    /// Run the sliding-window baseline on one incidence CSV.
    EstimateBaseline(BaselineArgs),
    /// Project incidence forward with a fitted network.
    Forecast(ForecastArgs),
    /// Compare fitted incidence with every reconstruction target of an ensemble.
    Reconstruct(ReconstructArgs),
}

/// JSON run configuration; every field is optional and flags override it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenarios: Option<Vec<ScenarioConfig>>,
    pub replicas: Option<usize>,
    pub seed_cases: Option<u64>,
    pub base_seed: Option<u64>,
    pub mask: Option<MaskSpec>,
    pub detection_grace: Option<usize>,
    pub gi: Option<GiConfig>,
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    pub epiestim: Option<EpiEstimConfig>,
    pub horizon: Option<usize>,
    pub workers: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Error> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Worker threads for replica-level work (default: all cores).
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    /// Seed for network initialisation.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub smooth_weight: Option<f64>,
    #[arg(long)]
    pub huber_delta: Option<f64>,
    #[arg(long)]
    pub context_len: Option<usize>,
}

impl TrainArgs {
    fn apply(&self, model: &mut ModelConfig, train: &mut TrainConfig) {
        if let Some(v) = self.epochs {
            train.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            train.learning_rate = v;
        }
        if let Some(v) = self.seed {
            train.rng_seed = v;
        }
        if let Some(v) = self.smooth_weight {
            train.smooth_weight = v;
        }
        if let Some(v) = self.huber_delta {
            train.huber_delta = v;
        }
        if let Some(v) = self.context_len {
            model.context_len = v;
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct GiArgs {
    /// Generation-interval mean in days.
    #[arg(long)]
    pub gi_mean: Option<f64>,
    #[arg(long)]
    pub gi_sd: Option<f64>,
    #[arg(long)]
    pub gi_max_lag: Option<usize>,
}

impl GiArgs {
    fn apply(&self, gi: &mut GiConfig) {
        if let Some(v) = self.gi_mean {
            gi.mean_days = v;
        }
        if let Some(v) = self.gi_sd {
            gi.sd_days = v;
        }
        if let Some(v) = self.gi_max_lag {
            gi.max_lag = v;
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct EnsembleArgs {
    /// Scenario preset: single_step, double_step or double_step_masked.
    #[arg(long = "scenario")]
    pub scenarios: Vec<String>,
    #[arg(long)]
    pub replicas: Option<usize>,
    #[arg(long)]
    pub seed_cases: Option<u64>,
    #[arg(long)]
    pub base_seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub ensemble: EnsembleArgs,
    #[command(flatten)]
    pub gi: GiArgs,
}

#[derive(Debug, Clone, Args)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub ensemble: EnsembleArgs,
    #[command(flatten)]
    pub gi: GiArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Score an existing ensemble directory instead of simulating.
    #[arg(long, conflicts_with_all = ["scenarios", "from_manifest"])]
    pub ensemble_dir: Option<PathBuf>,
    /// Rerun exactly the configuration recorded in a benchmark manifest.
    #[arg(long, conflicts_with = "config")]
    pub from_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Incidence CSV with header `t,cases` or `date,cases`.
    #[arg(long, short)]
    pub input: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub gi: GiArgs,
}

#[derive(Debug, Clone, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, short)]
    pub input: PathBuf,
    /// Window length in days.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub prior_shape: Option<f64>,
    #[arg(long)]
    pub prior_scale: Option<f64>,
    #[command(flatten)]
    pub gi: GiArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ForecastArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, short)]
    pub input: PathBuf,
    /// Parameters from a previous `fit`; trains afresh when absent.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Hold out the final `horizon` rows and score the forecast against them.
    #[arg(long)]
    pub holdout: bool,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub gi: GiArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ReconstructArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Ensemble directory written by `simulate`.
    #[arg(long)]
    pub ensemble_dir: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
}

/// Manifest written first into every output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub input: Option<String>,
    pub input_sha256: Option<String>,
    pub config: serde_json::Value,
}

impl CommandManifest {
    fn new(command: &str, input: Option<&Path>, config: &impl Serialize) -> Result<Self, Error> {
        Ok(Self {
            tool: "cirl".into(),
            version: TOOL_VERSION.into(),
            command: command.into(),
            input: input.map(|p| p.display().to_string()),
            input_sha256: input.map(file_sha256).transpose()?,
            config: serde_json::to_value(config)?,
        })
    }

    fn write(&self, dir: &Path) -> Result<(), Error> {
        write_file(
            &dir.join("manifest.json"),
            &(serde_json::to_string_pretty(self)? + "\n"),
        )
    }
}

pub struct Ctx {
    pub quiet: bool,
}

impl Ctx {
    fn say(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }
}

pub fn run(cli: Cli) -> Result<(), Error> {
    let ctx = Ctx { quiet: cli.quiet };
    match cli.command {
        Command::Simulate(a) => simulate(&ctx, a),
        Command::Benchmark(a) => benchmark(&ctx, a),
        Command::Fit(a) => fit_cmd(&ctx, a),
        Command::EstimateBaseline(a) => baseline(&ctx, a),
        Command::Forecast(a) => forecast_cmd(&ctx, a),
        Command::Reconstruct(a) => reconstruct(&ctx, a),
    }
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, Error> {
    match workers {
        None => Ok(f()),
        Some(0) => Err(Error::InvalidConfig("--workers must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(|pool| pool.install(f))
            .map_err(|e| Error::InvalidConfig(format!("cannot start {n} workers: {e}"))),
    }
}

/// Merge file config and flags into a fully concrete benchmark config.
pub fn resolve_benchmark(
    file: &RunConfig,
    ens: &EnsembleArgs,
    gi: &GiArgs,
    train: &TrainArgs,
) -> Result<BenchmarkConfig, Error> {
    let mut cfg = BenchmarkConfig::default();
    if let Some(s) = &file.scenarios {
        cfg.scenarios = s.clone();
    }
    if !ens.scenarios.is_empty() {
        cfg.scenarios = ens
            .scenarios
            .iter()
            .map(|n| ScenarioConfig::preset(n))
            .collect::<Result<_, _>>()?;
    }
    if let Some(m) = file.mask {
        for s in cfg.scenarios.iter_mut().filter(|s| s.mask.is_some()) {
            s.mask = Some(m);
        }
    }
    cfg.replicas = ens.replicas.or(file.replicas).unwrap_or(cfg.replicas);
    cfg.seed_cases = ens.seed_cases.or(file.seed_cases).unwrap_or(cfg.seed_cases);
    cfg.base_seed = ens.base_seed.or(file.base_seed).unwrap_or(cfg.base_seed);
    cfg.detection_grace = file.detection_grace.unwrap_or(cfg.detection_grace);
    cfg.gi = file.gi.clone().unwrap_or_default();
    gi.apply(&mut cfg.gi);
    cfg.model = file.model.clone().unwrap_or_default();
    cfg.train = file.train.clone().unwrap_or_default();
    train.apply(&mut cfg.model, &mut cfg.train);
    cfg.epiestim = file.epiestim.clone().unwrap_or_default();
    cfg.validate()?;
    Ok(cfg)
}

fn simulate(ctx: &Ctx, a: SimulateArgs) -> Result<(), Error> {
    let file = RunConfig::load(a.common.config.as_deref())?;
    let cfg = resolve_benchmark(&file, &a.ensemble, &a.gi, &TrainArgs::default())?;
    let out = &a.common.out;
    let single = cfg.scenarios.len() == 1;
    let manifest = RunManifest {
        command: "simulate".into(),
        ..RunManifest::benchmark(cfg.clone())
    };
    write_file(
        &out.join("run.json"),
        &(serde_json::to_string_pretty(&manifest)? + "\n"),
    )?;
    with_workers(a.common.workers.or(file.workers), || -> Result<(), Error> {
        for s in &cfg.scenarios {
            let ens = simulate_scenario(s, &cfg)?;
            let dir = if single { out.clone() } else { out.join(&s.name) };
            write_ensemble(&dir, &ens)?;
            ctx.say(&format!(
                "{}: {} replicas -> {}",
                s.name,
                ens.replicas.len(),
                dir.display()
            ));
        }
        Ok(())
    })?
}

fn benchmark(ctx: &Ctx, a: BenchmarkArgs) -> Result<(), Error> {
    let file = RunConfig::load(a.common.config.as_deref())?;
    let workers = a.common.workers.or(file.workers);
    let progress = |m: &str| ctx.say(m);
    let out = &a.common.out;

    let (cfg, ensemble) = if let Some(path) = &a.from_manifest {
        (RunManifest::load(path)?.config, None)
    } else if let Some(dir) = &a.ensemble_dir {
        let ens = read_ensemble(dir)?;
        let mut cfg = resolve_benchmark(&file, &EnsembleArgs::default(), &a.gi, &a.train)?;
        let preset = ScenarioConfig::PRESETS
            .iter()
            .filter_map(|n| ScenarioConfig::preset(n).ok())
            .find(|p| p.profile == ens.spec && p.mask == ens.mask);
        let name = preset
            .map(|p| p.name)
            .or_else(|| {
                dir.file_name()
                    .map(|n| {
                        n.to_string_lossy()
                            .replace(|c: char| !c.is_ascii_alphanumeric() && c != '-', "_")
                    })
                    .filter(|n| !n.is_empty())
            })
            .unwrap_or_else(|| "ensemble".into());
        cfg.scenarios = vec![ScenarioConfig {
            name,
            profile: ens.spec.clone(),
            mask: ens.mask,
        }];
        cfg.replicas = ens.replicas.len();
        cfg.seed_cases = ens.seed_cases;
        cfg.base_seed = ens.base_seed;
        cfg.gi = GiConfig {
            mean_days: ens.gi.mean_days(),
            sd_days: ens.gi.sd_days(),
            max_lag: ens.gi.max_lag(),
        };
        cfg.validate()?;
        // the manifest must be able to regenerate what was scored
        if simulate_scenario(&cfg.scenarios[0], &cfg)? != ens {
            return Err(Error::InvalidInput(format!(
                "{} does not match a regeneration from its own manifest; it may have been edited",
                dir.display()
            )));
        }
        (cfg, Some(ens))
    } else {
        (resolve_benchmark(&file, &a.ensemble, &a.gi, &a.train)?, None)
    };
    cfg.validate()?;

    let outcomes = with_workers(workers, || match ensemble {
        Some(ens) => run_on_ensemble(&cfg.scenarios[0], ens, &cfg, &progress).map(|o| vec![o]),
        None => run_benchmark(&cfg, &progress),
    })??;
    let bundle = write_report(out, &RunManifest::benchmark(cfg), &outcomes)?;
    let table = std::fs::read_to_string(&bundle.summary_txt)?;
    if !ctx.quiet {
        print!("{table}");
    }
    ctx.say(&format!("report written to {}", out.display()));
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct FitSettings<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    gi: &'a GiConfig,
}

fn resolve_fit(
    file: &RunConfig,
    train: &TrainArgs,
    gi: &GiArgs,
) -> Result<(ModelConfig, TrainConfig, GiConfig), Error> {
    let mut model = file.model.clone().unwrap_or_default();
    let mut tcfg = file.train.clone().unwrap_or_default();
    let mut gcfg = file.gi.clone().unwrap_or_default();
    train.apply(&mut model, &mut tcfg);
    gi.apply(&mut gcfg);
    model.validate()?;
    tcfg.validate()?;
    gcfg.build()?;
    Ok((model, tcfg, gcfg))
}

fn train_on(
    ctx: &Ctx,
    table: &IncidenceTable,
    model: &ModelConfig,
    tcfg: &TrainConfig,
    gi: &GiConfig,
) -> Result<FitResult, Error> {
    let every = (tcfg.epochs / 10).max(1);
    fit_with_progress(&table.series, &gi.build()?, model, tcfg, |e, l| {
        if (e + 1) % every == 0 || e + 1 == tcfg.epochs {
            ctx.say(&format!("epoch {}/{}: loss {l:.5}", e + 1, tcfg.epochs));
        }
    })
}

fn write_fit_outputs(out: &Path, table: &IncidenceTable, fit: &FitResult) -> Result<(), Error> {
    write_file(&out.join("fit.csv"), &fit_csv(table, fit))?;
    write_file(&out.join("params.json"), &fit.params.to_json()?)?;
    let mut loss = String::from("epoch,loss\n");
    for (e, l) in fit.loss_history.iter().enumerate() {
        loss.push_str(&format!("{e},{l}\n"));
    }
    write_file(&out.join("loss.csv"), &loss)?;

    let n = table.series.len();
    let days = || (0..n).map(|t| table.series.day(t));
    let observed: Vec<Option<f64>> = table.series.counts().iter().map(|&c| Some(c as f64)).collect();
    let lambda: Vec<Option<f64>> = (0..n)
        .map(|t| t.checked_sub(fit.first).and_then(|i| fit.lambda_hat.get(i).copied()))
        .collect();
    let figures = [
        (
            "fit_rt",
            Figure {
                title: "Estimated R_t".into(),
                y_label: "R_t".into(),
                series: vec![PlotSeries::line("cirl", days(), &fit.aligned_rt(n))],
                reference: Some(1.0),
            },
        ),
        (
            "fit_incidence",
            Figure {
                title: "Observed and fitted incidence".into(),
                y_label: "cases".into(),
                series: vec![
                    PlotSeries::line("observed", days(), &observed),
                    PlotSeries::line("cirl", days(), &lambda),
                ],
                reference: None,
            },
        ),
    ];
    for (name, fig) in figures {
        write_file(&out.join("plots").join(format!("{name}.csv")), &fig.to_csv())?;
        write_file(&out.join("plots").join(format!("{name}.svg")), &fig.to_svg())?;
    }
    Ok(())
}

fn fit_cmd(ctx: &Ctx, a: FitArgs) -> Result<(), Error> {
    let file = RunConfig::load(a.common.config.as_deref())?;
    let (model, tcfg, gi) = resolve_fit(&file, &a.train, &a.gi)?;
    let table = parse_incidence_csv(&a.input)?;
    let out = &a.common.out;
    CommandManifest::new(
        "fit",
        Some(&a.input),
        &FitSettings {
            model: &model,
            train: &tcfg,
            gi: &gi,
        },
    )?
    .write(out)?;
    let fit = train_on(ctx, &table, &model, &tcfg, &gi)?;
    write_fit_outputs(out, &table, &fit)?;
    ctx.say(&format!("fit written to {}", out.display()));
    Ok(())
}

fn baseline(ctx: &Ctx, a: BaselineArgs) -> Result<(), Error> {
    let file = RunConfig::load(a.common.config.as_deref())?;
    let mut cfg = file.epiestim.clone().unwrap_or_default();
    if let Some(v) = a.window {
        cfg.window = v;
    }
    if let Some(v) = a.prior_shape {
        cfg.prior_shape = v;
    }
    if let Some(v) = a.prior_scale {
        cfg.prior_scale = v;
    }
    let mut gi = file.gi.clone().unwrap_or_default();
    a.gi.apply(&mut gi);
    cfg.validate()?;
    let table = parse_incidence_csv(&a.input)?;
    let out = &a.common.out;
    #[derive(Serialize)]
    struct Settings<'a> {
        epiestim: &'a EpiEstimConfig,
        gi: &'a GiConfig,
    }
    CommandManifest::new(
        "estimate-baseline",
        Some(&a.input),
        &Settings {
            epiestim: &cfg,
            gi: &gi,
        },
    )?
    .write(out)?;
    let est = epiestim::estimate(&table.series, &gi.build()?, &cfg)?;
    write_file(&out.join("epiestim.csv"), &epiestim_csv(&table, &est))?;
    let fig = Figure {
        title: format!("EpiEstim R_t ({}-day window)", cfg.window),
        y_label: "R_t".into(),
        series: vec![PlotSeries {
            name: "epiestim".into(),
            points: est
                .iter()
                .map(|e| cirl_core::plot::PlotPoint {
                    day: table.series.day(e.position),
                    value: e.mean,
                    q1: e.q025,
                    q3: e.q975,
                })
                .collect(),
        }],
        reference: Some(1.0),
    };
    write_file(&out.join("plots/epiestim_rt.csv"), &fig.to_csv())?;
    write_file(&out.join("plots/epiestim_rt.svg"), &fig.to_svg())?;
    ctx.say(&format!("{} estimates written to {}", est.len(), out.display()));
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastMetrics {
    pub fit: AccuracyReport,
    pub prediction: Option<AccuracyReport>,
}

fn forecast_cmd(ctx: &Ctx, a: ForecastArgs) -> Result<(), Error> {
    let file = RunConfig::load(a.common.config.as_deref())?;
    let (model, tcfg, gi) = resolve_fit(&file, &a.train, &a.gi)?;
    let horizon = a.horizon.or(file.horizon).unwrap_or(10);
    if horizon == 0 {
        return Err(Error::InvalidConfig("--horizon must be at least 1".into()));
    }
    let table = parse_incidence_csv(&a.input)?;
    let n = table.series.len();
    let train_len = if a.holdout {
        n.checked_sub(horizon)
            .filter(|&m| m > 0)
            .ok_or_else(|| Error::InvalidInput(format!("cannot hold out {horizon} rows from a series of {n}")))?
    } else {
        n
    };
    let train_table = IncidenceTable {
        series: table.series.truncated(train_len)?,
        label: table.label,
    };
    let out = &a.common.out;
    #[derive(Serialize)]
    struct Settings<'a> {
        model: &'a ModelConfig,
        train: &'a TrainConfig,
        gi: &'a GiConfig,
        horizon: usize,
        holdout: bool,
        params: Option<String>,
        params_sha256: Option<String>,
    }
    CommandManifest::new(
        "forecast",
        Some(&a.input),
        &Settings {
            model: &model,
            train: &tcfg,
            gi: &gi,
            horizon,
            holdout: a.holdout,
            params: a.params.as_ref().map(|p| p.display().to_string()),
            params_sha256: a.params.as_deref().map(file_sha256).transpose()?,
        },
    )?
    .write(out)?;

    let gen = gi.build()?;
    let (params, fitted_incidence) = match &a.params {
        Some(p) => {
            let params = ModelParams::load(p)?;
            let inf = cirl_core::model::infer_trajectory(&train_table.series, &params)?;
            let infect = infectiousness_profile(&train_table.series.as_f64(), &gen);
            let lam: Vec<Option<f64>> = (0..train_len)
                .map(|t| t.checked_sub(inf.first).map(|i| inf.rt_hat[i] * infect[t]))
                .collect();
            (params, lam)
        }
        None => {
            let fit = train_on(ctx, &train_table, &model, &tcfg, &gi)?;
            write_fit_outputs(out, &train_table, &fit)?;
            let lam = (0..train_len)
                .map(|t| t.checked_sub(fit.first).map(|i| fit.lambda_hat[i]))
                .collect();
            (fit.params, lam)
        }
    };
    let fc = forecast_from_params(&params, &train_table.series, &gen, horizon)?;

    let mut csv = String::from("day,rt_hat,incidence,observed\n");
    for (h, (r, l)) in fc.rt.iter().zip(&fc.incidence).enumerate() {
        let t = train_len + h;
        let day = table.label_of(t);
        let obs = table.series.counts().get(t).map(|c| c.to_string()).unwrap_or_default();
        csv.push_str(&format!("{day},{r},{l},{obs}\n"));
    }
    write_file(&out.join("forecast.csv"), &csv)?;

    let observed = table.series.as_f64();
    let fit_err = incidence_errors(&fitted_incidence, &observed[..train_len], 0..train_len)?;
    let prediction = if a.holdout {
        let pred: Vec<Option<f64>> = fc.incidence.iter().map(|&v| Some(v)).collect();
        Some(incidence_errors(&pred, &observed[train_len..], 0..horizon)?)
    } else {
        None
    };
    let mut metrics = String::from("target,rmse,mae,n\n");
    metrics.push_str(&format!(
        "fitting,{},{},{}\n",
        fit_err.rmse, fit_err.mae, fit_err.n_valid
    ));
    if let Some(p) = &prediction {
        metrics.push_str(&format!("prediction,{},{},{}\n", p.rmse, p.mae, p.n_valid));
    }
    write_file(&out.join("metrics.csv"), &metrics)?;
    if !ctx.quiet {
        println!("{:<12}{:>10}{:>10}", "", "RMSE", "MAE");
        println!("{:<12}{:>10.2}{:>10.2}", "Fitting", fit_err.rmse, fit_err.mae);
        if let Some(p) = &prediction {
            println!("{:<12}{:>10.2}{:>10.2}", "Prediction", p.rmse, p.mae);
        }
    }
    Ok(())
}

fn reconstruct(ctx: &Ctx, a: ReconstructArgs) -> Result<(), Error> {
    let file = RunConfig::load(a.common.config.as_deref())?;
    let (model, tcfg, _) = resolve_fit(&file, &a.train, &GiArgs::default())?;
    let ens = read_ensemble(&a.ensemble_dir)?;
    let out = &a.common.out;
    #[derive(Serialize)]
    struct Settings<'a> {
        ensemble: String,
        model: &'a ModelConfig,
        train: &'a TrainConfig,
    }
    CommandManifest::new(
        "reconstruct",
        None,
        &Settings {
            ensemble: a.ensemble_dir.display().to_string(),
            model: &model,
            train: &tcfg,
        },
    )?
    .write(out)?;
    let total = ens.replicas.len();
    let reports = with_workers(a.common.workers.or(file.workers), || {
        use rayon::prelude::*;
        ens.replicas
            .par_iter()
            .enumerate()
            .map(|(i, r)| {
                let wrap = |e| Error::Replica {
                    scenario: "ensemble".into(),
                    replica: i,
                    source: Box::new(e),
                };
                let f = cirl_core::train::fit(&r.observed_incidence, &ens.gi, &model, &tcfg).map_err(wrap)?;
                let rep = reconstruction_report(&f, r, &ens.gi).map_err(wrap)?;
                ctx.say(&format!("replica {}/{total} done", i + 1));
                Ok(rep)
            })
            .collect::<Result<Vec<_>, Error>>()
    })??;

    let mut per = String::from("replica,target,rmse,mae,n_valid\n");
    let mut table = String::from("target,rmse_median,rmse_q1,rmse_q3,mae_median,mae_q1,mae_q3\n");
    let mut text = format!("{:<16}{:>28}{:>28}\n", "target", "RMSE", "MAE");
    type Target = fn(&cirl_core::train::ReconstructionReport) -> &AccuracyReport;
    let targets: [(&str, Target); 4] = [
        ("lambda_true", |r| &r.lambda_true),
        ("observed", |r| &r.observed),
        ("raw", |r| &r.raw),
        ("lambda_renewal", |r| &r.lambda_renewal),
    ];
    for (name, get) in targets {
        for (i, r) in reports.iter().enumerate() {
            let a = get(r);
            per.push_str(&format!("{i},{name},{},{},{}\n", a.rmse, a.mae, a.n_valid));
        }
        let rmse = summarize(&reports.iter().map(|r| Some(get(r).rmse)).collect::<Vec<_>>(), &[]);
        let mae = summarize(&reports.iter().map(|r| Some(get(r).mae)).collect::<Vec<_>>(), &[]);
        table.push_str(&format!(
            "{name},{},{},{},{},{},{}\n",
            opt(rmse.median),
            opt(rmse.q1),
            opt(rmse.q3),
            opt(mae.median),
            opt(mae.q1),
            opt(mae.q3)
        ));
        let cell = |s: &cirl_core::metrics::EnsembleSummary| {
            format!(
                "{:.2} [{:.2}, {:.2}]",
                s.median.unwrap_or(f64::NAN),
                s.q1.unwrap_or(f64::NAN),
                s.q3.unwrap_or(f64::NAN)
            )
        };
        text.push_str(&format!("{name:<16}{:>28}{:>28}\n", cell(&rmse), cell(&mae)));
    }
    write_file(&out.join("reconstruction_replicas.csv"), &per)?;
    write_file(&out.join("reconstruction.csv"), &table)?;
    write_file(&out.join("reconstruction.txt"), &text)?;
    if !ctx.quiet {
        print!("{text}");
    }
    Ok(())
}
