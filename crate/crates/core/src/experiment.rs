//! Benchmark orchestration: simulate, fit both estimators, score, report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::epiestim::{self, EpiEstimConfig};
use crate::error::{Error, Result};
use crate::io::{opt, write_ensemble, write_file};
use crate::metrics::{
    accuracy, detect_changes, summarize, AccuracyReport, DetectionReport, Direction, EnsembleSummary,
};
use crate::model::ModelConfig;
use crate::plot::{Figure, PlotSeries};
use crate::renewal::{infectiousness_profile, GenerationInterval};
use crate::synth::{generate_ensemble, MaskSpec, ScenarioEnsemble, ScenarioReplica, StepProfileSpec};
use crate::train::{fit, reconstruction_report, ReconstructionReport, TrainConfig};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GiConfig {
    pub mean_days: f64,
    pub sd_days: f64,
    pub max_lag: usize,
}

impl Default for GiConfig {
    fn default() -> Self {
        Self {
            mean_days: 8.0,
            sd_days: 3.0,
            max_lag: 30,
        }
    }
}

impl GiConfig {
    pub fn build(&self) -> Result<GenerationInterval> {
        GenerationInterval::discretize(self.mean_days, self.sd_days, self.max_lag)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub profile: StepProfileSpec,
    #[serde(default)]
    pub mask: Option<MaskSpec>,
}

impl ScenarioConfig {
    pub const PRESETS: [&'static str; 3] = ["single_step", "double_step", "double_step_masked"];

    pub fn preset(name: &str) -> Result<Self> {
        let (profile, mask) = match name.replace('-', "_").as_str() {
            "single_step" => (StepProfileSpec::single_step(), None),
            "double_step" => (StepProfileSpec::double_step(), None),
            "double_step_masked" => (StepProfileSpec::double_step(), Some(MaskSpec::default())),
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "unknown scenario {name:?}; expected one of {}",
                    Self::PRESETS.join(", ")
                )))
            }
        };
        Ok(Self {
            name: name.replace('-', "_"),
            profile,
            mask,
        })
    }

    /// Change positions with the direction of each jump.
    pub fn changes(&self) -> Vec<(usize, Direction)> {
        let pos = self.profile.change_positions();
        pos.iter()
            .enumerate()
            .map(|(k, &p)| {
                (
                    p,
                    Direction::from_levels(self.profile.levels[k], self.profile.levels[k + 1]),
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub scenarios: Vec<ScenarioConfig>,
    pub replicas: usize,
    pub seed_cases: u64,
    pub base_seed: u64,
    pub gi: GiConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epiestim: EpiEstimConfig,
    /// Days the detection scope extends past the next change point.
    pub detection_grace: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            scenarios: ScenarioConfig::PRESETS
                .iter()
                .map(|n| ScenarioConfig::preset(n).expect("preset"))
                .collect(),
            replicas: 20,
            seed_cases: 2,
            base_seed: 0,
            gi: GiConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            epiestim: EpiEstimConfig::default(),
            detection_grace: 0,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicas == 0 {
            return Err(Error::InvalidConfig("replicas must be at least 1".into()));
        }
        if self.scenarios.is_empty() {
            return Err(Error::InvalidConfig("no scenarios selected".into()));
        }
        for (i, s) in self.scenarios.iter().enumerate() {
            let ok = !s.name.is_empty()
                && s.name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !ok {
                return Err(Error::InvalidConfig(format!(
                    "scenario name {:?} must be non-empty ASCII letters, digits, '_' or '-'",
                    s.name
                )));
            }
            if self.scenarios[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::InvalidConfig(format!("duplicate scenario name {:?}", s.name)));
            }
            s.profile.validate()?;
            if let Some(m) = &s.mask {
                m.validate()?;
            }
        }
        self.gi.build()?;
        self.model.validate()?;
        self.train.validate()?;
        self.epiestim.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cirl,
    EpiEstim,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::Cirl, Method::EpiEstim];

    pub fn name(self) -> &'static str {
        match self {
            Method::Cirl => "cirl",
            Method::EpiEstim => "epiestim",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutcome {
    pub rt: Vec<Option<f64>>,
    /// Implied expected incidence `R̂_t Λ_t`.
    pub incidence: Vec<Option<f64>>,
    pub accuracy: AccuracyReport,
    pub detections: Vec<DetectionReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaOutcome {
    pub index: usize,
    pub rng_seed: u64,
    pub cirl: MethodOutcome,
    pub epiestim: MethodOutcome,
    pub reconstruction: ReconstructionReport,
    pub final_loss: f64,
}

impl ReplicaOutcome {
    pub fn method(&self, m: Method) -> &MethodOutcome {
        match m {
            Method::Cirl => &self.cirl,
            Method::EpiEstim => &self.epiestim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub scenario: String,
    pub method: Method,
    /// Delay at the first change point; `mdr` is its missed-detection rate.
    pub delay: EnsembleSummary,
    pub rmse: EnsembleSummary,
    pub mae: EnsembleSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOutcome {
    pub config: ScenarioConfig,
    pub ensemble: ScenarioEnsemble,
    pub replicas: Vec<ReplicaOutcome>,
}

impl ScenarioOutcome {
    pub fn summary(&self, m: Method) -> SummaryRow {
        let first = |r: &ReplicaOutcome| r.method(m).detections.first().cloned();
        let delays: Vec<Option<f64>> = self
            .replicas
            .iter()
            .map(|r| first(r).and_then(|d| d.delay).map(|d| d as f64))
            .collect();
        let missed: Vec<bool> = self
            .replicas
            .iter()
            .map(|r| first(r).is_some_and(|d| d.missed))
            .collect();
        let acc = |f: fn(&AccuracyReport) -> f64| -> Vec<Option<f64>> {
            self.replicas
                .iter()
                .map(|r| {
                    let a = &r.method(m).accuracy;
                    (a.n_valid > 0).then(|| f(a))
                })
                .collect()
        };
        SummaryRow {
            scenario: self.config.name.clone(),
            method: m,
            delay: summarize(&delays, &missed),
            rmse: summarize(&acc(|a| a.rmse), &[]),
            mae: summarize(&acc(|a| a.mae), &[]),
        }
    }
}

fn score(
    rt: Vec<Option<f64>>,
    infect: &[f64],
    truth: &[Option<f64>],
    changes: &[(usize, Direction)],
    valid_from: usize,
    grace: usize,
) -> Result<MethodOutcome> {
    let incidence = rt.iter().zip(infect).map(|(r, l)| r.map(|r| r * l)).collect();
    Ok(MethodOutcome {
        accuracy: accuracy(&rt, truth, valid_from)?,
        detections: detect_changes(&rt, changes, grace),
        incidence,
        rt,
    })
}

/// Fit CIRL and the baseline on one replica's observed series and score both.
pub fn evaluate_replica(
    replica: &ScenarioReplica,
    index: usize,
    scenario: &ScenarioConfig,
    gi: &GenerationInterval,
    cfg: &BenchmarkConfig,
) -> Result<ReplicaOutcome> {
    let obs = &replica.observed_incidence;
    let n = obs.len();
    let truth: Vec<Option<f64>> = replica.true_rt.values().iter().map(|&r| Some(r)).collect();
    let infect = infectiousness_profile(&obs.as_f64(), gi);
    let changes = scenario.changes();
    let valid_from = cfg.model.context_len;

    let fitted = fit(obs, gi, &cfg.model, &cfg.train)?;
    let cirl = score(
        fitted.aligned_rt(n),
        &infect,
        &truth,
        &changes,
        valid_from,
        cfg.detection_grace,
    )?;
    let est = epiestim::estimate(obs, gi, &cfg.epiestim)?;
    let baseline = score(
        epiestim::aligned_means(&est, n),
        &infect,
        &truth,
        &changes,
        valid_from,
        cfg.detection_grace,
    )?;
    Ok(ReplicaOutcome {
        index,
        rng_seed: replica.rng_seed,
        reconstruction: reconstruction_report(&fitted, replica, gi)?,
        final_loss: fitted.loss_history.last().copied().unwrap_or(f64::NAN),
        cirl,
        epiestim: baseline,
    })
}

pub type Progress<'a> = &'a (dyn Fn(&str) + Sync);

/// Score every replica of an existing ensemble.
pub fn run_on_ensemble(
    scenario: &ScenarioConfig,
    ensemble: ScenarioEnsemble,
    cfg: &BenchmarkConfig,
    progress: Progress,
) -> Result<ScenarioOutcome> {
    let gi = &ensemble.gi;
    let total = ensemble.replicas.len();
    let replicas = ensemble
        .replicas
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let out = evaluate_replica(r, i, scenario, gi, cfg).map_err(|e| Error::Replica {
                scenario: scenario.name.clone(),
                replica: i,
                source: Box::new(e),
            })?;
            progress(&format!(
                "{}: replica {}/{total} (seed {}) done, final loss {:.4}",
                scenario.name,
                i + 1,
                r.rng_seed,
                out.final_loss
            ));
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScenarioOutcome {
        config: scenario.clone(),
        ensemble,
        replicas,
    })
}

pub fn simulate_scenario(scenario: &ScenarioConfig, cfg: &BenchmarkConfig) -> Result<ScenarioEnsemble> {
    generate_ensemble(
        &scenario.profile,
        &cfg.gi.build()?,
        cfg.replicas,
        cfg.seed_cases,
        scenario.mask,
        cfg.base_seed,
    )
}

pub fn run_benchmark(cfg: &BenchmarkConfig, progress: Progress) -> Result<Vec<ScenarioOutcome>> {
    cfg.validate()?;
    cfg.scenarios
        .iter()
        .map(|s| run_on_ensemble(s, simulate_scenario(s, cfg)?, cfg, progress))
        .collect()
}

/// Everything needed to rerun a benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: BenchmarkConfig,
}

impl RunManifest {
    pub fn benchmark(config: BenchmarkConfig) -> Self {
        Self {
            tool: "cirl".into(),
            version: TOOL_VERSION.into(),
            command: "benchmark".into(),
            config,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.command != "benchmark" {
            return Err(Error::InvalidConfig(format!(
                "{} records a `{}` run, not a benchmark",
                path.display(),
                m.command
            )));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub manifest: PathBuf,
    pub summary_csv: PathBuf,
    pub summary_txt: PathBuf,
    pub replica_csvs: Vec<PathBuf>,
    pub plot_files: Vec<PathBuf>,
}

pub const SUMMARY_HEADER: &str = "scenario,method,n_replicas,delay_median,delay_q1,delay_q3,mdr,\
rmse_median,rmse_q1,rmse_q3,mae_median,mae_q1,mae_q3";

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.scenario,
            r.method.name(),
            r.delay.n_replicas,
            opt(r.delay.median),
            opt(r.delay.q1),
            opt(r.delay.q3),
            r.delay.mdr,
            opt(r.rmse.median),
            opt(r.rmse.q1),
            opt(r.rmse.q3),
            opt(r.mae.median),
            opt(r.mae.q1),
            opt(r.mae.q3),
        );
    }
    out
}

fn cell(s: &EnsembleSummary) -> String {
    match (s.median, s.q1, s.q3) {
        (Some(m), Some(a), Some(b)) => format!("{m:.2} [{a:.2}, {b:.2}]"),
        _ => "-".into(),
    }
}

/// Aligned plain-text table, one row per scenario and method.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let header = ["scenario", "method", "delay", "MDR", "RMSE", "MAE"].map(String::from);
    let body: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.scenario.clone(),
                r.method.name().to_string(),
                cell(&r.delay),
                format!("{:.2}", r.delay.mdr),
                cell(&r.rmse),
                cell(&r.mae),
            ]
        })
        .collect();
    let mut width = header.clone().map(|h| h.len());
    for row in &body {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    for row in std::iter::once(&header).chain(&body) {
        let cells: Vec<String> = row.iter().zip(width).map(|(c, w)| format!("{c:<w$}")).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn replicas_csv(s: &ScenarioOutcome) -> String {
    let mut out = String::from("replica,rng_seed,method,rmse,mae,n_valid,change,true_cp,detected_cp,delay,missed\n");
    for r in &s.replicas {
        for m in Method::ALL {
            let o = r.method(m);
            for (k, d) in o.detections.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{k},{},{},{},{}",
                    r.index,
                    r.rng_seed,
                    m.name(),
                    o.accuracy.rmse,
                    o.accuracy.mae,
                    o.accuracy.n_valid,
                    d.true_cp,
                    d.detected_cp.map(|c| c.to_string()).unwrap_or_default(),
                    d.delay.map(|c| c.to_string()).unwrap_or_default(),
                    u8::from(d.missed),
                );
            }
        }
    }
    out
}

fn trajectories_csv(s: &ScenarioOutcome) -> String {
    let mut out = String::from("replica,day,true_rt,observed,cirl_rt,epiestim_rt,cirl_incidence,epiestim_incidence\n");
    for (r, rep) in s.replicas.iter().zip(&s.ensemble.replicas) {
        let obs = &rep.observed_incidence;
        for t in 0..obs.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.index,
                obs.day(t),
                rep.true_rt.values()[t],
                obs.counts()[t],
                opt(r.cirl.rt[t]),
                opt(r.epiestim.rt[t]),
                opt(r.cirl.incidence[t]),
                opt(r.epiestim.incidence[t]),
            );
        }
    }
    out
}

fn reconstruction_csv(s: &ScenarioOutcome) -> String {
    let mut out = String::from("replica,target,rmse,mae,n_valid\n");
    for r in &s.replicas {
        let rep = &r.reconstruction;
        for (name, a) in [
            ("lambda_true", &rep.lambda_true),
            ("observed", &rep.observed),
            ("raw", &rep.raw),
            ("lambda_renewal", &rep.lambda_renewal),
        ] {
            let _ = writeln!(out, "{},{name},{},{},{}", r.index, a.rmse, a.mae, a.n_valid);
        }
    }
    out
}

/// Per-scenario figures: R_t bands and incidence-fit bands.
pub fn scenario_figures(s: &ScenarioOutcome) -> Vec<(String, Figure)> {
    let Some(first) = s.ensemble.replicas.first() else {
        return vec![];
    };
    let n = first.observed_incidence.len();
    let days = || (0..n).map(|t| first.observed_incidence.day(t));
    let truth: Vec<Option<f64>> = first.true_rt.values().iter().map(|&v| Some(v)).collect();
    let collect = |f: &dyn Fn(&ReplicaOutcome) -> &Vec<Option<f64>>| -> Vec<Vec<Option<f64>>> {
        s.replicas.iter().map(|r| f(r).clone()).collect()
    };
    let observed: Vec<Vec<Option<f64>>> = s
        .ensemble
        .replicas
        .iter()
        .map(|r| r.observed_incidence.counts().iter().map(|&c| Some(c as f64)).collect())
        .collect();
    let lambda_true: Vec<Vec<Option<f64>>> = s
        .ensemble
        .replicas
        .iter()
        .map(|r| r.lambda_true.values().iter().map(|&c| Some(c)).collect())
        .collect();
    vec![
        (
            format!("{}_rt", s.config.name),
            Figure {
                title: format!("{}: R_t, median and IQR across replicas", s.config.name),
                y_label: "R_t".into(),
                series: vec![
                    PlotSeries::line("true_rt", days(), &truth),
                    PlotSeries::band("cirl", days(), &collect(&|r| &r.cirl.rt)),
                    PlotSeries::band("epiestim", days(), &collect(&|r| &r.epiestim.rt)),
                ],
                reference: Some(1.0),
            },
        ),
        (
            format!("{}_incidence", s.config.name),
            Figure {
                title: format!("{}: incidence fit, median and IQR across replicas", s.config.name),
                y_label: "cases".into(),
                series: vec![
                    PlotSeries::band("observed", days(), &observed),
                    PlotSeries::band("lambda_true", days(), &lambda_true),
                    PlotSeries::band("cirl", days(), &collect(&|r| &r.cirl.incidence)),
                    PlotSeries::band("epiestim", days(), &collect(&|r| &r.epiestim.incidence)),
                ],
                reference: None,
            },
        ),
    ]
}

/// Write the manifest first, then per-scenario artifacts, plots and the summary.
pub fn write_report(out: &Path, manifest: &RunManifest, outcomes: &[ScenarioOutcome]) -> Result<ReportBundle> {
    let manifest_path = out.join("manifest.json");
    write_file(&manifest_path, &(serde_json::to_string_pretty(manifest)? + "\n"))?;
    let mut replica_csvs = vec![];
    let mut plot_files = vec![];
    let mut rows = vec![];
    for s in outcomes {
        let dir = out.join(&s.config.name);
        write_ensemble(&dir.join("ensemble"), &s.ensemble)?;
        for (file, body) in [
            ("replicas.csv", replicas_csv(s)),
            ("trajectories.csv", trajectories_csv(s)),
            ("reconstruction.csv", reconstruction_csv(s)),
        ] {
            let p = dir.join(file);
            write_file(&p, &body)?;
            replica_csvs.push(p);
        }
        for (name, fig) in scenario_figures(s) {
            for (ext, body) in [("csv", fig.to_csv()), ("svg", fig.to_svg())] {
                let p = out.join("plots").join(format!("{name}.{ext}"));
                write_file(&p, &body)?;
                plot_files.push(p);
            }
        }
        rows.extend(Method::ALL.map(|m| s.summary(m)));
    }
    let summary_csv_path = out.join("summary.csv");
    let summary_txt_path = out.join("summary.txt");
    write_file(&summary_csv_path, &summary_csv(&rows))?;
    write_file(&summary_txt_path, &summary_table(&rows))?;
    Ok(ReportBundle {
        manifest: manifest_path,
        summary_csv: summary_csv_path,
        summary_txt: summary_txt_path,
        replica_csvs,
        plot_files,
    })
}
