//! CSV and directory formats.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::epiestim::PosteriorEstimate;
use crate::error::{Error, Result};
use crate::renewal::{GenerationInterval, IncidenceSeries, RenewalIntensity, RtTrajectory};
use crate::synth::{MaskSpec, ScenarioEnsemble, ScenarioReplica, StepProfileSpec};
use crate::train::FitResult;

/// How rows of an incidence file are labelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DayLabel {
    Index,
    /// Calendar date of position 0.
    Date(NaiveDate),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IncidenceTable {
    pub series: IncidenceSeries,
    pub label: DayLabel,
}

impl IncidenceTable {
    pub fn label_of(&self, t: usize) -> String {
        match self.label {
            DayLabel::Index => self.series.day(t).to_string(),
            DayLabel::Date(d) => (d + chrono::Days::new(t as u64)).to_string(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(match self.label {
            DayLabel::Index => "t,cases\n",
            DayLabel::Date(_) => "date,cases\n",
        });
        for (t, c) in self.series.counts().iter().enumerate() {
            let _ = writeln!(out, "{},{c}", self.label_of(t));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_csv())
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_count(field: &str, line: usize) -> Result<u64> {
    if let Ok(v) = field.parse::<u64>() {
        return Ok(v);
    }
    match field.parse::<f64>() {
        Ok(v) if v < 0.0 => Err(parse_err(line, format!("negative count {field}"))),
        Ok(_) => Err(parse_err(line, format!("non-integer count {field}"))),
        Err(_) if field.starts_with('-') && field[1..].parse::<u64>().is_ok() => {
            Err(parse_err(line, format!("negative count {field}")))
        }
        Err(_) => Err(parse_err(line, format!("malformed count {field:?}"))),
    }
}

/// Parse `t,cases` (consecutive integer days) or `date,cases`
/// (consecutive ISO dates). Errors name the 1-based line.
pub fn parse_incidence_csv_str(text: &str) -> Result<IncidenceTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| parse_err(1, e.to_string()))?,
        None => return Err(parse_err(1, "empty file")),
    };
    let dated = match (header.get(0), header.get(1), header.len()) {
        (Some("t"), Some("cases"), 2) => false,
        (Some("date"), Some("cases"), 2) => true,
        _ => return Err(parse_err(1, "header must be `t,cases` or `date,cases`")),
    };

    let mut counts = Vec::new();
    let mut first_day = 0i64;
    let mut first_date = None;
    let mut prev_day: Option<i64> = None;
    let mut prev_date: Option<NaiveDate> = None;
    for rec in records {
        let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() == 1 && rec.get(0) == Some("") {
            continue;
        }
        if rec.len() != 2 {
            return Err(parse_err(line, format!("expected 2 fields, found {}", rec.len())));
        }
        let key = &rec[0];
        if dated {
            let d = NaiveDate::parse_from_str(key, "%Y-%m-%d")
                .map_err(|_| parse_err(line, format!("malformed date {key:?}")))?;
            match prev_date {
                None => first_date = Some(d),
                Some(p) if p.succ_opt() == Some(d) => {}
                Some(p) => return Err(parse_err(line, format!("date {d} does not follow {p}"))),
            }
            prev_date = Some(d);
        } else {
            let d: i64 = key
                .parse()
                .map_err(|_| parse_err(line, format!("malformed day {key:?}")))?;
            match prev_day {
                None => first_day = d,
                Some(p) if p + 1 == d => {}
                Some(p) => return Err(parse_err(line, format!("day {d} does not follow {p}"))),
            }
            prev_day = Some(d);
        }
        counts.push(parse_count(&rec[1], line)?);
    }
    if counts.is_empty() {
        return Err(parse_err(2, "no data rows"));
    }
    let (start, label) = match first_date {
        Some(d) => (1, DayLabel::Date(d)),
        None => (first_day, DayLabel::Index),
    };
    Ok(IncidenceTable {
        series: IncidenceSeries::new(counts, start)?,
        label,
    })
}

pub fn parse_incidence_csv(path: &Path) -> Result<IncidenceTable> {
    let text = fs::read_to_string(path).map_err(|e| io_context(e, path))?;
    parse_incidence_csv_str(&text)
}

fn io_context(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| io_context(e, parent))?;
        }
    }
    fs::write(path, contents).map_err(|e| io_context(e, path))
}

/// Lowercase hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| io_context(e, path))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Empty string for `None`.
pub fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleManifest {
    pub spec: StepProfileSpec,
    pub mask: Option<MaskSpec>,
    pub gi: GenerationInterval,
    pub seed_cases: u64,
    pub base_seed: u64,
    pub replicas: Vec<ReplicaEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicaEntry {
    pub file: String,
    pub rng_seed: u64,
}

pub const REPLICA_HEADER: &str = "day,true_rt,lambda_true,raw,observed,masked_flag";

pub fn replica_csv(r: &ScenarioReplica) -> String {
    let mut out = format!("{REPLICA_HEADER}\n");
    let raw = r.raw_incidence.counts();
    let obs = r.observed_incidence.counts();
    for t in 0..raw.len() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.raw_incidence.day(t),
            r.true_rt.values()[t],
            r.lambda_true.values()[t],
            raw[t],
            obs[t],
            u8::from(r.mask_indicator[t])
        );
    }
    out
}

fn parse_replica_csv(text: &str, rng_seed: u64) -> Result<ScenarioReplica> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(REPLICA_HEADER) {
        return Err(parse_err(1, format!("header must be `{REPLICA_HEADER}`")));
    }
    let (mut rt, mut lam, mut raw, mut obs, mut mask) = (vec![], vec![], vec![], vec![], vec![]);
    let mut start = None;
    for (i, row) in lines.enumerate() {
        let line = i + 2;
        if row.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = row.split(',').map(str::trim).collect();
        if f.len() != 6 {
            return Err(parse_err(line, format!("expected 6 fields, found {}", f.len())));
        }
        let real = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| parse_err(line, format!("malformed number {s:?}")))
        };
        let day: i64 = f[0].parse().map_err(|_| parse_err(line, "malformed day"))?;
        start.get_or_insert(day);
        rt.push(real(f[1])?);
        lam.push(real(f[2])?);
        raw.push(parse_count(f[3], line)?);
        obs.push(parse_count(f[4], line)?);
        mask.push(match f[5] {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(line, format!("masked_flag must be 0 or 1, got {other:?}"))),
        });
    }
    let start = start.ok_or_else(|| parse_err(2, "no data rows"))?;
    Ok(ScenarioReplica {
        true_rt: RtTrajectory::new(rt)?,
        lambda_true: RenewalIntensity::new(lam)?,
        raw_incidence: IncidenceSeries::new(raw, start)?,
        observed_incidence: IncidenceSeries::new(obs, start)?,
        mask_indicator: mask,
        rng_seed,
    })
}

/// `manifest.json` plus `replica_NNN.csv` per replica.
pub fn write_ensemble(dir: &Path, ens: &ScenarioEnsemble) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| io_context(e, dir))?;
    let mut entries = Vec::with_capacity(ens.replicas.len());
    let mut paths = Vec::with_capacity(ens.replicas.len() + 1);
    let manifest_path = dir.join("manifest.json");
    paths.push(manifest_path.clone());
    for (i, r) in ens.replicas.iter().enumerate() {
        let file = format!("replica_{i:03}.csv");
        let path = dir.join(&file);
        write_file(&path, &replica_csv(r))?;
        paths.push(path);
        entries.push(ReplicaEntry {
            file,
            rng_seed: r.rng_seed,
        });
    }
    let manifest = EnsembleManifest {
        spec: ens.spec.clone(),
        mask: ens.mask,
        gi: ens.gi.clone(),
        seed_cases: ens.seed_cases,
        base_seed: ens.base_seed,
        replicas: entries,
    };
    write_file(&manifest_path, &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    Ok(paths)
}

pub fn read_ensemble(dir: &Path) -> Result<ScenarioEnsemble> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| io_context(e, &mpath))?;
    let m: EnsembleManifest = serde_json::from_str(&text)?;
    let replicas = m
        .replicas
        .iter()
        .map(|e| {
            let path = dir.join(&e.file);
            let text = fs::read_to_string(&path).map_err(|err| io_context(err, &path))?;
            parse_replica_csv(&text, e.rng_seed).map_err(|err| match err {
                Error::Parse { line, message } => Error::Parse {
                    line,
                    message: format!("{}: {message}", path.display()),
                },
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if replicas.is_empty() {
        return Err(Error::InvalidInput(format!("{} lists no replicas", mpath.display())));
    }
    Ok(ScenarioEnsemble {
        replicas,
        spec: m.spec,
        mask: m.mask,
        gi: m.gi,
        seed_cases: m.seed_cases,
        base_seed: m.base_seed,
    })
}

/// `t,rt_hat,pi_hat,lambda_hat,observed`; estimates are blank before the first window.
pub fn fit_csv(table: &IncidenceTable, fit: &FitResult) -> String {
    let mut out = String::from("t,rt_hat,pi_hat,lambda_hat,observed\n");
    let counts = table.series.counts();
    for (t, c) in counts.iter().enumerate() {
        let i = t.checked_sub(fit.first);
        let get = |v: &[f64]| i.and_then(|i| v.get(i).copied());
        let _ = writeln!(
            out,
            "{},{},{},{},{c}",
            table.label_of(t),
            opt(get(&fit.rt_hat)),
            opt(get(&fit.pi_hat)),
            opt(get(&fit.lambda_hat)),
        );
    }
    out
}

/// `day,mean,q025,q975,defined_flag`, one row per window end.
pub fn epiestim_csv(table: &IncidenceTable, est: &[PosteriorEstimate]) -> String {
    let mut out = String::from("day,mean,q025,q975,defined_flag\n");
    for e in est {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            table.label_of(e.position),
            opt(e.mean),
            opt(e.q025),
            opt(e.q975),
            u8::from(e.defined)
        );
    }
    out
}
