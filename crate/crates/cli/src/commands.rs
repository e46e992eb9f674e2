use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use rotnav::analysis::passivity_sweep;
use rotnav::sim::{run_batch, run_scenario, verify_invariants, VerifyOptions};
use rotnav::sysid::{identify_session, FitResult, IdentificationConfig, SessionLog};
use rotnav::{OperatorModelFile, ScenarioConfig, TrajectoryRecord};
use serde::Serialize;

pub fn load_config(path: Option<&Path>) -> Result<ScenarioConfig> {
    match path {
        Some(p) => ScenarioConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(ScenarioConfig::default()),
    }
}

fn status(passed: bool) -> ExitCode {
    if passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

pub fn simulate(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<ExitCode> {
    let mut cfg = load_config(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let record = run_scenario(&cfg)?;
    record.save(out).with_context(|| format!("writing {}", out.display()))?;
    if let Some(reason) = &record.aborted {
        eprintln!("run aborted after {} ticks: {reason}", record.len());
        return Ok(ExitCode::FAILURE);
    }
    println!("wrote {} ticks to {}", record.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn verify(traj: &Path, paired: Option<&Path>, objective: bool, json: Option<&Path>) -> Result<ExitCode> {
    let record = TrajectoryRecord::load(traj).with_context(|| format!("reading {}", traj.display()))?;
    let paired = paired
        .map(|p| TrajectoryRecord::load(p).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    let opts = VerifyOptions {
        require_objective: objective,
        ..Default::default()
    };
    let report = verify_invariants(&record, paired.as_ref(), &opts);
    print!("{report}");
    if let Some(path) = json {
        fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(status(report.passed()))
}

/// Accepts a bare model file or an identification result.
fn load_model(path: &Path) -> Result<OperatorModelFile> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(model) = serde_json::from_str::<OperatorModelFile>(&text) {
        return Ok(model);
    }
    let fit: FitResult =
        serde_json::from_str(&text).with_context(|| format!("{} is neither a model nor a fit result", path.display()))?;
    Ok(fit.params)
}

pub fn analyze_passivity(model: &Path, out: &Path, omega_min: f64, omega_max: f64, points: usize) -> Result<ExitCode> {
    let model = load_model(model)?;
    let report = passivity_sweep(&model.structure(), omega_min, omega_max, points)?;
    report.write_csv(BufWriter::new(File::create(out)?))?;
    let summary = serde_json::to_string_pretty(&report.summary())?;
    fs::write(out.with_extension("summary.json"), &summary)?;
    println!("{summary}");
    if !report.crossings.is_empty() {
        println!("sign changes between {:?}", report.crossings);
    }
    Ok(ExitCode::SUCCESS)
}

pub fn identify(
    input: &Path,
    out: &Path,
    resample: f64,
    restarts: usize,
    seed: u64,
    trim_dead_time: bool,
) -> Result<ExitCode> {
    let log = SessionLog::load(input).with_context(|| format!("reading {}", input.display()))?;
    let cfg = IdentificationConfig {
        resample_hz: resample,
        restarts,
        seed,
        trim_dead_time,
        ..Default::default()
    };
    let fit = identify_session(&log, &cfg)?;
    fit.save(out)?;
    println!("identification fit {:.2} %", fit.fit_id.aggregate);
    if let Some(val) = &fit.fit_val {
        println!("validation fit {:.2} %", val.aggregate);
    }
    if !fit.converged {
        eprintln!("warning: optimizer stopped at the iteration limit");
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Serialize)]
struct BatchEntry {
    id: String,
    trajectory: Option<PathBuf>,
    passed: bool,
    error: Option<String>,
}

pub fn batch(dir: &Path, jobs: usize, out: Option<&Path>, objective: bool) -> Result<ExitCode> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no scenario files in {}", dir.display());
    }
    let out = out.unwrap_or(dir);
    fs::create_dir_all(out)?;
    let ids: Vec<String> = paths
        .iter()
        .map(|p| p.file_stem().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let configs = paths
        .iter()
        .map(|p| ScenarioConfig::load(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let opts = VerifyOptions {
        require_objective: objective,
        ..Default::default()
    };
    let mut entries = Vec::new();
    for (id, result) in ids.into_iter().zip(run_batch(&configs, jobs)?) {
        let entry = match result {
            Ok(record) => {
                let path = out.join(format!("{id}.csv"));
                record.save(&path)?;
                let report = verify_invariants(&record, None, &opts);
                let passed = report.passed() && record.aborted.is_none();
                println!("{id}: {}", if passed { "PASS" } else { "FAIL" });
                if !passed {
                    print!("{report}");
                }
                BatchEntry {
                    id,
                    trajectory: Some(path),
                    passed,
                    error: record.aborted,
                }
            }
            Err(e) => {
                println!("{id}: ERROR {e}");
                BatchEntry {
                    id,
                    trajectory: None,
                    passed: false,
                    error: Some(e.to_string()),
                }
            }
        };
        entries.push(entry);
    }
    fs::write(out.join("batch_summary.json"), serde_json::to_string_pretty(&entries)?)?;
    Ok(status(entries.iter().all(|e| e.passed)))
}
