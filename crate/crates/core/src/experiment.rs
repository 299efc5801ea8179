//! Experiment orchestration: single runs, paired comparisons, knob sweeps and
//! overlap reports, with their on-disk artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, energy, overlap_accounting, read_intervals, savings_and_loss, AnalysisError, Metrics};
use crate::engine::{self, EngineError, RunOutput, SimTrace};
use crate::format::g9;
use crate::gpu_model::PowerBreakdown;
use crate::parallel::Exec;
use crate::policy::PolicyConfig;
use crate::scenario::{effective_config, parse_scenario, Scenario, ScenarioError};
use crate::workload::{KernelId, DEFAULT_COLLECTIVE_CUS};

pub const TRACE_HEADER: &str = "t_s,f_mhz,p_xcd_w,p_iod_w,p_hbm_w,p_total_w,active_kernels,u_xcd,u_iod,u_hbm";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("simulation failed: {0}")]
    Engine(#[from] EngineError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ExperimentError {
    /// 1 for bad input, 2 for failures while running or writing.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Scenario(ScenarioError::Io { .. }) => 2,
            ExperimentError::Scenario(_) | ExperimentError::Validation(_) | ExperimentError::Analysis(_) => 1,
            ExperimentError::Engine(_) | ExperimentError::Io { .. } => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), ExperimentError> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    write_file(path, &s)
}

fn ensure_dir(dir: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// One simulated scenario and its metrics.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub output: RunOutput,
    pub metrics: Metrics,
}

impl RunResult {
    pub fn trace(&self) -> &SimTrace {
        &self.output.trace
    }
}

pub fn run_scenario(s: &Scenario) -> Result<RunResult, EngineError> {
    let output = engine::run(s)?;
    let metrics = energy(&output.trace);
    Ok(RunResult { output, metrics })
}

/// Runs independent scenarios, in parallel when `exec` allows.
pub fn run_batch(scenarios: &[Scenario], exec: Exec) -> Vec<Result<RunResult, EngineError>> {
    exec.map(scenarios, run_scenario)
}

pub fn trace_csv(trace: &SimTrace) -> String {
    let mut out = String::with_capacity(64 * (trace.samples.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for s in &trace.samples {
        let ids: Vec<&str> = s.active.iter().map(KernelId::as_str).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            g9(s.t_s),
            g9(s.f_mhz),
            g9(s.power.xcd),
            g9(s.power.iod),
            g9(s.power.hbm),
            g9(s.power.total),
            ids.join(";"),
            g9(s.utilization.xcd),
            g9(s.utilization.iod),
            g9(s.utilization.hbm),
        );
    }
    out
}

/// Writes `trace.csv`, `metrics.json` and `effective_config.json`.
pub fn write_run(dir: &Path, s: &Scenario, r: &RunResult) -> Result<(), ExperimentError> {
    ensure_dir(dir)?;
    write_file(&dir.join("trace.csv"), &trace_csv(r.trace()))?;
    write_json(&dir.join("metrics.json"), &r.metrics)?;
    write_json(&dir.join("effective_config.json"), &effective_config(s))
}

pub fn cmd_run(scenario: &Path, out: &Path) -> Result<Metrics, ExperimentError> {
    let s = parse_scenario(scenario)?;
    let r = run_scenario(&s)?;
    write_run(out, &s, &r)?;
    Ok(r.metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelComparison {
    pub id: KernelId,
    pub iteration: u32,
    pub base_duration_s: f64,
    pub variant_duration_s: f64,
    /// Positive when the variant is slower.
    pub duration_change_pct: f64,
    pub base_window_energy_j: f64,
    pub variant_window_energy_j: f64,
    pub window_savings_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub base: String,
    pub variant: String,
    pub savings_pct: f64,
    pub loss_pct: f64,
    pub base_energy_j: PowerBreakdown,
    pub variant_energy_j: PowerBreakdown,
    /// Variant minus base, per component.
    pub energy_delta_j: PowerBreakdown,
    pub base_makespan_s: f64,
    pub variant_makespan_s: f64,
    pub kernels: Vec<KernelComparison>,
    /// Means over `kernels` of the window savings and duration change.
    pub mean_kernel_savings_pct: f64,
    pub mean_kernel_loss_pct: f64,
}

impl Comparison {
    pub fn kernel(&self, id: &str) -> Option<&KernelComparison> {
        self.kernels.iter().find(|k| k.id.as_str() == id)
    }
}

pub fn compare_metrics(base_name: &str, variant_name: &str, base: &Metrics, variant: &Metrics) -> Comparison {
    let (savings_pct, loss_pct) = savings_and_loss(base, variant);
    let kernels: Vec<KernelComparison> = base
        .kernels
        .iter()
        .filter_map(|b| {
            let v = variant
                .kernels
                .iter()
                .find(|v| v.id == b.id && v.iteration == b.iteration)?;
            if !(b.duration_s > 0.0) {
                return None;
            }
            let (s, l) = analysis::savings_and_loss_raw(
                b.window_energy_j.total,
                v.window_energy_j.total,
                b.duration_s,
                v.duration_s,
            );
            Some(KernelComparison {
                id: b.id.clone(),
                iteration: b.iteration,
                base_duration_s: b.duration_s,
                variant_duration_s: v.duration_s,
                duration_change_pct: l,
                base_window_energy_j: b.window_energy_j.total,
                variant_window_energy_j: v.window_energy_j.total,
                window_savings_pct: s,
            })
        })
        .collect();
    let mean = |f: fn(&KernelComparison) -> f64| {
        if kernels.is_empty() {
            0.0
        } else {
            kernels.iter().map(f).sum::<f64>() / kernels.len() as f64
        }
    };
    let e = |b: f64, v: f64| v - b;
    let (be, ve) = (&base.energy_j, &variant.energy_j);
    Comparison {
        base: base_name.to_string(),
        variant: variant_name.to_string(),
        savings_pct,
        loss_pct,
        base_energy_j: *be,
        variant_energy_j: *ve,
        energy_delta_j: PowerBreakdown {
            xcd: e(be.xcd, ve.xcd),
            iod: e(be.iod, ve.iod),
            hbm: e(be.hbm, ve.hbm),
            total: e(be.total, ve.total),
        },
        base_makespan_s: base.makespan_s,
        variant_makespan_s: variant.makespan_s,
        mean_kernel_savings_pct: mean(|k| k.window_savings_pct),
        mean_kernel_loss_pct: mean(|k| k.duration_change_pct),
        kernels,
    }
}

/// Runs both scenarios and compares them. The two must share a machine spec.
pub fn compare(
    base: &Scenario,
    variant: &Scenario,
    exec: Exec,
) -> Result<(Comparison, RunResult, RunResult), ExperimentError> {
    if *base.spec != *variant.spec {
        return Err(ExperimentError::Validation(format!(
            "scenarios use different specs ({} vs {})",
            base.spec.name, variant.spec.name
        )));
    }
    let (rb, rv) = exec.join(|| run_scenario(base), || run_scenario(variant));
    let (rb, rv) = (rb?, rv?);
    if !(rb.metrics.energy_j.total > 0.0 && rb.metrics.makespan_s > 0.0) {
        return Err(ExperimentError::Validation(
            "base run has zero energy or makespan".into(),
        ));
    }
    let c = compare_metrics(&base.name, &variant.name, &rb.metrics, &rv.metrics);
    Ok((c, rb, rv))
}

pub fn cmd_compare(base: &Path, variant: &Path, out: &Path) -> Result<Comparison, ExperimentError> {
    let b = parse_scenario(base)?;
    let v = parse_scenario(variant)?;
    let (c, rb, rv) = compare(&b, &v, Exec::default())?;
    ensure_dir(out)?;
    write_json(&out.join("comparison.json"), &c)?;
    write_run(&out.join("base"), &b, &rb)?;
    write_run(&out.join("variant"), &v, &rv)?;
    Ok(c)
}

/// A sweepable actuator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Knob {
    PowerCap,
    FreqCap,
    CuAlloc(KernelId),
}

impl FromStr for Knob {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "power_cap" => Ok(Knob::PowerCap),
            "freq_cap" => Ok(Knob::FreqCap),
            _ => match s.strip_prefix("cu_alloc:") {
                Some(id) if !id.is_empty() => Ok(Knob::CuAlloc(id.into())),
                _ => Err(format!(
                    "unknown knob {s:?} (expected power_cap, freq_cap or cu_alloc:<kernel-id>)"
                )),
            },
        }
    }
}

impl std::fmt::Display for Knob {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Knob::PowerCap => f.write_str("power_cap"),
            Knob::FreqCap => f.write_str("freq_cap"),
            Knob::CuAlloc(id) => write!(f, "cu_alloc:{id}"),
        }
    }
}

/// Copy of `s` with the knob set to `value`. Errors describe why the value
/// is out of bounds or the knob does not apply.
pub fn apply_knob(s: &Scenario, knob: &Knob, value: f64) -> Result<Scenario, String> {
    let mut out = s.clone();
    let spec = &s.spec;
    match knob {
        Knob::PowerCap => {
            if !(spec.idle_total_w() < value && value <= spec.tdp_w) {
                return Err(format!(
                    "power cap {value} W outside ({}, {}]",
                    spec.idle_total_w(),
                    spec.tdp_w
                ));
            }
            out.policy = match s.policy {
                PolicyConfig::Baseline | PolicyConfig::PowerCap { .. } => PolicyConfig::PowerCap { cap_w: value },
                PolicyConfig::FreqCap { cap_mhz }
                | PolicyConfig::Combined {
                    freq_cap_mhz: cap_mhz, ..
                } => PolicyConfig::Combined {
                    power_cap_w: value,
                    freq_cap_mhz: cap_mhz,
                },
                PolicyConfig::CompPowAuto(_) => return Err("power_cap does not apply to comppow_auto".into()),
            };
        }
        Knob::FreqCap => {
            if !(spec.f_min_mhz <= value && value <= spec.f_max_mhz) {
                return Err(format!(
                    "frequency cap {value} MHz outside [{}, {}]",
                    spec.f_min_mhz, spec.f_max_mhz
                ));
            }
            out.policy = match s.policy {
                PolicyConfig::Baseline | PolicyConfig::FreqCap { .. } => PolicyConfig::FreqCap { cap_mhz: value },
                PolicyConfig::PowerCap { cap_w } | PolicyConfig::Combined { power_cap_w: cap_w, .. } => {
                    PolicyConfig::Combined {
                        power_cap_w: cap_w,
                        freq_cap_mhz: value,
                    }
                }
                PolicyConfig::CompPowAuto(_) => return Err("freq_cap does not apply to comppow_auto".into()),
            };
        }
        Knob::CuAlloc(id) => {
            if value.fract() != 0.0 || !(1.0..=spec.cu_total as f64).contains(&value) {
                return Err(format!("CU count {value} is not an integer in [1, {}]", spec.cu_total));
            }
            let n = value as u32;
            let stream = s
                .streams
                .iter()
                .position(|st| st.iter().any(|k| k.id == *id))
                .ok_or_else(|| format!("no kernel {id}"))?;
            // Worst concurrent request from the other stream must still fit.
            let other: u32 = s
                .streams
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != stream)
                .map(|(_, st)| {
                    st.iter()
                        .map(|k| {
                            k.cus.unwrap_or(if k.op.is_collective() {
                                DEFAULT_COLLECTIVE_CUS
                            } else {
                                1
                            })
                        })
                        .max()
                        .unwrap_or(0)
                })
                .sum();
            if n + other > spec.cu_total {
                return Err(format!(
                    "{n} CUs plus {other} for the other stream exceed {}",
                    spec.cu_total
                ));
            }
            out.kernel_mut(id.as_str()).expect("kernel found above").cus = Some(n);
        }
    }
    out.name = format!("{}[{}={}]", s.name, knob, g9(value));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub savings_pct: f64,
    pub loss_pct: f64,
    pub max_savings: bool,
    pub comparison: Comparison,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub warnings: Vec<String>,
}

/// Sweep rows, the unswept run, and each swept scenario with its run.
pub type SweepOutput = (SweepResult, RunResult, Vec<(Scenario, RunResult)>);

pub fn sweep(s: &Scenario, knob: &Knob, values: &[f64], exec: Exec) -> Result<SweepOutput, ExperimentError> {
    if values.is_empty() {
        return Err(ExperimentError::Validation("sweep needs at least one value".into()));
    }
    let mut warnings = Vec::new();
    let mut variants = Vec::new();
    for &v in values {
        match apply_knob(s, knob, v) {
            Ok(sc) => variants.push((v, sc)),
            Err(e) => warnings.push(format!("skipping {knob}={}: {e}", g9(v))),
        }
    }
    let mut all: Vec<Scenario> = vec![s.clone()];
    all.extend(variants.iter().map(|(_, sc)| sc.clone()));
    let mut results = run_batch(&all, exec).into_iter();
    let base = results.next().expect("baseline run")?;
    if !(base.metrics.energy_j.total > 0.0 && base.metrics.makespan_s > 0.0) {
        return Err(ExperimentError::Validation(
            "unswept run has zero energy or makespan".into(),
        ));
    }
    let mut rows = Vec::with_capacity(variants.len());
    let mut runs = Vec::with_capacity(variants.len());
    for ((v, sc), r) in variants.into_iter().zip(results) {
        let r = r?;
        let c = compare_metrics(&s.name, &sc.name, &base.metrics, &r.metrics);
        rows.push(SweepRow {
            value: v,
            savings_pct: c.savings_pct,
            loss_pct: c.loss_pct,
            max_savings: false,
            comparison: c,
        });
        runs.push((sc, r));
    }
    if let Some(best) =
        (0..rows.len()).max_by(|&a, &b| rows[a].savings_pct.total_cmp(&rows[b].savings_pct).then(b.cmp(&a)))
    {
        rows[best].max_savings = true;
    }
    Ok((SweepResult { rows, warnings }, base, runs))
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("value,savings_pct,loss_pct,max_savings_flag\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            g9(r.value),
            g9(r.savings_pct),
            g9(r.loss_pct),
            u8::from(r.max_savings)
        );
    }
    out
}

/// Writes `sweep.csv` plus a run directory per value under `runs/`.
pub fn cmd_sweep(scenario: &Path, knob: &Knob, values: &[f64], out: &Path) -> Result<SweepResult, ExperimentError> {
    let s = parse_scenario(scenario)?;
    let (res, base, runs) = sweep(&s, knob, values, Exec::default())?;
    ensure_dir(out)?;
    write_run(&out.join("runs").join("base"), &s, &base)?;
    for (row, (sc, r)) in res.rows.iter().zip(&runs) {
        let dir = out.join("runs").join(format!("value_{}", g9(row.value)));
        write_run(&dir, sc, r)?;
        write_json(&dir.join("comparison.json"), &row.comparison)?;
    }
    write_file(&out.join("sweep.csv"), &sweep_csv(&res.rows))?;
    Ok(res)
}

/// Overlap report over a profiler interval export. The makespan is the latest
/// interval end.
pub fn cmd_overlap(intervals: &Path, out: &Path) -> Result<analysis::OverlapReport, ExperimentError> {
    let f = fs::File::open(intervals).map_err(io_err(intervals))?;
    let ivs = read_intervals(f)?;
    let makespan = ivs.iter().map(|i| i.end_s).fold(0.0, f64::max);
    let rep = overlap_accounting(&ivs, makespan)?;
    ensure_dir(out)?;
    write_json(&out.join("overlap.json"), &rep)?;
    Ok(rep)
}
