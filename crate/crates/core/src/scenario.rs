//! Scenario files: machine, kernel streams, policy and run parameters.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::engine::GOVERNOR_TOL_MHZ;
use crate::gpu_model::{validate_spec, GpuSpec, ModelError, ValidatedSpec};
use crate::policy::{AutoConfig, PolicyConfig};
use crate::workload::{KernelDesc, DEFAULT_COLLECTIVE_CUS};

pub const DEFAULT_DT_S: f64 = 1e-4;
pub const MAX_STREAMS: usize = 2;
/// Environment variable naming a directory searched first for spec files.
pub const SPEC_DIR_ENV: &str = "COMPPOW_SPEC_DIR";

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub spec: ValidatedSpec,
    pub streams: Vec<Vec<KernelDesc>>,
    pub policy: PolicyConfig,
    pub dt_s: f64,
    pub iterations: u32,
    pub governor_tol_mhz: f64,
}

impl Scenario {
    /// A single-iteration scenario with default step and tolerance.
    pub fn new(name: &str, spec: ValidatedSpec, streams: Vec<Vec<KernelDesc>>, policy: PolicyConfig) -> Self {
        Self {
            name: name.to_string(),
            spec,
            streams,
            policy,
            dt_s: DEFAULT_DT_S,
            iterations: 1,
            governor_tol_mhz: GOVERNOR_TOL_MHZ,
        }
    }

    pub fn kernels(&self) -> impl Iterator<Item = &KernelDesc> {
        self.streams.iter().flatten()
    }

    pub fn kernel_mut(&mut self, id: &str) -> Option<&mut KernelDesc> {
        self.streams.iter_mut().flatten().find(|k| k.id.as_str() == id)
    }

    /// Copy restricted to one stream, for standalone counterparts of a
    /// concurrent scenario.
    pub fn only_stream(&self, stream: usize) -> Scenario {
        let mut s = self.clone();
        s.streams = vec![self.streams[stream].clone()];
        s.name = format!("{}#stream{}", self.name, stream);
        s
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {message}")]
    Field { path: String, message: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn field(path: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Field {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Variant {
    Baseline,
    PowerCap,
    FreqCap,
    Combined,
    ComppowAuto,
}

/// Policy as written in a file: a variant tag plus its knobs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPolicy {
    variant: Option<Variant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cap_w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cap_mhz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    power_cap_w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    freq_cap_mhz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cap_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ewma_lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    warmup_iters: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reallocation_floor_cus: Option<u32>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    #[serde(default)]
    name: Option<String>,
    spec: Value,
    streams: Vec<Vec<KernelDesc>>,
    policy: RawPolicy,
    #[serde(default)]
    dt_s: Option<f64>,
    #[serde(default)]
    iterations: Option<u32>,
    #[serde(default)]
    governor_tol_mhz: Option<f64>,
}

fn policy_from_raw(raw: &RawPolicy, spec: &ValidatedSpec) -> Result<PolicyConfig, ScenarioError> {
    let need = |v: Option<f64>, name: &str| v.ok_or_else(|| field(format!("policy.{name}"), "missing required field"));
    let check_power = |w: f64, name: &str| {
        if spec.idle_total_w() < w && w <= spec.tdp_w {
            Ok(w)
        } else {
            Err(field(
                format!("policy.{name}"),
                format!("power cap {w} W outside ({}, {}]", spec.idle_total_w(), spec.tdp_w),
            ))
        }
    };
    let check_freq = |f: f64, name: &str| {
        if spec.f_min_mhz <= f && f <= spec.f_max_mhz {
            Ok(f)
        } else {
            Err(field(
                format!("policy.{name}"),
                format!("frequency cap {f} MHz outside [{}, {}]", spec.f_min_mhz, spec.f_max_mhz),
            ))
        }
    };
    let variant = raw
        .variant
        .ok_or_else(|| field("policy.variant", "missing required field"))?;
    Ok(match variant {
        Variant::Baseline => PolicyConfig::Baseline,
        Variant::PowerCap => PolicyConfig::PowerCap {
            cap_w: check_power(need(raw.cap_w, "cap_w")?, "cap_w")?,
        },
        Variant::FreqCap => PolicyConfig::FreqCap {
            cap_mhz: check_freq(need(raw.cap_mhz, "cap_mhz")?, "cap_mhz")?,
        },
        Variant::Combined => PolicyConfig::Combined {
            power_cap_w: check_power(need(raw.power_cap_w, "power_cap_w")?, "power_cap_w")?,
            freq_cap_mhz: check_freq(need(raw.freq_cap_mhz, "freq_cap_mhz")?, "freq_cap_mhz")?,
        },
        Variant::ComppowAuto => {
            let d = AutoConfig::default();
            let a = AutoConfig {
                cap_ratio: raw.cap_ratio.unwrap_or(d.cap_ratio),
                ewma_lambda: raw.ewma_lambda.unwrap_or(d.ewma_lambda),
                warmup_iters: raw.warmup_iters.unwrap_or(d.warmup_iters),
                reallocation_floor_cus: raw.reallocation_floor_cus.unwrap_or(d.reallocation_floor_cus),
            };
            if !(a.cap_ratio > 0.0 && a.cap_ratio <= 1.0) {
                return Err(field("policy.cap_ratio", "must lie in (0, 1]"));
            }
            if !(a.ewma_lambda > 0.0 && a.ewma_lambda <= 1.0) {
                return Err(field("policy.ewma_lambda", "must lie in (0, 1]"));
            }
            if a.warmup_iters < 1 {
                return Err(field("policy.warmup_iters", "must be at least 1"));
            }
            if a.reallocation_floor_cus < 1 {
                return Err(field("policy.reallocation_floor_cus", "must be at least 1"));
            }
            PolicyConfig::CompPowAuto(a)
        }
    })
}

fn policy_to_raw(p: &PolicyConfig) -> RawPolicy {
    match *p {
        PolicyConfig::Baseline => RawPolicy {
            variant: Some(Variant::Baseline),
            ..Default::default()
        },
        PolicyConfig::PowerCap { cap_w } => RawPolicy {
            variant: Some(Variant::PowerCap),
            cap_w: Some(cap_w),
            ..Default::default()
        },
        PolicyConfig::FreqCap { cap_mhz } => RawPolicy {
            variant: Some(Variant::FreqCap),
            cap_mhz: Some(cap_mhz),
            ..Default::default()
        },
        PolicyConfig::Combined {
            power_cap_w,
            freq_cap_mhz,
        } => RawPolicy {
            variant: Some(Variant::Combined),
            power_cap_w: Some(power_cap_w),
            freq_cap_mhz: Some(freq_cap_mhz),
            ..Default::default()
        },
        PolicyConfig::CompPowAuto(a) => RawPolicy {
            variant: Some(Variant::ComppowAuto),
            cap_ratio: Some(a.cap_ratio),
            ewma_lambda: Some(a.ewma_lambda),
            warmup_iters: Some(a.warmup_iters),
            reallocation_floor_cus: Some(a.reallocation_floor_cus),
            ..Default::default()
        },
    }
}

fn from_value<T: serde::de::DeserializeOwned>(v: Value, prefix: &str) -> Result<T, ScenarioError> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let inner = e.path().to_string();
        let path = match (prefix.is_empty(), inner.as_str()) {
            (true, _) => inner.clone(),
            (false, ".") => prefix.to_string(),
            (false, _) => format!("{prefix}.{inner}"),
        };
        field(path, e.into_inner().to_string())
    })
}

/// Resolves a spec reference. `COMPPOW_SPEC_DIR` is searched first (by file
/// name), then the path relative to the scenario's directory.
fn resolve_spec_path(reference: &str, base_dir: &Path) -> PathBuf {
    let p = Path::new(reference);
    if p.is_absolute() {
        return p.to_path_buf();
    }
    if let Some(dir) = std::env::var_os(SPEC_DIR_ENV) {
        let dir = PathBuf::from(dir);
        for cand in [dir.join(p), p.file_name().map(|n| dir.join(n)).unwrap_or_default()] {
            if cand.is_file() {
                return cand;
            }
        }
    }
    base_dir.join(p)
}

pub fn load_spec(path: &Path) -> Result<ValidatedSpec, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    spec_from_str(&text, "")
}

fn spec_from_str(text: &str, prefix: &str) -> Result<ValidatedSpec, ScenarioError> {
    let v: Value =
        serde_json::from_str(text).map_err(|e| field(if prefix.is_empty() { "." } else { prefix }, e.to_string()))?;
    spec_from_value(v, prefix)
}

fn spec_from_value(v: Value, prefix: &str) -> Result<ValidatedSpec, ScenarioError> {
    let raw: GpuSpec = from_value(v, prefix)?;
    validate_spec(raw).map_err(|e| match e {
        ModelError::InvalidSpec(vs) => {
            let p = if prefix.is_empty() {
                "spec".to_string()
            } else {
                prefix.to_string()
            };
            field(p, vs.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))
        }
        other => field(prefix, other.to_string()),
    })
}

/// Parses and validates scenario JSON. Relative spec paths resolve against
/// `base_dir`.
pub fn parse_scenario_str(text: &str, base_dir: &Path) -> Result<Scenario, ScenarioError> {
    let v: Value = serde_json::from_str(text).map_err(|e| field(".", e.to_string()))?;
    let raw: RawScenario = from_value(v, "")?;

    let spec = match raw.spec {
        Value::String(reference) => {
            let path = resolve_spec_path(&reference, base_dir);
            let text = std::fs::read_to_string(&path).map_err(|e| field("spec", format!("{}: {e}", path.display())))?;
            spec_from_str(&text, "spec")?
        }
        obj @ Value::Object(_) => spec_from_value(obj, "spec")?,
        _ => return Err(field("spec", "expected a file path or an inline spec object")),
    };

    if raw.streams.len() > MAX_STREAMS {
        return Err(field("streams", format!("at most {MAX_STREAMS} streams supported")));
    }
    if raw.streams.iter().all(Vec::is_empty) {
        return Err(field("streams", "no kernels"));
    }
    let mut seen = BTreeSet::new();
    for (i, s) in raw.streams.iter().enumerate() {
        for (j, k) in s.iter().enumerate() {
            let path = format!("streams[{i}][{j}]");
            if !seen.insert(k.id.clone()) {
                return Err(field(format!("{path}.id"), format!("duplicate kernel id {}", k.id)));
            }
            k.validate().map_err(|e| field(path.clone(), e.to_string()))?;
            if let Some(n) = k.cus {
                if n > spec.cu_total {
                    return Err(field(
                        format!("{path}.cus"),
                        format!("only {} CUs exist", spec.cu_total),
                    ));
                }
            }
        }
    }
    // Worst case concurrent CU requests across the two streams.
    let worst: u32 = raw
        .streams
        .iter()
        .map(|s| {
            s.iter()
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
    if worst > spec.cu_total {
        return Err(field(
            "streams",
            format!("concurrent CU requests ({worst}) exceed {}", spec.cu_total),
        ));
    }

    let policy = policy_from_raw(&raw.policy, &spec)?;
    let dt_s = raw.dt_s.unwrap_or(DEFAULT_DT_S);
    if !(dt_s > 0.0 && dt_s.is_finite()) {
        return Err(field("dt_s", "must be positive"));
    }
    let iterations = raw.iterations.unwrap_or(1);
    if iterations < 1 {
        return Err(field("iterations", "must be at least 1"));
    }
    let governor_tol_mhz = raw.governor_tol_mhz.unwrap_or(GOVERNOR_TOL_MHZ);
    if !(governor_tol_mhz > 0.0) {
        return Err(field("governor_tol_mhz", "must be positive"));
    }

    Ok(Scenario {
        name: raw.name.unwrap_or_default(),
        spec,
        streams: raw.streams,
        policy,
        dt_s,
        iterations,
        governor_tol_mhz,
    })
}

pub fn parse_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut s = parse_scenario_str(&text, base)?;
    if s.name.is_empty() {
        s.name = path
            .file_stem()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
    }
    Ok(s)
}

/// Fully explicit form of a scenario: spec inlined, every default filled in.
/// Parsing this value yields the same scenario.
pub fn effective_config(s: &Scenario) -> Value {
    #[derive(Serialize)]
    struct Effective<'a> {
        name: &'a str,
        spec: &'a GpuSpec,
        streams: &'a [Vec<KernelDesc>],
        policy: RawPolicy,
        dt_s: f64,
        iterations: u32,
        governor_tol_mhz: f64,
    }
    serde_json::to_value(Effective {
        name: &s.name,
        spec: &s.spec,
        streams: &s.streams,
        policy: policy_to_raw(&s.policy),
        dt_s: s.dt_s,
        iterations: s.iterations,
        governor_tol_mhz: s.governor_tol_mhz,
    })
    .expect("scenario serializes")
}
