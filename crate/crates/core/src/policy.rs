//! Power-management policies.
//!
//! Baselines set the GPU-wide knobs directly. `CompPowAuto` reads per-kernel
//! component affinity (hints, phase hints, online-learned utilization, or
//! inferred from arithmetic intensity) and criticality hints, then caps the
//! XCD clock for data-movement work and moves CUs away from non-critical
//! collectives.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gpu_model::{ComponentKind, PerComponent, ValidatedSpec};
use crate::workload::{
    infer_affinity, Criticality, DemandVector, KernelDesc, KernelId, PhaseHint, DEFAULT_COLLECTIVE_CUS, PHASE_SUM_TOL,
};

/// The control surface a policy can set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActuatorSettings {
    pub freq_cap_mhz: f64,
    pub power_cap_w: f64,
    pub cu_alloc: BTreeMap<KernelId, u32>,
}

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("invalid actuator settings: {0}")]
    Settings(String),
    #[error("phase fractions sum to {0}, expected 1")]
    PhaseSum(f64),
}

impl ActuatorSettings {
    pub fn check(&self, spec: &ValidatedSpec, active: &[&KernelId]) -> Result<(), PolicyError> {
        let bad = |m: String| Err(PolicyError::Settings(m));
        if !(spec.f_min_mhz <= self.freq_cap_mhz && self.freq_cap_mhz <= spec.f_max_mhz) {
            return bad(format!("freq cap {} MHz outside [f_min, f_max]", self.freq_cap_mhz));
        }
        if !(spec.idle_total_w() < self.power_cap_w && self.power_cap_w <= spec.tdp_w) {
            return bad(format!("power cap {} W outside (idle, tdp]", self.power_cap_w));
        }
        let mut total = 0u64;
        for id in active {
            match self.cu_alloc.get(*id) {
                Some(&n) if n >= 1 => total += n as u64,
                _ => return bad(format!("kernel {id} has no CUs")),
            }
        }
        if total > spec.cu_total as u64 {
            return bad(format!("{total} CUs allocated, only {} exist", spec.cu_total));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutoConfig {
    /// Clock cap for data-movement-affine work, as a fraction of `f_max`.
    pub cap_ratio: f64,
    pub ewma_lambda: f64,
    pub warmup_iters: u32,
    pub reallocation_floor_cus: u32,
}

impl Default for AutoConfig {
    fn default() -> Self {
        Self {
            cap_ratio: 0.78,
            ewma_lambda: 0.5,
            warmup_iters: 2,
            reallocation_floor_cus: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyConfig {
    Baseline,
    PowerCap { cap_w: f64 },
    FreqCap { cap_mhz: f64 },
    Combined { power_cap_w: f64, freq_cap_mhz: f64 },
    CompPowAuto(AutoConfig),
}

/// What the power manager can see of a running kernel.
#[derive(Debug, Clone, Copy)]
pub struct ActiveView<'a> {
    pub desc: &'a KernelDesc,
    pub demand: DemandVector,
    pub progress: f64,
}

#[derive(Debug, Clone)]
pub struct Snapshot<'a> {
    pub spec: &'a ValidatedSpec,
    pub active: Vec<ActiveView<'a>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyDecision {
    pub settings: ActuatorSettings,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AffinityEntry {
    pub ewma: PerComponent<f64>,
    pub count: u32,
}

/// Online per-kernel utilization estimates, keyed by kernel id.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AffinityHistory {
    entries: BTreeMap<KernelId, AffinityEntry>,
}

impl AffinityHistory {
    pub fn get(&self, id: &KernelId) -> Option<&AffinityEntry> {
        self.entries.get(id)
    }

    /// In-place EWMA update; the first observation seeds the average.
    pub fn observe(&mut self, id: &KernelId, obs: PerComponent<f64>, lambda: f64) {
        let obs = obs.map(|u| u.clamp(0.0, 1.0));
        self.entries
            .entry(id.clone())
            .and_modify(|e| {
                e.ewma = PerComponent::from_fn(|k| lambda * obs[k] + (1.0 - lambda) * e.ewma[k]);
                e.count += 1;
            })
            .or_insert(AffinityEntry { ewma: obs, count: 1 });
    }

    /// The learned affinity once `warmup` observations have been made.
    pub fn learned_affinity(&self, id: &KernelId, warmup: u32) -> Option<ComponentKind> {
        self.learned_vector(id, warmup).map(|v| v.argmax())
    }

    fn learned_vector(&self, id: &KernelId, warmup: u32) -> Option<PerComponent<f64>> {
        self.entries.get(id).filter(|e| e.count >= warmup).map(|e| e.ewma)
    }
}

/// Functional form of [`AffinityHistory::observe`].
pub fn learn_affinity_online(
    history: &AffinityHistory,
    id: &KernelId,
    observed: PerComponent<f64>,
    lambda: f64,
) -> AffinityHistory {
    let mut h = history.clone();
    h.observe(id, observed, lambda);
    h
}

/// Settings to apply while a kernel's progress lies in `[start, end)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseBudget {
    pub start: f64,
    pub end: f64,
    pub settings: ActuatorSettings,
}

fn phase_affinity(u: &PerComponent<f64>) -> ComponentKind {
    if u.xcd >= u.iod {
        ComponentKind::Xcd
    } else {
        ComponentKind::Iod
    }
}

fn capped_freq(spec: &ValidatedSpec, ratio: f64) -> f64 {
    (ratio * spec.f_max_mhz).clamp(spec.f_min_mhz, spec.f_max_mhz)
}

pub fn phase_budgets(
    phases: &[PhaseHint],
    spec: &ValidatedSpec,
    cap_ratio: f64,
) -> Result<Vec<PhaseBudget>, PolicyError> {
    let total: f64 = phases.iter().map(|p| p.fraction).sum();
    if (total - 1.0).abs() > PHASE_SUM_TOL {
        return Err(PolicyError::PhaseSum(total));
    }
    let mut start = 0.0;
    Ok(phases
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let end = if i + 1 == phases.len() { 1.0 } else { start + p.fraction };
            let freq_cap_mhz = match phase_affinity(&p.utilization) {
                ComponentKind::Xcd => spec.f_max_mhz,
                _ => capped_freq(spec, cap_ratio),
            };
            let b = PhaseBudget {
                start,
                end,
                settings: ActuatorSettings {
                    freq_cap_mhz,
                    power_cap_w: spec.tdp_w,
                    cu_alloc: BTreeMap::new(),
                },
            };
            start = end;
            b
        })
        .collect())
}

/// Index of the phase containing `progress`.
pub fn current_phase(phases: &[PhaseHint], progress: f64) -> usize {
    let mut end = 0.0;
    for (i, p) in phases.iter().enumerate() {
        end += p.fraction;
        if progress < end {
            return i;
        }
    }
    phases.len().saturating_sub(1)
}

/// Progress values at which a phased kernel changes phase (excluding 0 and 1).
pub fn phase_boundaries(phases: &[PhaseHint]) -> Vec<f64> {
    let mut out = Vec::new();
    let mut end = 0.0;
    for p in phases.iter().take(phases.len().saturating_sub(1)) {
        end += p.fraction;
        out.push(end);
    }
    out
}

/// Collectives get their configured CUs; compute kernels without an explicit
/// request split whatever is left.
pub fn default_cu_alloc(spec: &ValidatedSpec, active: &[ActiveView<'_>]) -> BTreeMap<KernelId, u32> {
    alloc_with_overrides(spec, active, &BTreeMap::new())
}

fn alloc_with_overrides(
    spec: &ValidatedSpec,
    active: &[ActiveView<'_>],
    overrides: &BTreeMap<KernelId, u32>,
) -> BTreeMap<KernelId, u32> {
    let mut alloc = BTreeMap::new();
    let mut flexible = Vec::new();
    let mut fixed = 0u32;
    for a in active {
        let req = overrides
            .get(&a.desc.id)
            .copied()
            .or(a.desc.cus)
            .or_else(|| a.desc.op.is_collective().then_some(DEFAULT_COLLECTIVE_CUS));
        match req {
            Some(n) => {
                let n = n.min(spec.cu_total);
                fixed = fixed.saturating_add(n);
                alloc.insert(a.desc.id.clone(), n);
            }
            None => flexible.push(a.desc.id.clone()),
        }
    }
    if !flexible.is_empty() {
        let rest = spec.cu_total.saturating_sub(fixed);
        let each = rest / flexible.len() as u32;
        let extra = rest % flexible.len() as u32;
        for (i, id) in flexible.into_iter().enumerate() {
            alloc.insert(id, each + u32::from((i as u32) < extra));
        }
    }
    alloc
}

fn baseline(spec: &ValidatedSpec, active: &[ActiveView<'_>]) -> ActuatorSettings {
    ActuatorSettings {
        freq_cap_mhz: spec.f_max_mhz,
        power_cap_w: spec.tdp_w,
        cu_alloc: default_cu_alloc(spec, active),
    }
}

fn one_hot(k: ComponentKind) -> PerComponent<f64> {
    PerComponent::from_fn(|c| if c == k { 1.0 } else { 0.0 })
}

/// Affinity evidence for one kernel, strongest source first.
fn affinity_vector(
    view: &ActiveView<'_>,
    spec: &ValidatedSpec,
    history: &AffinityHistory,
    cfg: &AutoConfig,
) -> PerComponent<f64> {
    let d = view.desc;
    if !d.phases.is_empty() {
        let p = &d.phases[current_phase(&d.phases, view.progress)];
        return one_hot(phase_affinity(&p.utilization));
    }
    if let Some(h) = d.affinity_hint {
        return one_hot(h);
    }
    if let Some(v) = history.learned_vector(&d.id, cfg.warmup_iters) {
        return v;
    }
    one_hot(infer_affinity(&view.demand, spec))
}

pub fn apply_policy(cfg: &PolicyConfig, snapshot: &Snapshot<'_>, history: &AffinityHistory) -> PolicyDecision {
    let spec = snapshot.spec;
    let active = &snapshot.active;
    let mut settings = baseline(spec, active);
    let mut warning = None;
    match *cfg {
        PolicyConfig::Baseline => {}
        PolicyConfig::PowerCap { cap_w } => settings.power_cap_w = cap_w,
        PolicyConfig::FreqCap { cap_mhz } => settings.freq_cap_mhz = cap_mhz,
        PolicyConfig::Combined {
            power_cap_w,
            freq_cap_mhz,
        } => {
            settings.power_cap_w = power_cap_w;
            settings.freq_cap_mhz = freq_cap_mhz;
        }
        PolicyConfig::CompPowAuto(auto) => {
            let critical: Vec<_> = active
                .iter()
                .filter(|a| a.desc.criticality == Criticality::Critical)
                .collect();
            if critical.len() >= 2 {
                let ids: Vec<_> = critical.iter().map(|a| a.desc.id.as_str()).collect();
                warning = Some(format!(
                    "conflicting criticality hints ({}); baseline settings applied",
                    ids.join(", ")
                ));
                return PolicyDecision { settings, warning };
            }

            let target = if critical.len() == 1 && active.len() > 1 {
                let crit = critical[0];
                let mut overrides = BTreeMap::new();
                let mut freed = 0u32;
                for a in active.iter().filter(|a| a.desc.id != crit.desc.id) {
                    let aff = affinity_vector(a, spec, history, &auto).argmax();
                    let current = settings.cu_alloc[&a.desc.id];
                    if aff.is_data_movement() && current > auto.reallocation_floor_cus {
                        overrides.insert(a.desc.id.clone(), auto.reallocation_floor_cus);
                        freed += current - auto.reallocation_floor_cus;
                    }
                }
                if freed > 0 {
                    if let Some(n) = crit.desc.cus {
                        overrides.insert(crit.desc.id.clone(), (n + freed).min(spec.cu_total));
                    }
                    settings.cu_alloc = alloc_with_overrides(spec, active, &overrides);
                }
                affinity_vector(crit, spec, history, &auto).argmax()
            } else {
                active
                    .iter()
                    .map(|a| affinity_vector(a, spec, history, &auto))
                    .fold(PerComponent::default(), |acc, v| acc.add(&v))
                    .argmax()
            };
            if !active.is_empty() && target.is_data_movement() {
                settings.freq_cap_mhz = capped_freq(spec, auto.cap_ratio);
            }
        }
    }
    PolicyDecision { settings, warning }
}
