//! The simulated GPU: its three power components, the governed clock domain
//! and the per-component power model.

use std::fmt;
use std::ops::{Deref, Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One of the three independently metered parts of the package.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentKind {
    /// Accelerator complex dies: compute units and L2. Clocked by the GPU clock.
    Xcd,
    /// I/O dies: last-level cache, memory and link interfaces.
    Iod,
    /// On-package high-bandwidth memory stacks.
    Hbm,
}

impl ComponentKind {
    /// All components, in tie-break priority order.
    pub const ALL: [ComponentKind; 3] = [ComponentKind::Xcd, ComponentKind::Iod, ComponentKind::Hbm];

    pub fn name(self) -> &'static str {
        match self {
            ComponentKind::Xcd => "xcd",
            ComponentKind::Iod => "iod",
            ComponentKind::Hbm => "hbm",
        }
    }

    /// Data-movement components (everything except the compute dies).
    pub fn is_data_movement(self) -> bool {
        !matches!(self, ComponentKind::Xcd)
    }
}

impl fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A value for each component. Serialized as `{"xcd": .., "iod": .., "hbm": ..}`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerComponent<T> {
    pub xcd: T,
    pub iod: T,
    pub hbm: T,
}

impl<T> PerComponent<T> {
    pub fn new(xcd: T, iod: T, hbm: T) -> Self {
        Self { xcd, iod, hbm }
    }

    pub fn from_fn(mut f: impl FnMut(ComponentKind) -> T) -> Self {
        Self {
            xcd: f(ComponentKind::Xcd),
            iod: f(ComponentKind::Iod),
            hbm: f(ComponentKind::Hbm),
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> PerComponent<U> {
        PerComponent {
            xcd: f(&self.xcd),
            iod: f(&self.iod),
            hbm: f(&self.hbm),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ComponentKind, &T)> {
        ComponentKind::ALL.into_iter().map(move |k| (k, &self[k]))
    }
}

impl PerComponent<f64> {
    /// Sum in the fixed order xcd + iod + hbm.
    pub fn sum(&self) -> f64 {
        self.xcd + self.iod + self.hbm
    }

    /// Component with the largest value; ties resolve Xcd, then Iod, then Hbm.
    pub fn argmax(&self) -> ComponentKind {
        let mut best = ComponentKind::Xcd;
        for k in [ComponentKind::Iod, ComponentKind::Hbm] {
            if self[k] > self[best] {
                best = k;
            }
        }
        best
    }

    pub fn add(&self, other: &Self) -> Self {
        PerComponent::from_fn(|k| self[k] + other[k])
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }
}

impl<T> Index<ComponentKind> for PerComponent<T> {
    type Output = T;

    fn index(&self, k: ComponentKind) -> &T {
        match k {
            ComponentKind::Xcd => &self.xcd,
            ComponentKind::Iod => &self.iod,
            ComponentKind::Hbm => &self.hbm,
        }
    }
}

impl<T> IndexMut<ComponentKind> for PerComponent<T> {
    fn index_mut(&mut self, k: ComponentKind) -> &mut T {
        match k {
            ComponentKind::Xcd => &mut self.xcd,
            ComponentKind::Iod => &mut self.iod,
            ComponentKind::Hbm => &mut self.hbm,
        }
    }
}

/// Power parameters of a single component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    /// Always-on floor, watts.
    pub idle_power_w: f64,
    /// Dynamic power at utilization 1 and the reference frequency, watts.
    pub dyn_power_max_w: f64,
    /// Exponent of the `(f / f_ref)` factor on dynamic power.
    #[serde(default)]
    pub freq_exponent: f64,
}

/// Machine description as loaded from `specs/*.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpuSpec {
    #[serde(default)]
    pub name: String,
    pub components: PerComponent<ComponentSpec>,
    pub f_min_mhz: f64,
    pub f_max_mhz: f64,
    pub f_ref_mhz: f64,
    pub tdp_w: f64,
    pub cu_total: u32,
    /// flop/s at `f_max` with every CU.
    pub peak_flops: f64,
    /// bytes/s
    pub hbm_bw: f64,
    /// bytes/s
    pub iod_bw: f64,
    /// Aggregate inter-GPU link bandwidth, bytes/s (sent + received).
    pub link_bw: f64,
    /// Copy issue rate of one CU at `f_ref`, bytes/s.
    pub copy_rate_per_cu: f64,
    pub copy_freq_exponent: f64,
    /// XCD activity of a CU saturated with copy issue, relative to a CU
    /// saturated with matrix math. Zero means copies are free on the XCD.
    #[serde(default)]
    pub copy_xcd_activity: f64,
}

impl GpuSpec {
    pub fn idle_total_w(&self) -> f64 {
        self.components.map(|c| c.idle_power_w).sum()
    }

    /// Peak compute divided by peak HBM bandwidth, flop/byte.
    pub fn machine_balance(&self) -> f64 {
        self.peak_flops / self.hbm_bw
    }
}

/// One broken invariant of a [`GpuSpec`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecViolation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for SpecViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid GPU spec: {}", join_violations(.0))]
    InvalidSpec(Vec<SpecViolation>),
    #[error("utilization {0} outside [0, 1]")]
    Utilization(f64),
    #[error("CU fraction {0} outside (0, 1]")]
    CuFraction(f64),
}

fn join_violations(v: &[SpecViolation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// A spec that passed [`validate_spec`]. The engine accepts nothing else.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ValidatedSpec(GpuSpec);

impl ValidatedSpec {
    pub fn into_inner(self) -> GpuSpec {
        self.0
    }
}

impl Deref for ValidatedSpec {
    type Target = GpuSpec;

    fn deref(&self) -> &GpuSpec {
        &self.0
    }
}

/// Checks every invariant and reports all violations at once.
pub fn validate_spec(spec: GpuSpec) -> Result<ValidatedSpec, ModelError> {
    let mut errs = Vec::new();
    let mut bad = |field: &str, message: &str| {
        errs.push(SpecViolation {
            field: field.to_string(),
            message: message.to_string(),
        })
    };

    for (kind, c) in spec.components.iter() {
        let field = format!("components.{kind}");
        if !(c.idle_power_w >= 0.0 && c.idle_power_w.is_finite()) {
            bad(&field, "idle power must be non-negative");
        }
        if !(c.dyn_power_max_w >= 0.0 && c.dyn_power_max_w.is_finite()) {
            bad(&field, "dynamic power must be non-negative");
        }
        if !(c.freq_exponent >= 0.0 && c.freq_exponent.is_finite()) {
            bad(&field, "frequency exponent must be non-negative");
        }
        if !(c.idle_power_w + c.dyn_power_max_w > 0.0) {
            bad(&field, "component draws no power");
        }
    }

    let (lo, r, hi) = (spec.f_min_mhz, spec.f_ref_mhz, spec.f_max_mhz);
    if !(lo > 0.0 && lo.is_finite() && hi.is_finite()) {
        bad("f_min_mhz", "frequencies must be positive and finite");
    }
    if lo > hi {
        bad("f_min_mhz", "frequency domain inverted");
    }
    if !(lo <= r && r <= hi) {
        bad("f_ref_mhz", "reference frequency outside [f_min, f_max]");
    }
    if !(spec.tdp_w > spec.idle_total_w()) {
        bad("tdp_w", "no dynamic headroom");
    }
    if spec.cu_total < 1 {
        bad("cu_total", "at least one CU required");
    }
    for (field, v) in [
        ("peak_flops", spec.peak_flops),
        ("hbm_bw", spec.hbm_bw),
        ("iod_bw", spec.iod_bw),
        ("link_bw", spec.link_bw),
        ("copy_rate_per_cu", spec.copy_rate_per_cu),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            bad(field, "throughput must be positive");
        }
    }
    if !(0.0..=1.0).contains(&spec.copy_freq_exponent) {
        bad("copy_freq_exponent", "must lie in [0, 1]");
    }
    if !(0.0..=1.0).contains(&spec.copy_xcd_activity) {
        bad("copy_xcd_activity", "must lie in [0, 1]");
    }

    if errs.is_empty() {
        Ok(ValidatedSpec(spec))
    } else {
        Err(ModelError::InvalidSpec(errs))
    }
}

/// Instantaneous power of every component plus the package total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PowerBreakdown {
    pub xcd: f64,
    pub iod: f64,
    pub hbm: f64,
    pub total: f64,
}

impl PowerBreakdown {
    pub fn from_components(p: PerComponent<f64>) -> Self {
        Self {
            xcd: p.xcd,
            iod: p.iod,
            hbm: p.hbm,
            total: p.sum(),
        }
    }

    pub fn components(&self) -> PerComponent<f64> {
        PerComponent::new(self.xcd, self.iod, self.hbm)
    }
}

/// `idle + u * dyn_max * (f / f_ref)^alpha`.
pub fn component_power(cspec: &ComponentSpec, utilization: f64, f_mhz: f64, f_ref_mhz: f64) -> Result<f64, ModelError> {
    if !(0.0..=1.0).contains(&utilization) {
        return Err(ModelError::Utilization(utilization));
    }
    let scale = if cspec.freq_exponent == 0.0 {
        1.0
    } else {
        (f_mhz / f_ref_mhz).powf(cspec.freq_exponent)
    };
    Ok(cspec.idle_power_w + utilization * cspec.dyn_power_max_w * scale)
}

/// Power of all three components at the given utilizations.
pub fn package_power(
    spec: &ValidatedSpec,
    utilization: &PerComponent<f64>,
    f_mhz: f64,
) -> Result<PowerBreakdown, ModelError> {
    let mut p = PerComponent::default();
    for k in ComponentKind::ALL {
        p[k] = component_power(&spec.components[k], utilization[k], f_mhz, spec.f_ref_mhz)?;
    }
    Ok(PowerBreakdown::from_components(p))
}

/// Peak compute throughput with `cu_frac` of the CUs at clock `f_mhz`, flop/s.
pub fn peak_compute_tp(spec: &ValidatedSpec, f_mhz: f64, cu_frac: f64) -> Result<f64, ModelError> {
    if !(cu_frac > 0.0 && cu_frac <= 1.0) {
        return Err(ModelError::CuFraction(cu_frac));
    }
    Ok(spec.peak_flops * (f_mhz / spec.f_max_mhz) * cu_frac)
}
