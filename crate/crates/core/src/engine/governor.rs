//! Operating-point evaluation and the TDP frequency governor.

use crate::gpu_model::{package_power, PerComponent, PowerBreakdown, ValidatedSpec};
use crate::policy::ActuatorSettings;

use super::rates::{
    contention_shares, copy_capacity, kernel_duration, kernel_rates, utilizations, Placement, ResourceRates,
};

/// Default bisection tolerance.
pub const GOVERNOR_TOL_MHZ: f64 = 1.0;

/// Actual throughput a kernel achieves at an operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelFlow {
    pub flops_per_s: f64,
    pub hbm_bytes_per_s: f64,
    pub iod_bytes_per_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelOperating {
    pub cus: u32,
    pub rates: ResourceRates,
    /// Time to run the whole demand at these rates.
    pub full_duration: f64,
    /// Roofline utilization relative to the kernel's own rates.
    pub local_util: PerComponent<f64>,
    pub flow: KernelFlow,
    /// This kernel's share of each component's utilization.
    pub contribution: PerComponent<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub f_mhz: f64,
    pub kernels: Vec<KernelOperating>,
    pub utilization: PerComponent<f64>,
    pub power: PowerBreakdown,
}

/// Evaluates every active kernel and the package power at clock `f_mhz`.
pub fn operating_point(spec: &ValidatedSpec, kernels: &[Placement<'_>], f_mhz: f64) -> OperatingPoint {
    let shares = contention_shares(kernels, spec, f_mhz);
    let full_compute = spec.peak_flops * (f_mhz / spec.f_max_mhz);
    let mut total = PerComponent::<f64>::default();
    let ops: Vec<KernelOperating> = kernels
        .iter()
        .zip(&shares)
        .map(|(k, share)| {
            let rates = kernel_rates(k.desc, spec, f_mhz, k.cus, share);
            let full_duration = kernel_duration(&k.demand, 0.0, &rates);
            let local_util = utilizations(&k.demand, &rates);
            let flow = if full_duration > 0.0 && full_duration.is_finite() {
                KernelFlow {
                    flops_per_s: k.demand.flops / full_duration,
                    hbm_bytes_per_s: k.demand.hbm_bytes / full_duration,
                    iod_bytes_per_s: k.demand.iod_bytes / full_duration,
                }
            } else {
                KernelFlow {
                    flops_per_s: 0.0,
                    hbm_bytes_per_s: 0.0,
                    iod_bytes_per_s: 0.0,
                }
            };
            let mut xcd = flow.flops_per_s / full_compute;
            if k.desc.op.is_collective() && flow.iod_bytes_per_s > 0.0 {
                let occupancy = (flow.iod_bytes_per_s / copy_capacity(spec, f_mhz, k.cus)).min(1.0);
                xcd += (k.cus as f64 / spec.cu_total as f64) * spec.copy_xcd_activity * occupancy;
            }
            let contribution = PerComponent::new(
                xcd,
                flow.iod_bytes_per_s / spec.iod_bw,
                flow.hbm_bytes_per_s / spec.hbm_bw,
            );
            total = total.add(&contribution);
            KernelOperating {
                cus: k.cus,
                rates,
                full_duration,
                local_util,
                flow,
                contribution,
            }
        })
        .collect();
    // Aggregates can overshoot 1 by rounding.
    let utilization = total.map(|u| u.clamp(0.0, 1.0));
    let power = package_power(spec, &utilization, f_mhz).expect("utilization clamped to [0, 1]");
    OperatingPoint {
        f_mhz,
        kernels: ops,
        utilization,
        power,
    }
}

/// Attaches CU counts from `settings` to each kernel.
pub fn place<'a>(
    kernels: &[(&'a crate::workload::KernelDesc, crate::workload::DemandVector)],
    settings: &ActuatorSettings,
) -> Vec<Placement<'a>> {
    kernels
        .iter()
        .map(|(desc, demand)| Placement {
            desc,
            demand: *demand,
            cus: settings.cu_alloc.get(&desc.id).copied().unwrap_or(1),
        })
        .collect()
}

/// Largest clock in `[f_min, min(f_max, freq_cap)]` whose package power stays
/// within the power cap, to `tol_mhz`. Never goes below `f_min`.
///
/// The power limit is bisected over the fixed bracket `[f_min, f_max]` and the
/// frequency cap applied afterwards, so the result is monotone in both caps.
pub fn solve_frequency(
    spec: &ValidatedSpec,
    kernels: &[Placement<'_>],
    settings: &ActuatorSettings,
    tol_mhz: f64,
) -> f64 {
    let fits = |f: f64| operating_point(spec, kernels, f).power.total <= settings.power_cap_w;
    let cap = spec.f_max_mhz.min(settings.freq_cap_mhz).max(spec.f_min_mhz);
    let (mut lo, mut hi) = (spec.f_min_mhz, spec.f_max_mhz);
    if fits(hi) || !fits(lo) {
        return if fits(hi) { cap } else { lo };
    }
    while hi - lo > tol_mhz {
        let mid = 0.5 * (lo + hi);
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo.min(cap)
}

/// Solves the clock and returns the operating point there.
pub fn govern(
    spec: &ValidatedSpec,
    kernels: &[Placement<'_>],
    settings: &ActuatorSettings,
    tol_mhz: f64,
) -> OperatingPoint {
    let f = solve_frequency(spec, kernels, settings, tol_mhz);
    operating_point(spec, kernels, f)
}
