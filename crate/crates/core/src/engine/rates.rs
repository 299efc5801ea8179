//! Roofline rates, bandwidth contention and per-kernel utilization.

use crate::gpu_model::{peak_compute_tp, PerComponent, ValidatedSpec};
use crate::workload::{DemandVector, KernelDesc};

/// Throughput available to one kernel on each resource.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResourceRates {
    /// flop/s
    pub compute: f64,
    /// bytes/s
    pub hbm: f64,
    /// bytes/s
    pub iod: f64,
}

/// A kernel's slice of one byte resource.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandwidthShare {
    /// Fraction of the kernel's unconstrained demand rate that is granted.
    pub fraction: f64,
    /// Bandwidth ceiling handed to the kernel, bytes/s.
    pub granted: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelShares {
    pub hbm: BandwidthShare,
    pub iod: BandwidthShare,
}

impl KernelShares {
    /// No contention: the full peak of both resources.
    pub fn full(spec: &ValidatedSpec) -> Self {
        Self {
            hbm: BandwidthShare {
                fraction: 1.0,
                granted: spec.hbm_bw,
            },
            iod: BandwidthShare {
                fraction: 1.0,
                granted: spec.iod_bw,
            },
        }
    }
}

/// A kernel placed on the machine with its CU allocation.
#[derive(Debug, Clone, Copy)]
pub struct Placement<'a> {
    pub desc: &'a KernelDesc,
    pub demand: DemandVector,
    pub cus: u32,
}

/// Copy issue ceiling of `cus` CUs at `f_mhz`, bytes/s.
pub fn copy_capacity(spec: &ValidatedSpec, f_mhz: f64, cus: u32) -> f64 {
    cus as f64 * spec.copy_rate_per_cu * (f_mhz / spec.f_ref_mhz).powf(spec.copy_freq_exponent)
}

pub fn kernel_rates(
    desc: &KernelDesc,
    spec: &ValidatedSpec,
    f_mhz: f64,
    cus: u32,
    share: &KernelShares,
) -> ResourceRates {
    let cu_frac = (cus as f64 / spec.cu_total as f64).min(1.0);
    let compute = peak_compute_tp(spec, f_mhz, cu_frac).unwrap_or(0.0);
    let mut hbm = share.hbm.granted;
    let mut iod = share.iod.granted;
    if desc.op.is_collective() {
        let cap = spec.link_bw.min(copy_capacity(spec, f_mhz, cus));
        hbm = hbm.min(cap);
        iod = iod.min(cap);
    }
    ResourceRates { compute, hbm, iod }
}

fn terms(d: &DemandVector, r: &ResourceRates) -> [f64; 3] {
    let t = |work: f64, rate: f64| if work > 0.0 { work / rate } else { 0.0 };
    [t(d.flops, r.compute), t(d.hbm_bytes, r.hbm), t(d.iod_bytes, r.iod)]
}

/// Time to finish the remaining `1 - progress` of the demand. Infinite when a
/// resource the kernel needs has zero rate.
pub fn kernel_duration(demand: &DemandVector, progress: f64, rates: &ResourceRates) -> f64 {
    let t = terms(demand, rates);
    let bottleneck = t[0].max(t[1]).max(t[2]);
    (1.0 - progress) * bottleneck
}

/// Each resource's busy time divided by the bottleneck time. The bottleneck
/// reads exactly 1.
pub fn utilizations(demand: &DemandVector, rates: &ResourceRates) -> PerComponent<f64> {
    let [tc, th, ti] = terms(demand, rates);
    let bottleneck = tc.max(th).max(ti);
    if !(bottleneck > 0.0) || !bottleneck.is_finite() {
        return PerComponent::default();
    }
    PerComponent::new(tc / bottleneck, ti / bottleneck, th / bottleneck)
}

/// Proportional fair share of HBM and IOD bandwidth at clock `f_mhz`.
pub fn contention_shares(kernels: &[Placement<'_>], spec: &ValidatedSpec, f_mhz: f64) -> Vec<KernelShares> {
    let full = KernelShares::full(spec);
    let demand_rates: Vec<(f64, f64)> = kernels
        .iter()
        .map(|k| {
            let rates = kernel_rates(k.desc, spec, f_mhz, k.cus, &full);
            let t = kernel_duration(&k.demand, 0.0, &rates);
            if t > 0.0 && t.is_finite() {
                (k.demand.hbm_bytes / t, k.demand.iod_bytes / t)
            } else {
                (0.0, 0.0)
            }
        })
        .collect();

    let split = |peak: f64, pick: fn(&(f64, f64)) -> f64| -> Vec<BandwidthShare> {
        let total: f64 = demand_rates.iter().map(pick).sum();
        if total <= peak {
            return vec![
                BandwidthShare {
                    fraction: 1.0,
                    granted: peak
                };
                demand_rates.len()
            ];
        }
        let fraction = peak / total;
        demand_rates
            .iter()
            .map(|d| BandwidthShare {
                fraction,
                granted: fraction * pick(d),
            })
            .collect()
    };
    let hbm = split(spec.hbm_bw, |d| d.0);
    let iod = split(spec.iod_bw, |d| d.1);
    hbm.into_iter()
        .zip(iod)
        .map(|(hbm, iod)| KernelShares { hbm, iod })
        .collect()
}
