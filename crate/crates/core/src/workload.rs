//! Kernel descriptors and the resource demands they place on the machine.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gpu_model::{ComponentKind, PerComponent, ValidatedSpec};

/// CUs a collective gets when the scenario does not say otherwise.
pub const DEFAULT_COLLECTIVE_CUS: u32 = 64;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KernelId(pub String);

impl KernelId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for KernelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for KernelId {
    fn from(s: &str) -> Self {
        KernelId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gemm {
    pub m: u64,
    pub n: u64,
    pub k: u64,
    pub dtype_bytes: u32,
    #[serde(default = "one")]
    pub traffic_multiplier: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllGather {
    pub total_bytes: u64,
    pub world_size: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Op {
    Gemm(Gemm),
    AllGather(AllGather),
}

impl Op {
    pub fn is_collective(&self) -> bool {
        matches!(self, Op::AllGather(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criticality {
    Critical,
    Deferrable,
    #[default]
    Unspecified,
}

/// A hinted utilization profile for one slice of a kernel's progress.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseHint {
    /// Share of the kernel's total work covered by this phase.
    pub fraction: f64,
    pub utilization: PerComponent<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelDesc {
    pub id: KernelId,
    pub op: Op,
    #[serde(default)]
    pub criticality: Criticality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affinity_hint: Option<ComponentKind>,
    /// Requested CU allocation. Collectives default to
    /// [`DEFAULT_COLLECTIVE_CUS`]; compute kernels to the remainder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cus: Option<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub phases: Vec<PhaseHint>,
}

impl KernelDesc {
    pub fn new(id: &str, op: Op) -> Self {
        Self {
            id: id.into(),
            op,
            criticality: Criticality::Unspecified,
            affinity_hint: None,
            cus: None,
            phases: Vec::new(),
        }
    }

    pub fn gemm(id: &str, m: u64, n: u64, k: u64) -> Self {
        Self::new(
            id,
            Op::Gemm(Gemm {
                m,
                n,
                k,
                dtype_bytes: 2,
                traffic_multiplier: 1.0,
            }),
        )
    }

    pub fn all_gather(id: &str, total_bytes: u64, world_size: u32) -> Self {
        Self::new(
            id,
            Op::AllGather(AllGather {
                total_bytes,
                world_size,
            }),
        )
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |msg: &str| Err(WorkloadError::InvalidKernel(self.id.clone(), msg.to_string()));
        match self.op {
            Op::Gemm(g) => {
                if g.m == 0 || g.n == 0 || g.k == 0 {
                    return bad("GEMM dimensions must be at least 1");
                }
                if ![1, 2, 4, 8].contains(&g.dtype_bytes) {
                    return bad("dtype_bytes must be 1, 2, 4 or 8");
                }
                if !(g.traffic_multiplier >= 1.0 && g.traffic_multiplier.is_finite()) {
                    return bad("traffic_multiplier must be >= 1");
                }
            }
            Op::AllGather(a) => {
                if a.world_size == 0 {
                    return bad("world_size must be at least 1");
                }
                if a.total_bytes % a.world_size as u64 != 0 {
                    return bad("total_bytes not divisible by world_size");
                }
            }
        }
        if self.cus == Some(0) {
            return bad("cus must be at least 1");
        }
        if !self.phases.is_empty() {
            let total: f64 = self.phases.iter().map(|p| p.fraction).sum();
            if (total - 1.0).abs() > PHASE_SUM_TOL {
                return bad("phase fractions must sum to 1");
            }
            for p in &self.phases {
                if !(p.fraction > 0.0) {
                    return bad("phase fractions must be positive");
                }
                if p.utilization.iter().any(|(_, u)| !(0.0..=1.0).contains(u)) {
                    return bad("phase utilizations must lie in [0, 1]");
                }
            }
        }
        Ok(())
    }

    pub fn demand(&self) -> Result<DemandVector, WorkloadError> {
        match &self.op {
            Op::Gemm(g) => gemm_demand(g).map_err(|e| match e {
                WorkloadError::Overflow(_) => WorkloadError::Overflow(self.id.clone()),
                other => other,
            }),
            Op::AllGather(a) => Ok(allgather_demand(a)),
        }
    }
}

pub(crate) const PHASE_SUM_TOL: f64 = 1e-9;

/// Work a kernel must do: flops on the XCDs and bytes through HBM and IOD.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DemandVector {
    pub flops: f64,
    pub hbm_bytes: f64,
    pub iod_bytes: f64,
}

impl DemandVector {
    pub fn is_empty(&self) -> bool {
        self.flops == 0.0 && self.hbm_bytes == 0.0 && self.iod_bytes == 0.0
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            flops: self.flops * s,
            hbm_bytes: self.hbm_bytes * s,
            iod_bytes: self.iod_bytes * s,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("kernel {0}: {1}")]
    InvalidKernel(KernelId, String),
    #[error("kernel {0}: flop or byte count overflows 64 bits")]
    Overflow(KernelId),
    #[error("arithmetic intensity undefined: no memory traffic")]
    UndefinedIntensity,
}

/// `2mnk` flops; `dtype * (mk + kn + mn) * multiplier` bytes on both HBM and IOD.
pub fn gemm_demand(g: &Gemm) -> Result<DemandVector, WorkloadError> {
    let ovf = || WorkloadError::Overflow(KernelId::from("gemm"));
    let flops = 2u64
        .checked_mul(g.m)
        .and_then(|x| x.checked_mul(g.n))
        .and_then(|x| x.checked_mul(g.k))
        .ok_or_else(ovf)?;
    let mk = g.m.checked_mul(g.k).ok_or_else(ovf)?;
    let kn = g.k.checked_mul(g.n).ok_or_else(ovf)?;
    let mn = g.m.checked_mul(g.n).ok_or_else(ovf)?;
    let elems = mk.checked_add(kn).and_then(|x| x.checked_add(mn)).ok_or_else(ovf)?;
    let ideal = elems.checked_mul(g.dtype_bytes as u64).ok_or_else(ovf)?;
    let bytes = ideal as f64 * g.traffic_multiplier;
    Ok(DemandVector {
        flops: flops as f64,
        hbm_bytes: bytes,
        iod_bytes: bytes,
    })
}

/// Fully connected all-gather: every peer's shard is sent out and every other
/// shard comes in, so `2 * (world - 1) * shard` bytes cross HBM and IOD.
pub fn allgather_demand(a: &AllGather) -> DemandVector {
    let shard = a.total_bytes / a.world_size as u64;
    let sent = (a.world_size as u64 - 1) * shard;
    let moved = (2 * sent) as f64;
    DemandVector {
        flops: 0.0,
        hbm_bytes: moved,
        iod_bytes: moved,
    }
}

/// Flops per HBM byte.
pub fn arithmetic_intensity(d: &DemandVector) -> Result<f64, WorkloadError> {
    if d.hbm_bytes <= 0.0 {
        return Err(WorkloadError::UndefinedIntensity);
    }
    Ok(d.flops / d.hbm_bytes)
}

/// Compute-affine when intensity reaches machine balance, otherwise I/O-die
/// affine. Kernels without memory traffic count as pure compute.
pub fn infer_affinity(d: &DemandVector, spec: &ValidatedSpec) -> ComponentKind {
    if d.flops == 0.0 {
        return ComponentKind::Iod;
    }
    match arithmetic_intensity(d) {
        Ok(ai) if ai < spec.machine_balance() => ComponentKind::Iod,
        _ => ComponentKind::Xcd,
    }
}
