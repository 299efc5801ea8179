//! Fixed-step simulation loop.

use serde::{Deserialize, Serialize};

use crate::gpu_model::{PerComponent, PowerBreakdown, ValidatedSpec};
use crate::policy::{apply_policy, phase_boundaries, ActiveView, AffinityHistory, PolicyConfig, Snapshot};
use crate::scenario::Scenario;
use crate::workload::{DemandVector, KernelDesc, KernelId, Op};

use super::governor::{govern, place, KernelFlow};
use super::EngineError;

/// Achieved throughput of one kernel during a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleFlow {
    pub id: KernelId,
    pub flow: KernelFlow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerSample {
    pub t_s: f64,
    pub f_mhz: f64,
    pub power: PowerBreakdown,
    pub active: Vec<KernelId>,
    pub utilization: PerComponent<f64>,
    pub freq_cap_mhz: f64,
    pub power_cap_w: f64,
    pub flows: Vec<SampleFlow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Gemm,
    #[serde(alias = "communication")]
    Comm,
    Other,
}

impl Category {
    pub fn of(op: &Op) -> Self {
        match op {
            Op::Gemm(_) => Category::Gemm,
            Op::AllGather(_) => Category::Comm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelTimeline {
    pub id: KernelId,
    pub stream: usize,
    pub iteration: u32,
    pub category: Category,
    pub start_s: f64,
    pub end_s: f64,
}

/// Samples are piecewise constant: sample `i` holds from its `t_s` until the
/// next sample (or the makespan for the last one). Steps are `dt_s` long
/// except where a kernel completes or changes phase mid-step.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub dt_s: f64,
    pub samples: Vec<PowerSample>,
    pub timelines: Vec<KernelTimeline>,
    pub makespan_s: f64,
    pub warnings: Vec<String>,
}

impl SimTrace {
    pub fn width(&self, i: usize) -> f64 {
        let end = self.samples.get(i + 1).map_or(self.makespan_s, |s| s.t_s);
        end - self.samples[i].t_s
    }

    pub fn timeline(&self, id: &str) -> Option<&KernelTimeline> {
        self.timelines.iter().find(|k| k.id.as_str() == id)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: SimTrace,
    pub history: AffinityHistory,
}

struct Running {
    desc: KernelDesc,
    demand: DemandVector,
    progress: f64,
    start_s: f64,
    boundaries: Vec<f64>,
    util_time: PerComponent<f64>,
    busy_s: f64,
}

struct Stream {
    kernels: Vec<(KernelDesc, DemandVector)>,
    next: usize,
    running: Option<Running>,
}

/// Mutable simulation state, advanced one step at a time.
pub struct SimState {
    spec: ValidatedSpec,
    policy: PolicyConfig,
    tol_mhz: f64,
    dt: f64,
    iterations: u32,
    iteration: u32,
    streams: Vec<Stream>,
    history: AffinityHistory,
    t: f64,
    grid: u64,
    trace: SimTrace,
}

impl SimState {
    pub fn new(scenario: &Scenario) -> Result<Self, EngineError> {
        let streams = scenario
            .streams
            .iter()
            .map(|s| {
                let kernels = s
                    .iter()
                    .map(|k| Ok((k.clone(), k.demand()?)))
                    .collect::<Result<Vec<_>, EngineError>>()?;
                Ok(Stream {
                    kernels,
                    next: 0,
                    running: None,
                })
            })
            .collect::<Result<Vec<_>, EngineError>>()?;
        Ok(Self {
            spec: scenario.spec.clone(),
            policy: scenario.policy.clone(),
            tol_mhz: scenario.governor_tol_mhz,
            dt: scenario.dt_s,
            iterations: scenario.iterations.max(1),
            iteration: 0,
            streams,
            history: AffinityHistory::default(),
            t: 0.0,
            grid: 0,
            trace: SimTrace {
                dt_s: scenario.dt_s,
                samples: Vec::new(),
                timelines: Vec::new(),
                makespan_s: 0.0,
                warnings: Vec::new(),
            },
        })
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn trace(&self) -> &SimTrace {
        &self.trace
    }

    fn learning_rate(&self) -> Option<f64> {
        match self.policy {
            PolicyConfig::CompPowAuto(a) => Some(a.ewma_lambda),
            _ => None,
        }
    }

    fn finish_kernel(&mut self, stream: usize, end_s: f64) {
        let lambda = self.learning_rate();
        let st = &mut self.streams[stream];
        let r = st.running.take().expect("finishing a running kernel");
        st.next += 1;
        if let Some(lambda) = lambda {
            if r.busy_s > 0.0 {
                self.history
                    .observe(&r.desc.id, r.util_time.scale(1.0 / r.busy_s), lambda);
            }
        }
        self.trace.timelines.push(KernelTimeline {
            id: r.desc.id.clone(),
            stream,
            iteration: self.iteration,
            category: Category::of(&r.desc.op),
            start_s: r.start_s,
            end_s,
        });
    }

    /// Starts every kernel whose predecessor in its stream has finished,
    /// rolling over to the next iteration when all streams drain.
    fn launch(&mut self) {
        loop {
            for i in 0..self.streams.len() {
                loop {
                    let st = &mut self.streams[i];
                    if st.running.is_some() || st.next >= st.kernels.len() {
                        break;
                    }
                    let (desc, demand) = st.kernels[st.next].clone();
                    let empty = demand.is_empty();
                    st.running = Some(Running {
                        boundaries: phase_boundaries(&desc.phases),
                        desc,
                        demand,
                        progress: 0.0,
                        start_s: self.t,
                        util_time: PerComponent::default(),
                        busy_s: 0.0,
                    });
                    if !empty {
                        break;
                    }
                    self.finish_kernel(i, self.t);
                }
            }
            let drained = self
                .streams
                .iter()
                .all(|s| s.running.is_none() && s.next >= s.kernels.len());
            if drained && self.iteration + 1 < self.iterations {
                self.iteration += 1;
                for s in &mut self.streams {
                    s.next = 0;
                }
                continue;
            }
            break;
        }
    }

    /// Advances one control step. Returns `false` once every kernel of every
    /// iteration has completed.
    pub fn step(&mut self) -> Result<bool, EngineError> {
        self.launch();
        let running: Vec<usize> = (0..self.streams.len())
            .filter(|&i| self.streams[i].running.is_some())
            .collect();

        let kernels: Vec<(&KernelDesc, DemandVector)> = running
            .iter()
            .map(|&i| {
                let r = self.streams[i].running.as_ref().unwrap();
                (&r.desc, r.demand)
            })
            .collect();
        let snapshot = Snapshot {
            spec: &self.spec,
            active: running
                .iter()
                .map(|&i| {
                    let r = self.streams[i].running.as_ref().unwrap();
                    ActiveView {
                        desc: &r.desc,
                        demand: r.demand,
                        progress: r.progress,
                    }
                })
                .collect(),
        };
        let decision = apply_policy(&self.policy, &snapshot, &self.history);
        let ids: Vec<&KernelId> = kernels.iter().map(|(d, _)| &d.id).collect();
        decision.settings.check(&self.spec, &ids)?;
        let placements = place(&kernels, &decision.settings);
        let op = govern(&self.spec, &placements, &decision.settings, self.tol_mhz);

        if running.is_empty() {
            if self.trace.samples.is_empty() {
                self.trace.samples.push(PowerSample {
                    t_s: self.t,
                    f_mhz: op.f_mhz,
                    power: op.power,
                    active: Vec::new(),
                    utilization: op.utilization,
                    freq_cap_mhz: decision.settings.freq_cap_mhz,
                    power_cap_w: decision.settings.power_cap_w,
                    flows: Vec::new(),
                });
            }
            self.trace.makespan_s = self.t;
            return Ok(false);
        }

        if let Some(w) = decision.warning {
            if !self.trace.warnings.contains(&w) {
                self.trace.warnings.push(w);
            }
        }

        // Candidate step ends: next grid point, completions, phase boundaries.
        let grid_next = (self.grid + 1) as f64 * self.dt;
        let mut h = grid_next - self.t;
        let mut events = Vec::with_capacity(running.len());
        for (slot, &i) in running.iter().enumerate() {
            let r = self.streams[i].running.as_ref().unwrap();
            let full = op.kernels[slot].full_duration;
            if !(full.is_finite() && full > 0.0) {
                return Err(EngineError::Stall(r.desc.id.clone()));
            }
            let remaining = (1.0 - r.progress) * full;
            let boundary = r
                .boundaries
                .iter()
                .find(|&&b| b > r.progress)
                .map(|&b| ((b - r.progress) * full, b));
            h = h.min(remaining);
            if let Some((tb, _)) = boundary {
                h = h.min(tb);
            }
            events.push((full, remaining, boundary));
        }

        self.trace.samples.push(PowerSample {
            t_s: self.t,
            f_mhz: op.f_mhz,
            power: op.power,
            active: kernels.iter().map(|(d, _)| d.id.clone()).collect(),
            utilization: op.utilization,
            freq_cap_mhz: decision.settings.freq_cap_mhz,
            power_cap_w: decision.settings.power_cap_w,
            flows: kernels
                .iter()
                .zip(&op.kernels)
                .map(|((d, _), k)| SampleFlow {
                    id: d.id.clone(),
                    flow: k.flow,
                })
                .collect(),
        });

        let t_end = if h >= grid_next - self.t {
            self.grid += 1;
            grid_next
        } else {
            self.t + h
        };

        let mut finished = Vec::new();
        for (slot, &i) in running.iter().enumerate() {
            let (full, remaining, boundary) = events[slot];
            let r = self.streams[i].running.as_mut().unwrap();
            r.util_time = r.util_time.add(&op.kernels[slot].contribution.scale(h));
            r.busy_s += h;
            if remaining <= h {
                r.progress = 1.0;
                finished.push(i);
            } else if let Some((_, b)) = boundary.filter(|&(tb, _)| tb <= h) {
                r.progress = b;
            } else {
                r.progress = (r.progress + h / full).min(1.0);
            }
        }
        self.t = t_end;
        for i in finished {
            self.finish_kernel(i, t_end);
        }
        Ok(true)
    }

    pub fn into_output(mut self) -> RunOutput {
        self.trace.makespan_s = self.t;
        RunOutput {
            trace: self.trace,
            history: self.history,
        }
    }
}

/// Runs a scenario to completion.
pub fn run(scenario: &Scenario) -> Result<RunOutput, EngineError> {
    let mut sim = SimState::new(scenario)?;
    while sim.step()? {}
    Ok(sim.into_output())
}
