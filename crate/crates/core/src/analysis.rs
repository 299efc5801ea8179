//! Post-run analytics: energy integration, savings and loss, correlation and
//! exposed/overlapped execution accounting.

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Category, SimTrace};
use crate::gpu_model::PowerBreakdown;
use crate::workload::{KernelDesc, KernelId, WorkloadError};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least two points, got {0}")]
    TooFewPoints(usize),
    #[error("correlation undefined: series is constant")]
    ConstantSeries,
    #[error("cannot normalize by a zero reference")]
    ZeroReference,
    #[error("overlapping intervals in stream {0}")]
    OverlappingIntervals(String),
    #[error("interval [{start}, {end}] in stream {stream} lies outside [0, {makespan}]")]
    OutOfRange {
        stream: String,
        start: f64,
        end: f64,
        makespan: f64,
    },
    #[error("intervals: {0}")]
    Csv(String),
}

/// Energy, duration and average power of one kernel's execution window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelMetrics {
    pub id: KernelId,
    pub stream: usize,
    pub iteration: u32,
    pub start_s: f64,
    pub end_s: f64,
    pub duration_s: f64,
    /// Package energy drawn while this kernel ran, including whatever ran
    /// beside it.
    pub window_energy_j: PowerBreakdown,
    pub window_avg_power_w: PowerBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub energy_j: PowerBreakdown,
    pub makespan_s: f64,
    pub avg_power_w: PowerBreakdown,
    pub overlap: OverlapReport,
    pub kernels: Vec<KernelMetrics>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl Metrics {
    pub fn kernel(&self, id: &str) -> Option<&KernelMetrics> {
        self.kernels.iter().find(|k| k.id.as_str() == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OverlapFractions {
    pub gemm_only: f64,
    pub comm_only: f64,
    pub other: f64,
    pub overlapped: f64,
    pub idle: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OverlapReport {
    pub gemm_only_s: f64,
    pub comm_only_s: f64,
    pub other_s: f64,
    pub overlapped_s: f64,
    pub idle_s: f64,
    pub makespan_s: f64,
    /// Time during which each stream ran alone.
    pub exposed_by_stream_s: BTreeMap<String, f64>,
    pub fraction: OverlapFractions,
}

impl OverlapReport {
    pub fn total_s(&self) -> f64 {
        self.gemm_only_s + self.comm_only_s + self.other_s + self.overlapped_s + self.idle_s
    }
}

/// A busy interval on one stream, as exported by a profiler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub stream: String,
    pub category: Category,
    pub start_s: f64,
    pub end_s: f64,
}

/// Time-weighted average of sample power over the samples selected by `keep`.
/// Returns `None` when no time is selected.
pub fn window_average(trace: &SimTrace, mut keep: impl FnMut(usize) -> bool) -> Option<PowerBreakdown> {
    let mut e = [0.0; 3];
    let mut t = 0.0;
    for i in 0..trace.samples.len() {
        if !keep(i) {
            continue;
        }
        let w = trace.width(i);
        let p = &trace.samples[i].power;
        e[0] += p.xcd * w;
        e[1] += p.iod * w;
        e[2] += p.hbm * w;
        t += w;
    }
    (t > 0.0).then(|| breakdown(e[0] / t, e[1] / t, e[2] / t))
}

/// Average power over every sample where at least two kernels run.
pub fn overlap_window_average(trace: &SimTrace) -> Option<PowerBreakdown> {
    window_average(trace, |i| trace.samples[i].active.len() >= 2)
}

fn breakdown(xcd: f64, iod: f64, hbm: f64) -> PowerBreakdown {
    PowerBreakdown {
        xcd,
        iod,
        hbm,
        total: xcd + iod + hbm,
    }
}

fn integrate(trace: &SimTrace, range: std::ops::Range<usize>) -> PowerBreakdown {
    let (mut x, mut i, mut h) = (0.0, 0.0, 0.0);
    for k in range {
        let w = trace.width(k);
        let p = &trace.samples[k].power;
        x += p.xcd * w;
        i += p.iod * w;
        h += p.hbm * w;
    }
    breakdown(x, i, h)
}

fn average(e: &PowerBreakdown, t: f64) -> PowerBreakdown {
    if t > 0.0 {
        breakdown(e.xcd / t, e.iod / t, e.hbm / t)
    } else {
        PowerBreakdown::default()
    }
}

/// Index range of samples starting inside `[start, end)`.
fn sample_range(trace: &SimTrace, start: f64, end: f64) -> std::ops::Range<usize> {
    let a = trace.samples.partition_point(|s| s.t_s < start);
    let b = trace.samples.partition_point(|s| s.t_s < end);
    a..b.max(a)
}

/// Rectangle-rule integration of a power trace, plus per-kernel windows and
/// overlap accounting of the kernel timelines.
pub fn energy(trace: &SimTrace) -> Metrics {
    let energy_j = integrate(trace, 0..trace.samples.len());
    let makespan_s = trace.makespan_s;
    let kernels = trace
        .timelines
        .iter()
        .map(|k| {
            let e = integrate(trace, sample_range(trace, k.start_s, k.end_s));
            let d = k.end_s - k.start_s;
            KernelMetrics {
                id: k.id.clone(),
                stream: k.stream,
                iteration: k.iteration,
                start_s: k.start_s,
                end_s: k.end_s,
                duration_s: d,
                window_avg_power_w: average(&e, d),
                window_energy_j: e,
            }
        })
        .collect();
    let intervals: Vec<Interval> = trace
        .timelines
        .iter()
        .map(|k| Interval {
            stream: k.stream.to_string(),
            category: k.category,
            start_s: k.start_s,
            end_s: k.end_s,
        })
        .collect();
    let overlap = overlap_accounting(&intervals, makespan_s).expect("simulated streams run kernels in order");
    Metrics {
        avg_power_w: average(&energy_j, makespan_s),
        energy_j,
        makespan_s,
        overlap,
        kernels,
        warnings: trace.warnings.clone(),
    }
}

/// `(savings %, loss %)` of `variant` relative to `base`. Negative loss is a
/// speedup.
pub fn savings_and_loss(base: &Metrics, variant: &Metrics) -> (f64, f64) {
    savings_and_loss_raw(
        base.energy_j.total,
        variant.energy_j.total,
        base.makespan_s,
        variant.makespan_s,
    )
}

pub fn savings_and_loss_raw(e_base: f64, e_var: f64, t_base: f64, t_var: f64) -> (f64, f64) {
    ((e_base - e_var) / e_base * 100.0, (t_var - t_base) / t_base * 100.0)
}

pub fn normalize(series: &[f64], reference: f64) -> Result<Vec<f64>, AnalysisError> {
    if reference == 0.0 {
        return Err(AnalysisError::ZeroReference);
    }
    Ok(series.iter().map(|v| v / reference).collect())
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, AnalysisError> {
    if xs.len() != ys.len() {
        return Err(AnalysisError::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < 2 {
        return Err(AnalysisError::TooFewPoints(n));
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalysisError::ConstantSeries);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Splits `[0, makespan]` into idle, exposed (exactly one stream busy, by that
/// stream's category) and overlapped (two or more streams busy) time.
pub fn overlap_accounting(intervals: &[Interval], makespan_s: f64) -> Result<OverlapReport, AnalysisError> {
    let mut by_stream: BTreeMap<&str, Vec<&Interval>> = BTreeMap::new();
    for iv in intervals {
        if !(iv.start_s >= 0.0 && iv.start_s <= iv.end_s && iv.end_s <= makespan_s) {
            return Err(AnalysisError::OutOfRange {
                stream: iv.stream.clone(),
                start: iv.start_s,
                end: iv.end_s,
                makespan: makespan_s,
            });
        }
        by_stream.entry(&iv.stream).or_default().push(iv);
    }
    for (name, list) in &mut by_stream {
        list.retain(|iv| iv.end_s > iv.start_s);
        list.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        if list.windows(2).any(|w| w[1].start_s < w[0].end_s) {
            return Err(AnalysisError::OverlappingIntervals(name.to_string()));
        }
    }

    // Events: (time, is_start, stream index, category). Ends sort before
    // starts so touching intervals never count as overlapping.
    let names: Vec<&str> = by_stream.keys().copied().collect();
    let mut events: Vec<(f64, bool, usize, Category)> = Vec::new();
    for (si, list) in by_stream.values().enumerate() {
        for iv in list {
            events.push((iv.start_s, true, si, iv.category));
            events.push((iv.end_s, false, si, iv.category));
        }
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut rep = OverlapReport {
        makespan_s,
        exposed_by_stream_s: names.iter().map(|n| (n.to_string(), 0.0)).collect(),
        ..Default::default()
    };
    let mut active: Vec<Option<Category>> = vec![None; names.len()];
    let mut n_active = 0usize;
    let mut t = 0.0;
    let credit = |rep: &mut OverlapReport, active: &[Option<Category>], n: usize, len: f64| {
        if len <= 0.0 {
            return;
        }
        match n {
            0 => rep.idle_s += len,
            1 => {
                let (si, cat) = active
                    .iter()
                    .enumerate()
                    .find_map(|(i, c)| c.map(|c| (i, c)))
                    .expect("one active stream");
                *rep.exposed_by_stream_s.get_mut(names[si]).unwrap() += len;
                match cat {
                    Category::Gemm => rep.gemm_only_s += len,
                    Category::Comm => rep.comm_only_s += len,
                    Category::Other => rep.other_s += len,
                }
            }
            _ => rep.overlapped_s += len,
        }
    };
    for (time, is_start, si, cat) in events {
        credit(&mut rep, &active, n_active, time - t);
        t = t.max(time);
        if is_start {
            active[si] = Some(cat);
            n_active += 1;
        } else {
            active[si] = None;
            n_active -= 1;
        }
    }
    credit(&mut rep, &active, n_active, makespan_s - t);

    if makespan_s > 0.0 {
        let f = |s: f64| s / makespan_s;
        rep.fraction = OverlapFractions {
            gemm_only: f(rep.gemm_only_s),
            comm_only: f(rep.comm_only_s),
            other: f(rep.other_s),
            overlapped: f(rep.overlapped_s),
            idle: f(rep.idle_s),
        };
    }
    Ok(rep)
}

/// Reads `stream,category,start_s,end_s` rows.
pub fn read_intervals(reader: impl Read) -> Result<Vec<Interval>, AnalysisError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| AnalysisError::Csv(format!("row {}: {e}", i + 1))))
        .collect()
}

/// Per-kernel relative error between the work a kernel was credited with
/// (sum of achieved flow times sample width over its window) and its demand.
/// The largest error over flops, HBM and IOD bytes is reported.
pub fn work_conservation(trace: &SimTrace, kernels: &[KernelDesc]) -> Result<Vec<(KernelId, u32, f64)>, WorkloadError> {
    let mut out = Vec::with_capacity(trace.timelines.len());
    for tl in &trace.timelines {
        let Some(desc) = kernels.iter().find(|k| k.id == tl.id) else {
            continue;
        };
        let demand = desc.demand()?;
        let (mut fl, mut hb, mut io) = (0.0, 0.0, 0.0);
        for i in sample_range(trace, tl.start_s, tl.end_s) {
            let w = trace.width(i);
            if let Some(f) = trace.samples[i].flows.iter().find(|f| f.id == tl.id) {
                fl += f.flow.flops_per_s * w;
                hb += f.flow.hbm_bytes_per_s * w;
                io += f.flow.iod_bytes_per_s * w;
            }
        }
        let rel = |got: f64, want: f64| {
            if want > 0.0 {
                (got - want).abs() / want
            } else {
                got.abs()
            }
        };
        let err = rel(fl, demand.flops)
            .max(rel(hb, demand.hbm_bytes))
            .max(rel(io, demand.iod_bytes));
        out.push((tl.id.clone(), tl.iteration, err));
    }
    Ok(out)
}

/// Appends `b` after `a`, shifting `b` by `a`'s makespan.
pub fn concat_traces(a: &SimTrace, b: &SimTrace) -> SimTrace {
    let shift = a.makespan_s;
    let mut out = a.clone();
    out.samples.extend(b.samples.iter().cloned().map(|mut s| {
        s.t_s += shift;
        s
    }));
    out.timelines.extend(b.timelines.iter().cloned().map(|mut k| {
        k.start_s += shift;
        k.end_s += shift;
        k.stream += a.timelines.iter().map(|k| k.stream + 1).max().unwrap_or(0);
        k
    }));
    out.makespan_s = shift + b.makespan_s;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::PowerSample;
    use crate::gpu_model::PerComponent;
    use proptest::prelude::*;

    fn iv(stream: &str, category: Category, start_s: f64, end_s: f64) -> Interval {
        Interval {
            stream: stream.into(),
            category,
            start_s,
            end_s,
        }
    }

    fn sample(t_s: f64, w: f64) -> PowerSample {
        PowerSample {
            t_s,
            f_mhz: 2100.0,
            power: breakdown(w, 0.0, 0.0),
            active: Vec::new(),
            utilization: PerComponent::default(),
            freq_cap_mhz: 2100.0,
            power_cap_w: 750.0,
            flows: Vec::new(),
        }
    }

    fn trace(samples: Vec<PowerSample>, makespan_s: f64, dt_s: f64) -> SimTrace {
        SimTrace {
            dt_s,
            samples,
            timelines: Vec::new(),
            makespan_s,
            warnings: Vec::new(),
        }
    }

    #[test]
    fn energy_examples() {
        let t = trace((0..4).map(|i| sample(i as f64 * 0.5, 100.0)).collect(), 2.0, 0.5);
        assert_eq!(energy(&t).energy_j.total, 200.0);

        let t = trace(vec![sample(0.0, 100.0), sample(1.0, 200.0)], 2.0, 1.0);
        assert_eq!(energy(&t).energy_j.total, 300.0);

        // 0.1 s steps, the last cut to 0.03 s: 10*0.1 + 20*0.1 + 40*0.03.
        let t = trace(vec![sample(0.0, 10.0), sample(0.1, 20.0), sample(0.2, 40.0)], 0.23, 0.1);
        assert!((energy(&t).energy_j.total - 4.2).abs() < 1e-12);

        let m = energy(&trace(Vec::new(), 0.0, 0.1));
        assert_eq!((m.energy_j.total, m.makespan_s), (0.0, 0.0));
    }

    #[test]
    fn savings_examples() {
        assert_eq!(savings_and_loss_raw(100.0, 90.0, 1.0, 1.01).0, 10.0);
        assert!((savings_and_loss_raw(100.0, 90.0, 1.0, 1.01).1 - 1.0).abs() < 1e-9);
        assert_eq!(savings_and_loss_raw(7.0, 7.0, 3.0, 3.0), (0.0, 0.0));
        let (s, l) = savings_and_loss_raw(100.0, 103.0, 1.0, 0.96);
        assert!((s + 3.0).abs() < 1e-9 && (l + 4.0).abs() < 1e-9);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(&[2.0, 4.0], 2.0).unwrap(), vec![1.0, 2.0]);
        assert_eq!(normalize(&[3.0, 3.0], 3.0).unwrap(), vec![1.0, 1.0]);
        assert_eq!(normalize(&[1.0], 0.0), Err(AnalysisError::ZeroReference));
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1., 2., 3.], &[2., 4., 6.]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1., 2., 3.], &[3., 2., 1.]).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson(&[1., 2., 3.], &[1., 3., 2.]).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(
            pearson(&[1., 1., 1.], &[1., 2., 3.]),
            Err(AnalysisError::ConstantSeries)
        );
    }

    #[test]
    fn overlap_examples() {
        let r = overlap_accounting(
            &[iv("A", Category::Gemm, 0.0, 10.0), iv("B", Category::Comm, 5.0, 12.0)],
            12.0,
        )
        .unwrap();
        assert_eq!(
            (r.gemm_only_s, r.comm_only_s, r.overlapped_s, r.idle_s),
            (5.0, 2.0, 5.0, 0.0)
        );
        assert_eq!(r.exposed_by_stream_s["A"], 5.0);
        assert_eq!(r.exposed_by_stream_s["B"], 2.0);

        let r = overlap_accounting(
            &[iv("A", Category::Gemm, 0.0, 5.0), iv("B", Category::Comm, 5.0, 10.0)],
            10.0,
        )
        .unwrap();
        assert_eq!(r.overlapped_s, 0.0);

        let r = overlap_accounting(
            &[iv("A", Category::Gemm, 1.0, 4.0), iv("B", Category::Comm, 1.0, 4.0)],
            4.0,
        )
        .unwrap();
        assert_eq!(
            (r.overlapped_s, r.gemm_only_s, r.comm_only_s, r.idle_s),
            (3.0, 0.0, 0.0, 1.0)
        );
    }

    #[test]
    fn overlapping_within_stream_rejected() {
        let e = overlap_accounting(
            &[iv("A", Category::Gemm, 0.0, 5.0), iv("A", Category::Comm, 4.0, 6.0)],
            6.0,
        );
        assert_eq!(e, Err(AnalysisError::OverlappingIntervals("A".into())));
    }

    #[test]
    fn reads_interval_csv() {
        let text = "stream,category,start_s,end_s\nA,gemm,0,1.5\nB, comm ,1,2\nC,other,0,0.5\n";
        let v = read_intervals(text.as_bytes()).unwrap();
        assert_eq!(v[1], iv("B", Category::Comm, 1.0, 2.0));
        assert!(read_intervals("stream,category,start_s,end_s\nA,matmul,0,1\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn pearson_affine_invariant(
            xs in prop::collection::vec(-100.0f64..100.0, 3..12),
            a in 0.1f64..10.0, b in -50.0f64..50.0,
        ) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * x + i as f64).collect();
            let Ok(r) = pearson(&xs, &ys) else { return Ok(()) };
            let xs2: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            prop_assert!((pearson(&xs2, &ys).unwrap() - r).abs() < 1e-9);
            let xs3: Vec<f64> = xs.iter().map(|x| -a * x + b).collect();
            prop_assert!((pearson(&xs3, &ys).unwrap() + r).abs() < 1e-9);
        }

        #[test]
        fn savings_of_self_is_zero(e in 1e-3f64..1e6, t in 1e-6f64..1e3) {
            prop_assert_eq!(savings_and_loss_raw(e, e, t, t), (0.0, 0.0));
        }

        #[test]
        fn overlap_partitions_makespan(
            raw in prop::collection::vec((0usize..3, 0.0f64..50.0, 0.0f64..5.0), 0..20),
        ) {
            // Build non-overlapping per-stream lists from (stream, gap, length).
            let mut cursor = [0.0f64; 3];
            let mut ivs = Vec::new();
            for (s, gap, len) in raw {
                let start = cursor[s] + gap;
                let end = start + len;
                cursor[s] = end;
                let cat = [Category::Gemm, Category::Comm, Category::Other][s];
                ivs.push(iv(&s.to_string(), cat, start, end));
            }
            let mk = cursor.iter().cloned().fold(0.0, f64::max) + 1.0;
            let r = overlap_accounting(&ivs, mk).unwrap();
            prop_assert!((r.total_s() - mk).abs() <= 1e-9 * mk);
            for v in [r.gemm_only_s, r.comm_only_s, r.other_s, r.overlapped_s, r.idle_s] {
                prop_assert!(v >= 0.0);
            }
        }
    }
}
