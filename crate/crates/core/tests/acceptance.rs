//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use comppow::analysis::{
    concat_traces, energy, overlap_accounting, overlap_window_average, pearson, work_conservation, Interval,
};
use comppow::engine::{operating_point, solve_frequency, Category, Placement};
use comppow::experiment::{compare, run_scenario, trace_csv, Comparison, RunResult};
use comppow::gpu_model::{ComponentSpec, PerComponent};
use comppow::policy::ActuatorSettings;
use comppow::{validate_spec, Exec, GpuSpec, KernelDesc, Scenario};

use common::{load, shipped, CONCURRENT, GEMMS};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn cmp(base: &str, variant: &str) -> Comparison {
    compare(&load(base), &load(variant), Exec::Parallel)
        .expect("comparison runs")
        .0
}

/// Per-size window savings and duration change, averaged over the comm sizes.
fn capping(variant: &str) -> (f64, f64) {
    let c = cmp("allgather_baseline", variant);
    assert_eq!(c.kernels.len(), 6, "six all-gather sizes");
    (c.mean_kernel_savings_pct, c.mean_kernel_loss_pct)
}

fn criterion_1() -> Outcome {
    let (s, l) = capping("allgather_freqcap");
    check(
        (8.0..=12.0).contains(&s) && (0.5..=2.5).contains(&l),
        format!("freq cap: savings {s:.3}% in [8, 12], loss {l:.3}% in [0.5, 2.5]"),
    )
}

fn criterion_2() -> Outcome {
    let (s, l) = capping("allgather_powercap");
    check(
        (2.0..=5.0).contains(&s) && l <= 0.5,
        format!("power cap: savings {s:.3}% in [2, 5], loss {l:.3}% <= 0.5"),
    )
}

fn criterion_3() -> Outcome {
    let (s1, _) = capping("allgather_freqcap");
    let (s, l) = capping("allgather_combined");
    check(
        l >= 5.0 && s > s1,
        format!("combined: loss {l:.3}% >= 5, savings {s:.3}% > freq-cap savings {s1:.3}%"),
    )
}

fn criterion_4() -> Outcome {
    let c = cmp("realloc_baseline", "realloc_comppow");
    let g = -c.kernel("gemm").unwrap().duration_change_pct;
    let e2e = -c.loss_pct;
    let ag = c.kernel("ag").unwrap().duration_change_pct;
    check(
        (2.0..=6.0).contains(&g) && (3.0..=7.0).contains(&e2e) && ag > 0.0,
        format!(
            "CU realloc: GEMM {g:.3}% faster in [2, 6], end-to-end {e2e:.3}% in [3, 7], all-gather {ag:.2}% slower"
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for name in GEMMS {
        let s = load(name);
        let r = run_scenario(&s).unwrap();
        let desc: &KernelDesc = s.kernels().next().unwrap();
        let demand = desc.demand().unwrap();
        let place = [Placement {
            desc,
            demand,
            cus: s.spec.cu_total,
        }];
        // Steady state: every sample after the first control step.
        for smp in r.trace().samples.iter().skip(1) {
            // Governor tolerance in watts: the power one tolerance step up.
            let above = operating_point(&s.spec, &place, smp.f_mhz + s.governor_tol_mhz)
                .power
                .total;
            let band = above - smp.power.total;
            let within = smp.power.total <= s.spec.tdp_w && s.spec.tdp_w - smp.power.total <= band;
            if !(smp.f_mhz < s.spec.f_max_mhz && within) {
                ok = false;
            }
        }
        let mid = &r.trace().samples[r.trace().samples.len() / 2];
        notes.push(format!("{name} f={:.0} P={:.1}", mid.f_mhz, mid.power.total));
    }
    let s = load("allgather_baseline");
    let r = run_scenario(&s).unwrap();
    let ag_ok = r
        .trace()
        .samples
        .iter()
        .all(|p| p.f_mhz == s.spec.f_max_mhz && p.power.total < s.spec.tdp_w);
    let pmax = r.trace().samples.iter().map(|p| p.power.total).fold(0.0, f64::max);
    notes.push(format!("all-gathers f=f_max, P<={pmax:.1}"));
    check(ok && ag_ok, format!("regimes: {}", notes.join("; ")))
}

fn criterion_6() -> Outcome {
    let (xs, ys): (Vec<f64>, Vec<f64>) = GEMMS
        .iter()
        .map(|n| {
            let m = run_scenario(&load(n)).unwrap().metrics;
            (m.avg_power_w.xcd, m.avg_power_w.iod)
        })
        .unzip();
    let r = pearson(&xs, &ys).unwrap();
    check(r < -0.5, format!("jostle: pearson(XCD, IOD) = {r:.4} < -0.5"))
}

fn criterion_7() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for name in CONCURRENT {
        let s = load(name);
        let conc = run_scenario(&s).unwrap();
        let w = overlap_window_average(conc.trace()).expect("kernels overlap");
        let gemm = run_scenario(&s.only_stream(0)).unwrap().metrics.avg_power_w;
        let ag = run_scenario(&s.only_stream(1)).unwrap().metrics.avg_power_w;
        ok &= w.iod > gemm.iod && w.iod > ag.iod && w.xcd < gemm.xcd;
        notes.push(format!(
            "{name}: IOD {:.1} vs {:.1}/{:.1}, XCD {:.1} vs {:.1}",
            w.iod, gemm.iod, ag.iod, w.xcd, gemm.xcd
        ));
    }
    check(ok, format!("concurrency jostle: {}", notes.join("; ")))
}

/// Brute-force classification at `n` uniform midpoints.
fn sampling_oracle(ivs: &[Interval], makespan: f64, n: usize) -> [f64; 5] {
    let mut streams: BTreeMap<&str, Vec<&Interval>> = BTreeMap::new();
    for iv in ivs {
        streams.entry(&iv.stream).or_default().push(iv);
    }
    let mut lists: Vec<Vec<&Interval>> = streams.into_values().collect();
    for l in &mut lists {
        l.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    }
    let mut cursor = vec![0usize; lists.len()];
    let mut counts = [0usize; 5];
    for i in 0..n {
        let t = (i as f64 + 0.5) / n as f64 * makespan;
        let mut busy = 0;
        let mut cat = Category::Other;
        for (l, c) in lists.iter().zip(cursor.iter_mut()) {
            while *c < l.len() && l[*c].end_s <= t {
                *c += 1;
            }
            if *c < l.len() && l[*c].start_s <= t {
                busy += 1;
                cat = l[*c].category;
            }
        }
        let slot = match (busy, cat) {
            (0, _) => 4,
            (1, Category::Gemm) => 0,
            (1, Category::Comm) => 1,
            (1, Category::Other) => 2,
            _ => 3,
        };
        counts[slot] += 1;
    }
    counts.map(|c| c as f64 * makespan / n as f64)
}

fn random_intervals(rng: &mut ChaCha8Rng) -> (Vec<Interval>, f64) {
    let cats = [Category::Gemm, Category::Comm, Category::Other];
    let n_streams = rng.gen_range(2..=3);
    let mut ivs = Vec::new();
    let mut end = 0.0f64;
    for s in 0..n_streams {
        let mut t = 0.0;
        for _ in 0..rng.gen_range(0..=10) {
            let start = t + rng.gen_range(0.0..3.0);
            let stop = start + rng.gen_range(0.01..5.0);
            ivs.push(Interval {
                stream: format!("s{s}"),
                category: cats[rng.gen_range(0..3)],
                start_s: start,
                end_s: stop,
            });
            t = stop;
        }
        end = end.max(t);
    }
    (ivs, end + rng.gen_range(0.0..2.0) + 0.1)
}

fn criterion_8() -> Outcome {
    let exact = overlap_accounting(
        &[
            Interval {
                stream: "A".into(),
                category: Category::Gemm,
                start_s: 0.0,
                end_s: 10.0,
            },
            Interval {
                stream: "B".into(),
                category: Category::Comm,
                start_s: 5.0,
                end_s: 12.0,
            },
        ],
        12.0,
    )
    .unwrap();
    let exact_ok = exact.exposed_by_stream_s["A"] == 5.0
        && exact.exposed_by_stream_s["B"] == 2.0
        && exact.overlapped_s == 5.0
        && exact.idle_s == 0.0;

    let mut rng = ChaCha8Rng::seed_from_u64(0x0e1a9);
    let cases: Vec<(Vec<Interval>, f64)> = (0..200).map(|_| random_intervals(&mut rng)).collect();
    let worst = Exec::Parallel
        .map(&cases, |(ivs, mk)| {
            let r = overlap_accounting(ivs, *mk).unwrap();
            let got = [r.gemm_only_s, r.comm_only_s, r.other_s, r.overlapped_s, r.idle_s];
            let want = sampling_oracle(ivs, *mk, 1_000_000);
            got.iter()
                .zip(want)
                .map(|(g, w)| (g - w).abs() / mk)
                .fold(0.0, f64::max)
        })
        .into_iter()
        .fold(0.0, f64::max);
    check(
        exact_ok && worst <= 1e-3,
        format!("overlap: A/B case exact={exact_ok}, worst oracle gap {worst:.2e}*makespan over 200 sets"),
    )
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let f_min = rng.gen_range(300.0..900.0);
        let f_max = rng.gen_range(1500.0..2600.0);
        let f_ref = rng.gen_range(f_min..=f_max);
        let idle = [
            rng.gen_range(10.0..80.0),
            rng.gen_range(10.0..80.0),
            rng.gen_range(5.0..40.0),
        ];
        let dynx = rng.gen_range(200.0..1200.0);
        let c = |i: f64, d: f64, a: f64| ComponentSpec {
            idle_power_w: i,
            dyn_power_max_w: d,
            freq_exponent: a,
        };
        let raw = GpuSpec {
            name: "toy".into(),
            components: PerComponent::new(c(idle[0], dynx, 3.0), c(idle[1], 0.0, 0.0), c(idle[2], 0.0, 0.0)),
            f_min_mhz: f_min,
            f_max_mhz: f_max,
            f_ref_mhz: f_ref,
            tdp_w: 2000.0,
            cu_total: 304,
            peak_flops: rng.gen_range(3e14..2e15),
            hbm_bw: 5.3e12,
            iod_bw: 4e12,
            link_bw: 9e11,
            copy_rate_per_cu: 1e10,
            copy_freq_exponent: 1.0,
            copy_xcd_activity: 0.0,
        };
        let spec = validate_spec(raw).unwrap();
        let idle_total: f64 = idle.iter().sum();
        let coef = dynx / f_ref.powi(3);
        // A compute-bound GEMM on every CU keeps the XCD fully utilized.
        let g = KernelDesc::gemm("g", 8192, 8192, 8192);
        let place = [Placement {
            desc: &g,
            demand: g.demand().unwrap(),
            cus: 304,
        }];
        let p_lo = idle_total + coef * f_min.powi(3);
        let p_hi = idle_total + coef * f_max.powi(3);
        let cap = rng.gen_range(p_lo..p_hi);
        let settings = ActuatorSettings {
            freq_cap_mhz: f_max,
            power_cap_w: cap,
            cu_alloc: [(g.id.clone(), 304)].into_iter().collect(),
        };
        let f = solve_frequency(&spec, &place, &settings, 1.0);
        let analytic = ((cap - idle_total) / coef).cbrt().clamp(f_min, f_max);
        worst = worst.max((f - analytic).abs());
    }
    check(
        worst <= 1.0,
        format!("governor: worst |f - f*| = {worst:.4} MHz over 50 toy specs"),
    )
}

fn criterion_10() -> Outcome {
    let scenarios = shipped();
    let runs: Vec<(RunResult, RunResult)> = Exec::Parallel.map(&scenarios, |(_, s): &(String, Scenario)| {
        (run_scenario(s).unwrap(), run_scenario(s).unwrap())
    });
    let mut worst_work = 0.0f64;
    let mut identical = true;
    let mut closure = true;
    for ((_, s), (a, b)) in scenarios.iter().zip(&runs) {
        let kernels: Vec<KernelDesc> = s.kernels().cloned().collect();
        for (_, _, e) in work_conservation(a.trace(), &kernels).unwrap() {
            worst_work = worst_work.max(e);
        }
        identical &= trace_csv(a.trace()).as_bytes() == trace_csv(b.trace()).as_bytes();
        let m = &a.metrics;
        let e = &m.energy_j;
        closure &= e.total == e.xcd + e.iod + e.hbm;
        closure &= (m.avg_power_w.total * m.makespan_s - e.total).abs() <= 1e-9 * e.total;
        closure &= a
            .trace()
            .samples
            .iter()
            .all(|p| p.power.total == p.power.xcd + p.power.iod + p.power.hbm);
        let o = &m.overlap;
        closure &= (o.total_s() - m.makespan_s).abs() <= 1e-9 * m.makespan_s;
    }
    let mut worst_add = 0.0f64;
    for w in runs.windows(2) {
        let (a, b) = (w[0].0.trace(), w[1].0.trace());
        let joined = energy(&concat_traces(a, b)).energy_j.total;
        let parts = energy(a).energy_j.total + energy(b).energy_j.total;
        worst_add = worst_add.max((joined - parts).abs() / parts);
    }
    check(
        worst_work < 1e-6 && identical && closure && worst_add < 1e-12,
        format!(
            "integrity over {} scenarios: work error {worst_work:.2e}, traces identical={identical}, closure={closure}, additivity error {worst_add:.1e}",
            scenarios.len()
        ),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let criteria: [(u32, fn() -> Outcome); 10] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
    ];
    let mut failed = 0;
    for (n, f) in criteria {
        match f() {
            Ok(d) => println!("criterion {n:>2}: PASS  {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2}: FAIL  {d}");
            }
        }
    }
    println!("acceptance: {} of 10 passed in {:.1?}", 10 - failed, start.elapsed());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
