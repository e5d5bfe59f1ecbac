//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use pipesim::costmodel::{memory_footprint, throughput_pipelined, CostInputs};
use pipesim::fixtures::{figure, unit_pipeline};
use pipesim::planner::{brute_force, plan};
use pipesim::schedule::weight_version_2bw;
use pipesim::semantics::{loss_curve_compare, verify_grid, Grid, ToyModel, TrainerConfig};
use pipesim::simulator::{measure_high_water, run, SimReport};
use pipesim::{render_timeline, ClusterSpec, ModelProfile, ParallelConfig, PipelinePolicy, RenderFormat, UniformBlock};

const GB: u64 = 1_000_000_000;
const MB: u64 = 1_000_000;

const ALL: [PipelinePolicy; 5] = [
    PipelinePolicy::NoPipelining,
    PipelinePolicy::GPipe,
    PipelinePolicy::PipeDream1F1B,
    PipelinePolicy::PipeDreamFlush,
    PipelinePolicy::TwoBW,
];

type Check = Result<String, String>;

struct Criterion {
    id: &'static str,
    name: &'static str,
    budget: Duration,
    check: fn() -> Check,
}

fn cluster(workers: usize, per_server: usize, high: f64, low: f64, capacity: u64) -> ClusterSpec {
    ClusterSpec {
        total_workers: workers,
        gpus_per_server: per_server,
        bandwidth_high: high,
        bandwidth_low: low,
        memory_capacity: capacity,
    }
}

/// Eight blocks with nonzero boundaries; all-reduce stays below compute.
fn grid_model() -> ModelProfile {
    let block = UniformBlock {
        fwd_ms: 10.0,
        bwd_ms: 20.0,
        weight_bytes: 100 * MB,
        act_total_bytes: 50 * MB,
        act_input_bytes: 10 * MB,
    };
    ModelProfile::uniform("grid", 8, block, &[1, 2]).unwrap()
}

struct GridCase {
    policy: PipelinePolicy,
    cfg: ParallelConfig,
}

/// policy × w × d × g × r, with PipeDream kept to a single replica.
fn grid_cases(policies: &[PipelinePolicy], widths: &[usize], recompute: &[bool]) -> Vec<GridCase> {
    let mut cases = Vec::new();
    for &policy in policies {
        for &w in widths {
            if w > 1 && policy == PipelinePolicy::PipeDream1F1B {
                continue;
            }
            for d in [1, 2, 4, 8] {
                for g in [1, 2, 4] {
                    for &r in recompute {
                        cases.push(GridCase {
                            policy,
                            cfg: ParallelConfig::new(w, d, 1, r, g),
                        });
                    }
                }
            }
        }
    }
    cases
}

fn simulate_case(model: &ModelProfile, case: &GridCase, batches: usize) -> Result<(SimReport, ClusterSpec), String> {
    let c = cluster(case.cfg.width * case.cfg.depth, 4, 1e11, 1e10, 1000 * GB);
    let report = run(case.policy, model, &c, &case.cfg, batches).map_err(|e| e.to_string())?;
    Ok((report, c))
}

fn describe(case: &GridCase) -> String {
    let c = case.cfg;
    format!("{} w={} d={} g={} r={}", case.policy, c.width, c.depth, c.grad_accum, c.recompute)
}

fn version_formula() -> Check {
    let v = weight_version_2bw(9, 4);
    if v != 1 {
        return Err(format!("weight_version_2bw(9, 4) = {v}"));
    }
    let report = figure("fig2").map_err(|e| e.to_string())?.simulate().map_err(|e| e.to_string())?;
    let svg = String::from_utf8(render_timeline(&report, RenderFormat::Svg).map_err(|e| e.to_string())?).unwrap();
    let needle = r#"data-worker="4" data-stage="3" data-op="Forward" data-mb="9" data-ver="1""#;
    if svg.contains(needle) {
        Ok("weight_version_2bw(9,4)=1; worker 4 forward of mb 9 rendered with v1".into())
    } else {
        Err("rendered worker-4 forward of mb 9 does not carry version 1".into())
    }
}

fn version_counts() -> Check {
    let model = grid_model();
    let cases = grid_cases(&ALL[1..], &[1, 2], &[false]);
    for case in &cases {
        let (report, _) = simulate_case(&model, case, 5)?;
        let d = case.cfg.depth;
        let (got, ok) = match case.policy {
            PipelinePolicy::TwoBW => {
                let after = report.batch_completion[0];
                let v = report.memory.iter().map(|m| m.peak_versions_after(after)).max().unwrap();
                (v, v == 2)
            }
            PipelinePolicy::PipeDream1F1B => {
                let v = report.memory.iter().map(|m| m.peak_versions()).max().unwrap();
                (v, v <= d)
            }
            _ => {
                let v = report.memory.iter().map(|m| m.peak_versions()).max().unwrap();
                (v, v == 1)
            }
        };
        if !ok {
            return Err(format!("{}: peak versions {got}", describe(case)));
        }
    }
    Ok(format!("{} configurations, 5 batches each", cases.len()))
}

fn stash_counts() -> Check {
    let model = grid_model();
    let cases = grid_cases(&ALL[1..], &[1], &[false, true]);
    for case in &cases {
        let (report, _) = simulate_case(&model, case, 5)?;
        let (d, m) = (case.cfg.depth, case.cfg.microbatches_per_batch());
        let s = report.memory.iter().map(|m| m.peak_stashes()).max().unwrap();
        let ok = match case.policy {
            PipelinePolicy::GPipe => s == m,
            _ => s <= d,
        };
        if !ok {
            return Err(format!("{}: peak stashes {s} (m={m})", describe(case)));
        }
    }
    Ok(format!("{} configurations", cases.len()))
}

fn memory_agreement() -> Check {
    let model = grid_model();
    let cases = grid_cases(&ALL, &[1, 2], &[false, true]);
    for case in &cases {
        let (report, c) = simulate_case(&model, case, 5)?;
        let stages = model.partition_equal(case.cfg.depth).unwrap();
        let predicted = memory_footprint(&CostInputs::new(&stages, &c, case.cfg), case.policy, case.cfg.recompute).unwrap();
        let simulated = measure_high_water(&report).into_iter().max().unwrap();
        if predicted != simulated {
            return Err(format!("{}: closed form {predicted} B, simulated {simulated} B", describe(case)));
        }
    }

    // whole model: |W| = 8 GB, |A_total| = 4 GB, stage input 1 GB
    let block = UniformBlock {
        fwd_ms: 1.0,
        bwd_ms: 2.0,
        weight_bytes: 2 * GB,
        act_total_bytes: GB,
        act_input_bytes: GB,
    };
    let worked = ModelProfile::uniform("worked", 4, block, &[1]).unwrap();
    let c = cluster(4, 4, 1e11, 1e10, 100 * GB);
    for (policy, g, expect) in [(PipelinePolicy::TwoBW, 1, 9 * GB), (PipelinePolicy::GPipe, 2, 11 * GB)] {
        let report = run(policy, &worked, &c, &ParallelConfig::new(1, 4, 1, true, g), 4).map_err(|e| e.to_string())?;
        let peak = measure_high_water(&report).into_iter().max().unwrap();
        if peak != expect {
            return Err(format!("{policy} worked example: simulated {peak} B, expected {expect} B"));
        }
    }
    Ok(format!("{} configurations exact; 9 GB and 11 GB worked examples exact", cases.len()))
}

fn semantics_equivalence() -> Check {
    let results = verify_grid(Grid::Small, None).map_err(|e| e.to_string())?;
    let worst = results.iter().map(|r| r.error).fold(0.0, f64::max);
    match results.iter().find(|r| !r.passed) {
        Some(r) => Err(format!("{}: relative error {:e}", r.name, r.error)),
        None => Ok(format!("{} cases, worst relative error {worst:.2e}", results.len())),
    }
}

fn cross_validation() -> Check {
    let model = grid_model();
    let cases = grid_cases(&[PipelinePolicy::TwoBW, PipelinePolicy::PipeDream1F1B], &[1, 2], &[false]);
    let mut worst: f64 = 0.0;
    for case in &cases {
        let (report, c) = simulate_case(&model, case, 50)?;
        let stages = model.partition_equal(case.cfg.depth).unwrap();
        let predicted = throughput_pipelined(&CostInputs::new(&stages, &c, case.cfg), false).unwrap();
        let err = (predicted - report.throughput).abs() / report.throughput;
        if err > 0.02 {
            return Err(format!(
                "{}: predicted {predicted:.3}/s, simulated {:.3}/s ({:.2}%)",
                describe(case),
                report.throughput,
                100.0 * err
            ));
        }
        worst = worst.max(err);
    }
    Ok(format!("{} configurations at 50 batches, worst error {:.3}%", cases.len(), 100.0 * worst))
}

/// Blocks whose per-sample time falls with the microbatch size.
fn planner_model(count: usize, sizes: &[u32]) -> ModelProfile {
    let block = UniformBlock {
        fwd_ms: 1.2,
        bwd_ms: 2.4,
        weight_bytes: 200 * MB,
        act_total_bytes: 120 * MB,
        act_input_bytes: 8 * MB,
    };
    ModelProfile::uniform_scaled("planner", count, block, sizes, 0.85).unwrap()
}

fn planner_optimality() -> Check {
    let model = planner_model(12, &[1, 2, 4, 8]);
    let mut notes = Vec::new();
    for n in [8, 16] {
        let c = cluster(n, 4, 1.5e11, 3e9, 16 * GB);
        let chosen = plan(&model, &c, 256).map_err(|e| e.to_string())?;
        let simulated = run(chosen.policy, &model, &c, &chosen.config(), 12).map_err(|e| e.to_string())?.throughput;
        let scored = brute_force(&model, &c, 256, 12).map_err(|e| e.to_string())?;
        let best = scored[0].1;
        let ratio = simulated / best;
        if ratio < 0.98 {
            return Err(format!("N={n}: plan reaches {:.2}% of the exhaustive best", 100.0 * ratio));
        }
        notes.push(format!("N={n} {:.2}% of best over {} candidates", 100.0 * ratio, scored.len()));
    }

    let big = planner_model(24, &[1, 2, 4, 8, 16]);
    let c = cluster(64, 8, 1.5e11, 3e9, 16 * GB);
    let t = Instant::now();
    plan(&big, &c, 512).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    if elapsed >= Duration::from_secs(1) {
        return Err(format!("planning N=64 took {elapsed:.2?}"));
    }
    notes.push(format!("N=64 planned in {elapsed:.2?}"));
    Ok(notes.join("; "))
}

fn flush_monotone() -> Check {
    let model = grid_model();
    for policy in [PipelinePolicy::GPipe, PipelinePolicy::PipeDreamFlush] {
        for d in [2, 4, 8] {
            let c = cluster(d, 4, 1e11, 1e10, 1000 * GB);
            let mut last = 0.0;
            for g in 1..=6 {
                let cfg = ParallelConfig::new(1, d, 1, false, g);
                let t = run(policy, &model, &c, &cfg, 8).map_err(|e| e.to_string())?.throughput;
                if t <= last {
                    return Err(format!("{policy} d={d}: throughput {t:.4} at m={} after {last:.4}", cfg.microbatches_per_batch()));
                }
                last = t;
            }
        }
    }
    Ok("GPipe and Flush strictly increase over m = d..6d for d in {2,4,8}".into())
}

/// Best simulated 2BW throughput over best simulated no-pipelining
/// throughput, both searched exhaustively.
fn pipelining_speedup(low: f64) -> Result<f64, String> {
    let block = UniformBlock {
        fwd_ms: 2.0,
        bwd_ms: 4.0,
        weight_bytes: 400 * MB,
        act_total_bytes: 60 * MB,
        act_input_bytes: 4 * MB,
    };
    let model = ModelProfile::uniform("speedup", 8, block, &[1, 4]).unwrap();
    let c = cluster(16, 4, 1.5e11, low, 64 * GB);
    let scored = brute_force(&model, &c, 256, 6).map_err(|e| e.to_string())?;
    let best = |p: PipelinePolicy| scored.iter().find(|(c, _)| c.policy == p).map(|s| s.1).unwrap_or(0.0);
    Ok(best(PipelinePolicy::TwoBW) / best(PipelinePolicy::NoPipelining))
}

/// Inter-server bandwidth 6x to 60x below intra-server. Far below that the
/// boundary links saturate too and both policies retreat to one server.
fn speedup_grows() -> Check {
    let lows = [2.5e10, 1e10, 4e9, 2.5e9];
    let mut factors = Vec::new();
    for low in lows {
        factors.push(pipelining_speedup(low)?);
    }
    let text = lows
        .iter()
        .zip(&factors)
        .map(|(l, f)| format!("{:.1} GB/s: {f:.3}x", l / 1e9))
        .collect::<Vec<_>>()
        .join(", ");
    if factors.windows(2).all(|w| w[1] > w[0]) && factors[0] > 1.0 {
        Ok(text)
    } else {
        Err(text)
    }
}

fn recompute_factor() -> Check {
    let mut worst: f64 = 0.0;
    for ratio in [2.0, 2.5, 3.0] {
        for d in [1, 2, 4] {
            let mut model = unit_pipeline(d);
            for b in &mut model.blocks {
                let f = b.fwd_ms[&1];
                b.bwd_ms.values_mut().for_each(|t| *t = ratio * f);
            }
            let c = cluster(d, 4, 1e11, 1e10, 1000 * GB);
            let period = |r: bool| -> Result<f64, String> {
                let cfg = ParallelConfig::new(1, d, 1, r, 2);
                Ok(run(PipelinePolicy::TwoBW, &model, &c, &cfg, 8).map_err(|e| e.to_string())?.steady_microbatch_time())
            };
            let factor = period(true)? / period(false)?;
            if !(factor > 1.0 && factor <= 4.0 / 3.0 + 1e-12) {
                return Err(format!("t_b = {ratio} t_f, d={d}: factor {factor:.6}"));
            }
            worst = worst.max(factor);
        }
    }
    Ok(format!("largest factor {worst:.6}"))
}

fn loss_tracking() -> Check {
    let model = ToyModel::linear_regression(3, 4, 8);
    let cfg = TrainerConfig {
        learning_rate: 0.1,
        momentum: 0.0,
        m: 4,
        num_batches: 200,
    };
    let cmp = loss_curve_compare(&model, &cfg).map_err(|e| e.to_string())?;
    let gap = cmp.relative_tail_gap();
    let text = format!("tail gap {gap:.2e} of initial loss {:.3e}", cmp.scale);
    if gap < 1e-3 {
        Ok(text)
    } else {
        Err(text)
    }
}

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria = [
        Criterion { id: "1", name: "version formula", budget: Duration::from_secs(1), check: version_formula },
        Criterion { id: "2", name: "version counts", budget: Duration::from_secs(10), check: version_counts },
        Criterion { id: "3", name: "stash bounds", budget: Duration::from_secs(10), check: stash_counts },
        Criterion { id: "4", name: "memory closed forms", budget: Duration::from_secs(10), check: memory_agreement },
        Criterion { id: "5", name: "semantics equivalence", budget: Duration::from_secs(60), check: semantics_equivalence },
        Criterion { id: "6", name: "cost model vs simulator", budget: Duration::from_secs(120), check: cross_validation },
        Criterion { id: "7", name: "planner optimality", budget: Duration::from_secs(300), check: planner_optimality },
        Criterion { id: "8a", name: "flush throughput grows with m", budget: Duration::from_secs(60), check: flush_monotone },
        Criterion { id: "8b", name: "pipelining speedup grows as B_low shrinks", budget: Duration::from_secs(60), check: speedup_grows },
        Criterion { id: "8c", name: "recompute factor in (1, 4/3]", budget: Duration::from_secs(60), check: recompute_factor },
        Criterion { id: "9", name: "loss curve tracking", budget: Duration::from_secs(10), check: loss_tracking },
    ];
    let mut failed = 0;
    for c in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == c.id) {
            continue;
        }
        let t = Instant::now();
        let mut outcome = (c.check)();
        let elapsed = t.elapsed();
        if outcome.is_ok() && elapsed > c.budget {
            outcome = Err(format!("took {elapsed:.2?}, budget {:.0?}", c.budget));
        }
        match outcome {
            Ok(detail) => println!("PASS {:<3} {} [{elapsed:.2?}] {detail}", c.id, c.name),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:<3} {} [{elapsed:.2?}] {detail}", c.id, c.name);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
