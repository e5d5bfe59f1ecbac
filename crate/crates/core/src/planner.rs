//! Exhaustive search for the fastest `(w, d, b, r)` that fits in memory.
//!
//! For every width/depth pair with `w·d ≤ N` the planner tries each profiled
//! microbatch size under three executions: no pipelining, double-buffered
//! pipelining, and double-buffered pipelining with recomputation. Each
//! candidate accumulates `g = ⌊B / (w·d·b)⌋` microbatches per stage, so its
//! global batch never exceeds the safe maximum `B`.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costmodel::{
    memory_footprint, throughput_double_buffered, throughput_nopipeline_serial, CostInputs, RecomputeCost,
};
use crate::error::{Error, Result};
use crate::profile::{ClusterSpec, ModelProfile, ParallelConfig, StageProfile};
use crate::schedule::PipelinePolicy;
use crate::simulator::{measure_high_water, run};

/// Relative throughput difference treated as a tie.
const TIE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub config: ParallelConfig,
    pub policy: PipelinePolicy,
    /// Predicted samples per second.
    pub throughput: f64,
    /// Predicted peak bytes on the most loaded worker.
    pub memory: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub width: usize,
    pub depth: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub w_opt: usize,
    pub d_opt: usize,
    pub b_opt: u32,
    pub r_opt: bool,
    pub g_opt: usize,
    pub policy: PipelinePolicy,
    pub predicted_throughput: f64,
    pub predicted_memory: u64,
    pub max_batch: u64,
    /// Best candidate of every feasible `(w, d)`, fastest first.
    pub ranked_alternatives: Vec<Candidate>,
    pub rejections: Vec<Rejection>,
    pub pairs_examined: usize,
}

impl PlanResult {
    pub fn config(&self) -> ParallelConfig {
        ParallelConfig::new(self.w_opt, self.d_opt, self.b_opt, self.r_opt, self.g_opt)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    /// Human-readable summary with the ranked alternatives and rejections.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "w_opt={} d_opt={} b_opt={} r_opt={} g_opt={} policy={} throughput={:.3} samples/s memory={:.3} GB\n",
            self.w_opt,
            self.d_opt,
            self.b_opt,
            self.r_opt,
            self.g_opt,
            self.policy,
            self.predicted_throughput,
            self.predicted_memory as f64 / 1e9
        );
        out.push_str(&format!("{} (w, d) pairs examined\n\n", self.pairs_examined));
        out.push_str(&format!(
            "{:>4} {:>4} {:>4} {:>5} {:>6} {:>9} {:>14} {:>12}\n",
            "w", "d", "b", "r", "g", "policy", "samples/s", "memory GB"
        ));
        for c in &self.ranked_alternatives {
            out.push_str(&format!(
                "{:>4} {:>4} {:>4} {:>5} {:>6} {:>9} {:>14.3} {:>12.3}\n",
                c.config.width,
                c.config.depth,
                c.config.microbatch_size,
                c.config.recompute,
                c.config.grad_accum,
                c.policy.name(),
                c.throughput,
                c.memory as f64 / 1e9
            ));
        }
        if !self.rejections.is_empty() {
            out.push_str("\nrejected:\n");
            for r in &self.rejections {
                out.push_str(&format!("  w={} d={}: {}\n", r.width, r.depth, r.reason));
            }
        }
        out
    }
}

/// Scores one fully specified configuration with the closed-form model.
/// Both executions account for all-reduce time that compute cannot hide.
pub fn evaluate(
    stages: &[StageProfile],
    cluster: &ClusterSpec,
    cfg: ParallelConfig,
    policy: PipelinePolicy,
) -> Result<Candidate> {
    let inputs = CostInputs::new(stages, cluster, cfg).with_c_extra(RecomputeCost::Measured);
    let throughput = match policy {
        PipelinePolicy::NoPipelining => throughput_nopipeline_serial(&inputs)?,
        _ => throughput_double_buffered(&inputs, cfg.recompute)?,
    };
    let memory = memory_footprint(&inputs, policy, cfg.recompute)?;
    Ok(Candidate {
        config: cfg,
        policy,
        throughput,
        memory,
    })
}

const EXECUTIONS: [(PipelinePolicy, bool); 3] = [
    (PipelinePolicy::TwoBW, false),
    (PipelinePolicy::TwoBW, true),
    (PipelinePolicy::NoPipelining, false),
];

/// Best `(b, r)` and execution for a fixed width and depth.
pub fn search(model: &ModelProfile, cluster: &ClusterSpec, width: usize, depth: usize, max_batch: u64) -> Result<Candidate> {
    if width * depth > cluster.total_workers {
        return Err(Error::Infeasible(format!(
            "w*d = {} exceeds {} workers",
            width * depth,
            cluster.total_workers
        )));
    }
    let stages = model.partition_equal(depth)?;
    search_stages(&stages, cluster, width, max_batch)
}

fn search_stages(stages: &[StageProfile], cluster: &ClusterSpec, width: usize, max_batch: u64) -> Result<Candidate> {
    let depth = stages.len();
    let mut best: Option<Candidate> = None;
    let mut too_big = None;
    let mut over_memory = None;
    for &b in stages[0].fwd.keys() {
        let per_step = (width * depth) as u64 * u64::from(b);
        let g = (max_batch / per_step) as usize;
        if g == 0 {
            too_big.get_or_insert(b);
            continue;
        }
        for (policy, recompute) in EXECUTIONS {
            let cfg = ParallelConfig::new(width, depth, b, recompute, g);
            let c = evaluate(stages, cluster, cfg, policy)?;
            if c.memory > cluster.memory_capacity {
                over_memory = Some(over_memory.map_or(c.memory, |m: u64| m.min(c.memory)));
                continue;
            }
            if best.is_none_or(|cur| c.throughput > cur.throughput * (1.0 + TIE)) {
                best = Some(c);
            }
        }
    }
    best.ok_or_else(|| {
        let mut why = Vec::new();
        if let Some(m) = over_memory {
            why.push(format!(
                "smallest footprint {:.3} GB exceeds capacity {:.3} GB",
                m as f64 / 1e9,
                cluster.memory_capacity as f64 / 1e9
            ));
        }
        if let Some(b) = too_big {
            why.push(format!("b={b} with w*d = {} exceeds the batch size {max_batch}", width * depth));
        }
        Error::Infeasible(why.join("; "))
    })
}

/// Faster first, then shallower, then narrower.
fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.throughput
        .total_cmp(&a.throughput)
        .then(a.config.depth.cmp(&b.config.depth))
        .then(a.config.width.cmp(&b.config.width))
}

/// Among candidates within [`TIE`] of the fastest, the shallowest, then narrowest.
fn pick(ranked: &[Candidate]) -> Option<Candidate> {
    let top = ranked.first()?.throughput;
    ranked
        .iter()
        .take_while(|c| top - c.throughput <= TIE * top.abs())
        .min_by_key(|c| (c.config.depth, c.config.width))
        .copied()
}

/// Sweeps every `(w, d)` with `w·d ≤ N`. Candidates are scored in parallel on
/// the current rayon pool and reduced in a fixed order.
pub fn plan(model: &ModelProfile, cluster: &ClusterSpec, max_batch: u64) -> Result<PlanResult> {
    model.validate()?;
    cluster.validate()?;
    if max_batch == 0 {
        return Err(Error::Config("maximum batch size must be at least 1".into()));
    }
    let n = cluster.total_workers;
    let blocks = model.block_count();
    let pairs: Vec<(usize, usize)> = (1..=n).flat_map(|w| (1..=n / w).map(move |d| (w, d))).collect();
    let outcomes: Vec<std::result::Result<Candidate, Rejection>> = pairs
        .par_iter()
        .map(|&(w, d)| {
            let reject = |reason: String| Rejection {
                width: w,
                depth: d,
                reason,
            };
            if !blocks.is_multiple_of(d) {
                return Err(reject(format!("{blocks} blocks do not split evenly into {d} stages")));
            }
            let stages = model.partition_equal(d).map_err(|e| reject(e.to_string()))?;
            search_stages(&stages, cluster, w, max_batch).map_err(|e| match e {
                Error::Infeasible(reason) => reject(reason),
                other => reject(other.to_string()),
            })
        })
        .collect();

    let mut feasible = Vec::new();
    let mut rejections = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(c) => feasible.push(c),
            Err(r) => rejections.push(r),
        }
    }
    feasible.sort_by(rank);
    let Some(best) = pick(&feasible) else {
        let detail: Vec<String> = rejections
            .iter()
            .map(|r| format!("w={} d={}: {}", r.width, r.depth, r.reason))
            .collect();
        return Err(Error::Infeasible(format!("no configuration fits\n{}", detail.join("\n"))));
    };
    Ok(PlanResult {
        w_opt: best.config.width,
        d_opt: best.config.depth,
        b_opt: best.config.microbatch_size,
        r_opt: best.config.recompute,
        g_opt: best.config.grad_accum,
        policy: best.policy,
        predicted_throughput: best.throughput,
        predicted_memory: best.memory,
        max_batch,
        ranked_alternatives: feasible,
        rejections,
        pairs_examined: pairs.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanValidation {
    pub predicted_throughput: f64,
    pub simulated_throughput: f64,
    /// `|predicted - simulated| / simulated`.
    pub throughput_error: f64,
    pub predicted_memory: u64,
    pub simulated_memory: u64,
    pub memory_error: f64,
}

/// Simulates the chosen configuration and compares it with the prediction.
pub fn validate_plan(plan: &PlanResult, model: &ModelProfile, cluster: &ClusterSpec, num_batches: usize) -> Result<PlanValidation> {
    let cfg = plan.config();
    if plan.predicted_memory > cluster.memory_capacity {
        return Err(Error::Infeasible(format!(
            "plan needs {} bytes but capacity is {}",
            plan.predicted_memory, cluster.memory_capacity
        )));
    }
    let report = run(plan.policy, model, cluster, &cfg, num_batches)?;
    let simulated_memory = measure_high_water(&report).into_iter().max().unwrap_or(0);
    let rel = |p: f64, s: f64| if s == 0.0 { p.abs() } else { (p - s).abs() / s.abs() };
    Ok(PlanValidation {
        predicted_throughput: plan.predicted_throughput,
        simulated_throughput: report.throughput,
        throughput_error: rel(plan.predicted_throughput, report.throughput),
        predicted_memory: plan.predicted_memory,
        simulated_memory,
        memory_error: rel(plan.predicted_memory as f64, simulated_memory as f64),
    })
}

/// Every memory-feasible candidate of the sweep, scored by simulation.
/// Returns `(prediction, simulated throughput)` pairs, fastest simulated first.
pub fn brute_force(
    model: &ModelProfile,
    cluster: &ClusterSpec,
    max_batch: u64,
    num_batches: usize,
) -> Result<Vec<(Candidate, f64)>> {
    let n = cluster.total_workers;
    let mut candidates = Vec::new();
    for w in 1..=n {
        for d in (1..=n / w).filter(|d| model.block_count().is_multiple_of(*d)) {
            let stages = model.partition_equal(d)?;
            for &b in stages[0].fwd.keys() {
                let g = (max_batch / ((w * d) as u64 * u64::from(b))) as usize;
                if g == 0 {
                    continue;
                }
                for (policy, recompute) in EXECUTIONS {
                    let c = evaluate(&stages, cluster, ParallelConfig::new(w, d, b, recompute, g), policy)?;
                    if c.memory <= cluster.memory_capacity {
                        candidates.push(c);
                    }
                }
            }
        }
    }
    let mut scored = candidates
        .into_par_iter()
        .map(|c| Ok((c, run(c.policy, model, cluster, &c.config, num_batches)?.throughput)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(scored)
}
