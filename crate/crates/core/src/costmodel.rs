//! Closed-form throughput and memory cost functions.
//!
//! Placement follows the parallel-pipelines layout: worker `s·w + r` runs
//! replica `r` of stage `s`, and servers hold `gpus_per_server` consecutive
//! workers. Replicas of one stage therefore share a server whenever they fit,
//! which keeps gradient all-reduce on the fast links; inter-stage links take
//! whatever bandwidth that layout leaves them.

use crate::error::{Error, Result};
use crate::profile::{ClusterSpec, ParallelConfig, StageProfile};
use crate::schedule::PipelinePolicy;

/// Compute inflation from recomputing the forward pass when the backward pass
/// takes twice as long as the forward pass.
pub const C_EXTRA_NOMINAL: f64 = 4.0 / 3.0;

/// Bandwidth available to the all-reduce among `w` replicas of a stage.
///
/// `w` replicas that fit on one server (`w <= gpus_per_server`) use the
/// intra-server bandwidth.
pub fn bwdth_width(width: usize, cluster: &ClusterSpec) -> f64 {
    if width <= cluster.gpus_per_server {
        cluster.bandwidth_high
    } else {
        cluster.bandwidth_low
    }
}

fn server_of(worker: usize, cluster: &ClusterSpec) -> usize {
    worker / cluster.gpus_per_server
}

/// Bandwidth of the link between stage `stage` and `stage + 1`. A link is
/// only as fast as its slowest replica pair.
pub fn link_bandwidth(cluster: &ClusterSpec, width: usize, stage: usize) -> f64 {
    let crosses = (0..width).any(|r| {
        let a = stage * width + r;
        let b = (stage + 1) * width + r;
        server_of(a, cluster) != server_of(b, cluster)
    });
    if crosses {
        cluster.bandwidth_low
    } else {
        cluster.bandwidth_high
    }
}

/// Slowest inter-stage link of a `w × d` layout. A single stage has no
/// inter-stage links and reports the intra-server bandwidth.
pub fn bwdth_depth(cluster: &ClusterSpec, width: usize, depth: usize) -> f64 {
    (0..depth.saturating_sub(1))
        .map(|s| link_bandwidth(cluster, width, s))
        .fold(cluster.bandwidth_high, f64::min)
}

/// Activation plus gradient traffic over one inter-stage link:
/// `2·|A^{inp+out}(b)|·I(d>1) / bandwidth`.
pub fn comm_interstage(boundary_bytes: u64, bandwidth: f64, depth: usize) -> f64 {
    if depth <= 1 {
        return 0.0;
    }
    2.0 * boundary_bytes as f64 / bandwidth
}

/// Ring all-reduce volume per replica: `2·(w-1)/w` times the gradient size.
pub fn allreduce_bytes(gradient_bytes: u64, width: usize) -> f64 {
    2.0 * (width as f64 - 1.0) / width as f64 * gradient_bytes as f64
}

pub fn allreduce_time(gradient_bytes: u64, width: usize, cluster: &ClusterSpec) -> f64 {
    allreduce_bytes(gradient_bytes, width) / bwdth_width(width, cluster)
}

/// How the recomputation multiplier `c_extra` is obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RecomputeCost {
    /// A constant multiplier on per-stage compute time.
    Fixed(f64),
    /// `(2·fwd + bwd) / (fwd + bwd)` measured from each stage's profile.
    Measured,
}

#[derive(Debug, Clone)]
pub struct CostInputs<'a> {
    pub stages: &'a [StageProfile],
    pub cluster: &'a ClusterSpec,
    pub cfg: ParallelConfig,
    pub c_extra: RecomputeCost,
    /// Samples between data-parallel gradient exchanges across all replicas.
    pub global_batch: u64,
}

impl<'a> CostInputs<'a> {
    pub fn new(stages: &'a [StageProfile], cluster: &'a ClusterSpec, cfg: ParallelConfig) -> Self {
        CostInputs {
            stages,
            cluster,
            cfg,
            c_extra: RecomputeCost::Fixed(C_EXTRA_NOMINAL),
            global_batch: cfg.global_batch(),
        }
    }

    pub fn with_c_extra(mut self, c_extra: RecomputeCost) -> Self {
        self.c_extra = c_extra;
        self
    }

    pub fn with_global_batch(mut self, global_batch: u64) -> Self {
        self.global_batch = global_batch;
        self
    }

    fn b(&self) -> u32 {
        self.cfg.microbatch_size
    }

    fn depth(&self) -> usize {
        self.stages.len()
    }

    /// `m(b) = B / (w·b)`; must be a positive integer.
    pub fn microbatches_per_update(&self) -> Result<usize> {
        microbatches_per_update(self.global_batch, self.cfg.width, self.b())
    }

    pub fn compute_time(&self, stage: usize) -> Result<f64> {
        let s = &self.stages[stage];
        Ok(s.fwd_time(self.b())? + s.bwd_time(self.b())?)
    }

    pub fn c_extra_for(&self, stage: usize) -> Result<f64> {
        match self.c_extra {
            RecomputeCost::Fixed(c) => Ok(c),
            RecomputeCost::Measured => {
                let s = &self.stages[stage];
                let f = s.fwd_time(self.b())?;
                let b = s.bwd_time(self.b())?;
                Ok((2.0 * f + b) / (f + b))
            }
        }
    }

    /// `Σ_j T^comm_{j→i}`: one round trip per neighbouring link.
    pub fn interstage_time(&self, stage: usize) -> Result<f64> {
        let d = self.depth();
        let w = self.cfg.width;
        let mut total = 0.0;
        if stage > 0 {
            let bytes = self.stages[stage - 1].act_boundary(self.b())?;
            total += comm_interstage(bytes, link_bandwidth(self.cluster, w, stage - 1), d);
        }
        if stage + 1 < d {
            let bytes = self.stages[stage].act_boundary(self.b())?;
            total += comm_interstage(bytes, link_bandwidth(self.cluster, w, stage), d);
        }
        Ok(total)
    }

    /// `T^comm_i`: all-reduce of stage `i`'s weight gradients across replicas.
    pub fn allreduce_time(&self, stage: usize) -> f64 {
        allreduce_time(self.stages[stage].weight_bytes, self.cfg.width, self.cluster)
    }

    fn stage_term(&self, stage: usize, compute_scale: f64, m: usize) -> Result<f64> {
        let busy = compute_scale * self.compute_time(stage)? + self.interstage_time(stage)?;
        Ok(busy.max(self.allreduce_time(stage) / m as f64))
    }

    /// Seconds per microbatch without pipelining (stages run one at a time).
    pub fn microbatch_time_nopipeline(&self) -> Result<f64> {
        let m = self.microbatches_per_update()?;
        (0..self.depth()).map(|i| self.stage_term(i, 1.0, m)).sum()
    }

    /// Like [`Self::microbatch_time_nopipeline`], but the all-reduce cannot
    /// hide behind compute: the next batch waits for the updated weights.
    pub fn microbatch_time_nopipeline_serial(&self) -> Result<f64> {
        let m = self.microbatches_per_update()?;
        let mut busy = 0.0;
        let mut sync: f64 = 0.0;
        for i in 0..self.depth() {
            busy += self.compute_time(i)? + self.interstage_time(i)?;
            sync = sync.max(self.allreduce_time(i));
        }
        Ok(busy + sync / m as f64)
    }

    /// Seconds per microbatch of the slowest stage once the pipeline is full.
    pub fn microbatch_time_pipelined(&self, recompute: bool) -> Result<f64> {
        let m = self.microbatches_per_update()?;
        let mut worst: f64 = 0.0;
        for i in 0..self.depth() {
            let scale = if recompute { self.c_extra_for(i)? } else { 1.0 };
            worst = worst.max(self.stage_term(i, scale, m)?);
        }
        Ok(worst)
    }
}

impl CostInputs<'_> {
    /// Seconds per microbatch under double buffering when the all-reduce is
    /// exposed. Stage `s` must finish the all-reduce of batch `t` before it
    /// admits batch `t+2`, and in 1F1B order that admission precedes the last
    /// backward of batch `t+1` by `min(d-s, m) - 1` microbatch slots, so a
    /// batch takes at least `T_ar + (min(d-s, m) - 1)·busy_s`.
    pub fn microbatch_time_double_buffered(&self, recompute: bool) -> Result<f64> {
        let m = self.microbatches_per_update()?;
        let d = self.depth();
        let mut busy_max: f64 = 0.0;
        let mut chain: f64 = 0.0;
        for i in 0..d {
            let scale = if recompute { self.c_extra_for(i)? } else { 1.0 };
            let busy = scale * self.compute_time(i)? + self.interstage_time(i)?;
            busy_max = busy_max.max(busy);
            let ahead = (d - i).min(m) - 1;
            chain = chain.max(self.allreduce_time(i) + ahead as f64 * busy);
        }
        Ok(busy_max.max(chain / m as f64))
    }
}

/// Samples per second under double buffering, see
/// [`CostInputs::microbatch_time_double_buffered`].
pub fn throughput_double_buffered(inputs: &CostInputs, recompute: bool) -> Result<f64> {
    let t = inputs.microbatch_time_double_buffered(recompute)?;
    Ok(inputs.cfg.width as f64 * f64::from(inputs.cfg.microbatch_size) / t)
}

pub fn microbatches_per_update(global_batch: u64, width: usize, b: u32) -> Result<usize> {
    let per = width as u64 * u64::from(b);
    if per == 0 || global_batch == 0 || !global_batch.is_multiple_of(per) {
        return Err(Error::Config(format!(
            "global batch {global_batch} is not a positive multiple of w*b = {per}"
        )));
    }
    Ok((global_batch / per) as usize)
}

/// Samples per second without pipelining when weights must be updated before
/// the next batch starts.
pub fn throughput_nopipeline_serial(inputs: &CostInputs) -> Result<f64> {
    let t = inputs.microbatch_time_nopipeline_serial()?;
    Ok(inputs.cfg.width as f64 * f64::from(inputs.cfg.microbatch_size) / t)
}

/// Samples per second across all `w` pipelines without pipelining.
pub fn throughput_nopipeline(inputs: &CostInputs) -> Result<f64> {
    let t = inputs.microbatch_time_nopipeline()?;
    Ok(inputs.cfg.width as f64 * f64::from(inputs.cfg.microbatch_size) / t)
}

/// Samples per second across all `w` pipelines with pipelining; the
/// microbatch size is the configuration's (the caller picks `b′` or `b`).
pub fn throughput_pipelined(inputs: &CostInputs, recompute: bool) -> Result<f64> {
    let t = inputs.microbatch_time_pipelined(recompute)?;
    Ok(inputs.cfg.width as f64 * f64::from(inputs.cfg.microbatch_size) / t)
}

/// Peak weight versions held by `stage` under `policy`.
pub fn stage_weight_versions(policy: PipelinePolicy, depth: usize, stage: usize) -> usize {
    match policy {
        PipelinePolicy::NoPipelining | PipelinePolicy::GPipe | PipelinePolicy::PipeDreamFlush => 1,
        PipelinePolicy::TwoBW => 2,
        PipelinePolicy::PipeDream1F1B => depth - stage,
    }
}

/// Peak input-activation stashes held by `stage` under `policy`.
pub fn stage_stashes(policy: PipelinePolicy, depth: usize, m: usize, stage: usize) -> usize {
    match policy {
        PipelinePolicy::NoPipelining => 1,
        PipelinePolicy::GPipe => m,
        _ => (depth - stage).min(m),
    }
}

/// Resident bytes for a stage holding `versions` weight copies and `stashes`
/// in-flight microbatches. Without recomputation every stash keeps the full
/// intermediate activations plus its input; with recomputation only inputs
/// are stashed and one full activation set is materialized at a time.
pub fn resident_bytes(stage: &StageProfile, b: u32, versions: usize, stashes: usize, recompute: bool) -> Result<u64> {
    let weights = versions as u64 * stage.weight_bytes;
    let total = stage.act_total(b)?;
    let input = stage.act_input(b)?;
    let acts = if stashes == 0 {
        0
    } else if recompute {
        total + stashes as u64 * input
    } else {
        stashes as u64 * (total + input)
    };
    Ok(weights + acts)
}

/// Worst-case bytes per worker for each stage.
pub fn memory_per_stage(inputs: &CostInputs, policy: PipelinePolicy, recompute: bool) -> Result<Vec<u64>> {
    let d = inputs.depth();
    let m = inputs.cfg.microbatches_per_batch();
    inputs
        .stages
        .iter()
        .enumerate()
        .map(|(i, s)| {
            resident_bytes(
                s,
                inputs.cfg.microbatch_size,
                stage_weight_versions(policy, d, i),
                stage_stashes(policy, d, m, i),
                recompute,
            )
        })
        .collect()
}

/// Worst-case bytes on any worker.
pub fn memory_footprint(inputs: &CostInputs, policy: PipelinePolicy, recompute: bool) -> Result<u64> {
    Ok(memory_per_stage(inputs, policy, recompute)?.into_iter().max().unwrap_or(0))
}

/// `b′`: the largest profiled microbatch size whose footprint without
/// recomputation fits in the device memory, found by bisection over the
/// ascending table keys. Footprints grow with `b`, so the predicate is
/// monotone.
pub fn largest_fitting_microbatch(
    stages: &[StageProfile],
    cluster: &ClusterSpec,
    cfg: ParallelConfig,
    policy: PipelinePolicy,
) -> Result<Option<u32>> {
    let keys: Vec<u32> = stages[0].fwd.keys().copied().collect();
    let fits = |b: u32| -> Result<bool> {
        let c = ParallelConfig { microbatch_size: b, ..cfg };
        Ok(memory_footprint(&CostInputs::new(stages, cluster, c), policy, false)? <= cluster.memory_capacity)
    };
    let (mut lo, mut hi) = (0usize, keys.len());
    while lo < hi {
        let mid = (lo + hi) / 2;
        if fits(keys[mid])? {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    Ok(lo.checked_sub(1).map(|i| keys[i]))
}
