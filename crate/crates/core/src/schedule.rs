//! Per-stage operation programs for each pipelining policy.
//!
//! A program is the exact order in which one stage executes its work. Global
//! microbatch ids are 1-indexed. Communication ops are emitted explicitly so
//! that the simulator and the semantics executor replay the same sequence.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PipelinePolicy {
    NoPipelining,
    GPipe,
    /// PipeDream with weight stashing and per-microbatch updates.
    PipeDream1F1B,
    PipeDreamFlush,
    TwoBW,
}

impl PipelinePolicy {
    pub const ALL: [PipelinePolicy; 5] = [
        PipelinePolicy::NoPipelining,
        PipelinePolicy::GPipe,
        PipelinePolicy::PipeDream1F1B,
        PipelinePolicy::PipeDreamFlush,
        PipelinePolicy::TwoBW,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PipelinePolicy::NoPipelining => "nopipe",
            PipelinePolicy::GPipe => "gpipe",
            PipelinePolicy::PipeDream1F1B => "pipedream",
            PipelinePolicy::PipeDreamFlush => "flush",
            PipelinePolicy::TwoBW => "2bw",
        }
    }

    /// Whether the policy drains the pipeline before every weight update.
    pub fn flushes(self) -> bool {
        matches!(self, PipelinePolicy::GPipe | PipelinePolicy::PipeDreamFlush)
    }
}

impl fmt::Display for PipelinePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PipelinePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nopipe" | "nopipelining" | "none" => Ok(PipelinePolicy::NoPipelining),
            "gpipe" => Ok(PipelinePolicy::GPipe),
            "pipedream" | "1f1b" | "pipedream1f1b" => Ok(PipelinePolicy::PipeDream1F1B),
            "flush" | "pipedream-flush" | "pipedreamflush" => Ok(PipelinePolicy::PipeDreamFlush),
            "2bw" | "twobw" | "pipedream-2bw" => Ok(PipelinePolicy::TwoBW),
            other => Err(Error::Config(format!(
                "unknown policy `{other}` (expected nopipe, gpipe, pipedream, flush or 2bw)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Forward,
    Backward,
    Recompute,
    WeightUpdate,
    FlushBarrier,
    ActivationSend,
    ActivationRecv,
    GradSend,
    GradRecv,
    AllReduce,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Forward => "Forward",
            OpKind::Backward => "Backward",
            OpKind::Recompute => "Recompute",
            OpKind::WeightUpdate => "WeightUpdate",
            OpKind::FlushBarrier => "FlushBarrier",
            OpKind::ActivationSend => "ActivationSend",
            OpKind::ActivationRecv => "ActivationRecv",
            OpKind::GradSend => "GradSend",
            OpKind::GradRecv => "GradRecv",
            OpKind::AllReduce => "AllReduce",
        }
    }

    pub fn is_compute(self) -> bool {
        matches!(self, OpKind::Forward | OpKind::Backward | OpKind::Recompute)
    }

    pub fn is_transfer(self) -> bool {
        matches!(
            self,
            OpKind::ActivationSend | OpKind::ActivationRecv | OpKind::GradSend | OpKind::GradRecv
        )
    }
}

/// Which weight version a Forward/Backward must use.
///
/// `Latest` is resolved by whoever replays the program: the forward pass takes
/// the newest version available on the stage when it runs and the matching
/// backward pass reuses that stashed version.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VersionRef {
    Fixed(u32),
    Latest,
}

impl fmt::Display for VersionRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VersionRef::Fixed(v) => write!(f, "{v}"),
            VersionRef::Latest => f.write_str("latest"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScheduledOp {
    pub kind: OpKind,
    pub microbatch: Option<u32>,
    /// For Forward/Backward: the version to use. For WeightUpdate: the
    /// version it produces.
    pub version: Option<VersionRef>,
}

impl ScheduledOp {
    fn new(kind: OpKind, microbatch: Option<u32>, version: Option<VersionRef>) -> Self {
        ScheduledOp {
            kind,
            microbatch,
            version,
        }
    }

    pub fn forward(k: u32, v: VersionRef) -> Self {
        Self::new(OpKind::Forward, Some(k), Some(v))
    }

    pub fn backward(k: u32, v: VersionRef) -> Self {
        Self::new(OpKind::Backward, Some(k), Some(v))
    }

    pub fn recompute(k: u32, v: VersionRef) -> Self {
        Self::new(OpKind::Recompute, Some(k), Some(v))
    }

    fn transfer(kind: OpKind, k: u32) -> Self {
        Self::new(kind, Some(k), None)
    }

    fn update(produces: VersionRef) -> Self {
        Self::new(OpKind::WeightUpdate, None, Some(produces))
    }

    fn bare(kind: OpKind) -> Self {
        Self::new(kind, None, None)
    }
}

impl fmt::Display for ScheduledOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "op={} mb=", self.kind.name())?;
        match self.microbatch {
            Some(k) => write!(f, "{k}")?,
            None => f.write_str("-")?,
        }
        f.write_str(" ver=")?;
        match self.version {
            Some(v) => write!(f, "{v}"),
            None => f.write_str("-"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageProgram {
    pub stage: usize,
    pub ops: Vec<ScheduledOp>,
}

impl StageProgram {
    /// Forward/Backward/WeightUpdate only, e.g. `F1 F2 B1 U`.
    pub fn compute_summary(&self) -> String {
        self.ops
            .iter()
            .filter_map(|op| match (op.kind, op.microbatch) {
                (OpKind::Forward, Some(k)) => Some(format!("F{k}")),
                (OpKind::Backward, Some(k)) => Some(format!("B{k}")),
                (OpKind::WeightUpdate, _) => Some("U".to_string()),
                _ => None,
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Line-oriented text form, one `stage=<s> op=<kind> mb=<k> ver=<v>` per op.
pub fn programs_to_text(programs: &[StageProgram]) -> String {
    let mut out = String::new();
    for p in programs {
        for op in &p.ops {
            out.push_str(&format!("stage={} {}\n", p.stage, op));
        }
    }
    out
}

/// Weight version used by microbatch `k` (1-indexed) under double-buffered
/// updates with `m` microbatches per batch: `max(floor((k-1)/m) - 1, 0)`.
pub fn weight_version_2bw(k: u32, m: u32) -> u32 {
    assert!(k >= 1 && m >= 1, "microbatch ids and batch sizes start at 1");
    ((k - 1) / m).saturating_sub(1)
}

/// Worst-case number of weight versions a stage must hold.
pub fn required_versions(policy: PipelinePolicy, depth: usize, _m: usize) -> usize {
    match policy {
        PipelinePolicy::NoPipelining | PipelinePolicy::GPipe | PipelinePolicy::PipeDreamFlush => 1,
        PipelinePolicy::TwoBW => 2,
        PipelinePolicy::PipeDream1F1B => depth,
    }
}

/// Forwards issued at stage `stage` before its first backward under 1F1B.
pub fn warmup_depth(depth: usize, stage: usize, m: usize) -> usize {
    (depth - stage).min(m)
}

#[derive(Clone, Copy)]
enum Pass {
    F(u32),
    B(u32),
    Update(u32),
}

// One-forward-one-backward order over microbatches `first..first+count`.
fn one_f_one_b(stage: usize, depth: usize, first: u32, count: usize, update_every: Option<usize>) -> Vec<Pass> {
    let warm = warmup_depth(depth, stage, count);
    let mut seq = Vec::with_capacity(3 * count);
    let mut next_f = 0usize;
    for _ in 0..warm {
        seq.push(Pass::F(first + next_f as u32));
        next_f += 1;
    }
    for done in 0..count {
        let k = first + done as u32;
        seq.push(Pass::B(k));
        if let Some(every) = update_every {
            if (done + 1) % every == 0 {
                seq.push(Pass::Update(((done + 1) / every) as u32));
            }
        }
        if next_f < count {
            seq.push(Pass::F(first + next_f as u32));
            next_f += 1;
        }
    }
    seq
}

fn compute_order(policy: PipelinePolicy, stage: usize, depth: usize, m: usize, batches: usize) -> Vec<Pass> {
    let total = m * batches;
    match policy {
        PipelinePolicy::NoPipelining => {
            let mut seq = Vec::new();
            for t in 0..batches {
                for i in 0..m {
                    let k = (t * m + i + 1) as u32;
                    seq.push(Pass::F(k));
                    seq.push(Pass::B(k));
                }
                seq.push(Pass::Update(t as u32 + 1));
            }
            seq
        }
        PipelinePolicy::GPipe => {
            let mut seq = Vec::new();
            for t in 0..batches {
                let base = (t * m) as u32;
                seq.extend((1..=m as u32).map(|i| Pass::F(base + i)));
                seq.extend((1..=m as u32).map(|i| Pass::B(base + i)));
                seq.push(Pass::Update(t as u32 + 1));
            }
            seq
        }
        PipelinePolicy::PipeDreamFlush => {
            let mut seq = Vec::new();
            for t in 0..batches {
                seq.extend(one_f_one_b(stage, depth, (t * m) as u32 + 1, m, None));
                seq.push(Pass::Update(t as u32 + 1));
            }
            seq
        }
        PipelinePolicy::TwoBW => one_f_one_b(stage, depth, 1, total, Some(m)),
        PipelinePolicy::PipeDream1F1B => one_f_one_b(stage, depth, 1, total, Some(1)),
    }
}

fn version_for(policy: PipelinePolicy, k: u32, m: usize) -> VersionRef {
    match policy {
        PipelinePolicy::TwoBW => VersionRef::Fixed(weight_version_2bw(k, m as u32)),
        PipelinePolicy::PipeDream1F1B => VersionRef::Latest,
        _ => VersionRef::Fixed((k - 1) / m as u32),
    }
}

/// Builds one program per stage.
///
/// Every Forward at a non-first stage is preceded by an ActivationRecv and
/// every Forward at a non-last stage is followed by an ActivationSend;
/// backward passes mirror this with gradients. Each WeightUpdate is preceded
/// by the AllReduce that aggregates gradients across stage replicas; flushing
/// policies follow it with a FlushBarrier.
pub fn generate_schedule(policy: PipelinePolicy, depth: usize, m: usize, num_batches: usize) -> Result<Vec<StageProgram>> {
    if depth == 0 || m == 0 || num_batches == 0 {
        return Err(Error::Shape(format!(
            "depth, microbatches and batches must be positive (d={depth}, m={m}, batches={num_batches})"
        )));
    }
    if policy == PipelinePolicy::TwoBW && m < depth {
        return Err(Error::Shape(format!(
            "double-buffered updates need at least d={depth} microbatches per batch, got m={m}"
        )));
    }
    u32::try_from(m * num_batches).map_err(|_| Error::Shape("too many microbatches".into()))?;

    Ok((0..depth)
        .map(|stage| {
            let first = stage == 0;
            let last = stage + 1 == depth;
            let mut ops = Vec::new();
            for pass in compute_order(policy, stage, depth, m, num_batches) {
                match pass {
                    Pass::F(k) => {
                        if !first {
                            ops.push(ScheduledOp::transfer(OpKind::ActivationRecv, k));
                        }
                        ops.push(ScheduledOp::forward(k, version_for(policy, k, m)));
                        if !last {
                            ops.push(ScheduledOp::transfer(OpKind::ActivationSend, k));
                        }
                    }
                    Pass::B(k) => {
                        if !last {
                            ops.push(ScheduledOp::transfer(OpKind::GradRecv, k));
                        }
                        ops.push(ScheduledOp::backward(k, version_for(policy, k, m)));
                        if !first {
                            ops.push(ScheduledOp::transfer(OpKind::GradSend, k));
                        }
                    }
                    Pass::Update(v) => {
                        ops.push(ScheduledOp::bare(OpKind::AllReduce));
                        ops.push(ScheduledOp::update(VersionRef::Fixed(v)));
                        if policy.flushes() {
                            ops.push(ScheduledOp::bare(OpKind::FlushBarrier));
                        }
                    }
                }
            }
            StageProgram { stage, ops }
        })
        .collect())
}
