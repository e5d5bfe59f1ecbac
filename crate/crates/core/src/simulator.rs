//! Deterministic discrete-event execution of stage programs.
//!
//! Each worker owns two lanes. The compute lane runs forward, backward and
//! recompute passes, point-to-point transfers and flush barriers strictly in
//! program order. The collective lane runs the gradient all-reduce and the
//! weight update that consumes it, so a policy that does not need the new
//! weights immediately (double buffering) overlaps them with compute.
//!
//! A transfer of `n` bytes over a link of bandwidth `β` occupies `n/β` on the
//! sender's compute lane and another `n/β` on the receiver's once the data has
//! arrived. Replicas of a pipeline run in lockstep, so one pipeline is
//! simulated and replicas only show up through the all-reduce cost.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::costmodel::{allreduce_time, link_bandwidth};
use crate::error::{Error, Result};
use crate::profile::{ClusterSpec, ModelProfile, ParallelConfig, StageProfile};
use crate::schedule::{generate_schedule, OpKind, PipelinePolicy, ScheduledOp, StageProgram, VersionRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Lane {
    Compute,
    Collective,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub worker: usize,
    pub lane: Lane,
    /// The op as executed; `Latest` versions are resolved to an index.
    pub op: ScheduledOp,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemorySample {
    pub time: f64,
    pub weight_versions: usize,
    pub activation_stashes: usize,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryTrace {
    pub samples: Vec<MemorySample>,
}

impl MemoryTrace {
    pub fn peak_bytes(&self) -> u64 {
        self.samples.iter().map(|s| s.bytes).max().unwrap_or(0)
    }

    pub fn peak_versions(&self) -> usize {
        self.samples.iter().map(|s| s.weight_versions).max().unwrap_or(0)
    }

    pub fn peak_stashes(&self) -> usize {
        self.samples.iter().map(|s| s.activation_stashes).max().unwrap_or(0)
    }

    /// Peak version count from `after` onwards.
    pub fn peak_versions_after(&self, after: f64) -> usize {
        self.samples
            .iter()
            .filter(|s| s.time >= after)
            .map(|s| s.weight_versions)
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub label: String,
    pub config: ParallelConfig,
    pub microbatches_per_batch: usize,
    pub num_batches: usize,
    pub timeline: Vec<TimelineEntry>,
    /// Samples per second over the measured window, across all replicas.
    pub throughput: f64,
    pub bubble_fraction: f64,
    pub steady_batch_time: f64,
    /// Completion time of every batch.
    pub batch_completion: Vec<f64>,
    /// Measured window `[start, end]`.
    pub window: (f64, f64),
    pub memory: Vec<MemoryTrace>,
}

impl SimReport {
    pub fn workers(&self) -> usize {
        self.memory.len()
    }

    /// Seconds per microbatch in steady state.
    pub fn steady_microbatch_time(&self) -> f64 {
        self.steady_batch_time / self.microbatches_per_batch as f64
    }

    pub fn makespan(&self) -> f64 {
        self.timeline.iter().map(|e| e.end).fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Compute-lane entries of one worker in execution order.
    pub fn worker_entries(&self, worker: usize) -> impl Iterator<Item = &TimelineEntry> {
        self.timeline
            .iter()
            .filter(move |e| e.worker == worker && e.lane == Lane::Compute)
    }
}

/// Per-worker peak resident bytes.
pub fn measure_high_water(report: &SimReport) -> Vec<u64> {
    report.memory.iter().map(MemoryTrace::peak_bytes).collect()
}

/// Generates the programs for `policy` and simulates them.
pub fn run(
    policy: PipelinePolicy,
    model: &ModelProfile,
    cluster: &ClusterSpec,
    cfg: &ParallelConfig,
    num_batches: usize,
) -> Result<SimReport> {
    let programs = generate_schedule(policy, cfg.depth, cfg.microbatches_per_batch(), num_batches)?;
    let mut report = simulate(&programs, model, cluster, cfg, num_batches)?;
    report.label = policy.name().to_string();
    Ok(report)
}

pub fn simulate(
    programs: &[StageProgram],
    model: &ModelProfile,
    cluster: &ClusterSpec,
    cfg: &ParallelConfig,
    num_batches: usize,
) -> Result<SimReport> {
    cfg.validate(cluster)?;
    if num_batches == 0 {
        return Err(Error::Config("at least one batch is required".into()));
    }
    if programs.len() != cfg.depth {
        return Err(Error::Shape(format!(
            "{} programs for a depth-{} configuration",
            programs.len(),
            cfg.depth
        )));
    }
    let stages = model.partition_equal(cfg.depth)?;
    let durations = Durations::new(&stages, cluster, cfg)?;
    let mut engine = Engine::new(programs, &durations, cfg.recompute);
    engine.run()?;
    engine.into_report(&stages, cfg, num_batches)
}

struct Durations {
    fwd: Vec<f64>,
    bwd: Vec<f64>,
    /// Transfer time across link `s ↔ s+1`, one direction.
    link: Vec<f64>,
    allreduce: Vec<f64>,
}

impl Durations {
    fn new(stages: &[StageProfile], cluster: &ClusterSpec, cfg: &ParallelConfig) -> Result<Self> {
        let b = cfg.microbatch_size;
        let mut link = Vec::new();
        for (s, stage) in stages.iter().enumerate().take(stages.len().saturating_sub(1)) {
            let bytes = stage.act_boundary(b)?;
            link.push(bytes as f64 / link_bandwidth(cluster, cfg.width, s));
        }
        Ok(Durations {
            fwd: stages.iter().map(|s| s.fwd_time(b)).collect::<Result<_>>()?,
            bwd: stages.iter().map(|s| s.bwd_time(b)).collect::<Result<_>>()?,
            link,
            allreduce: stages
                .iter()
                .map(|s| allreduce_time(s.weight_bytes, cfg.width, cluster))
                .collect(),
        })
    }

    fn of(&self, stage: usize, kind: OpKind) -> f64 {
        match kind {
            OpKind::Forward | OpKind::Recompute => self.fwd[stage],
            OpKind::Backward => self.bwd[stage],
            OpKind::ActivationSend | OpKind::GradRecv => self.link[stage],
            OpKind::ActivationRecv | OpKind::GradSend => self.link[stage - 1],
            OpKind::AllReduce => self.allreduce[stage],
            OpKind::WeightUpdate | OpKind::FlushBarrier => 0.0,
        }
    }
}

#[derive(Default)]
struct StageState {
    pc: usize,
    compute_free: f64,
    collective_free: f64,
    /// End of the last compute-lane op, used to order collectives after it.
    last_compute_end: f64,
    /// Version index -> time it became available.
    versions: BTreeMap<u32, f64>,
    /// Version each in-flight microbatch runs with.
    stashed_version: HashMap<u32, u32>,
    forward_start: HashMap<u32, f64>,
    /// Completion of updates preceding each flush barrier, in order.
    barrier_updates: Vec<f64>,
    barriers_seen: usize,
    pending_update: Option<f64>,
    entries: Vec<TimelineEntry>,
    /// (version, end of a Forward/Backward using it)
    version_uses: Vec<(u32, f64)>,
    /// (forward start, backward end)
    stash_lifetimes: Vec<(f64, f64)>,
}

struct Engine<'a> {
    programs: &'a [StageProgram],
    durations: &'a Durations,
    recompute: bool,
    stages: Vec<StageState>,
    /// (stage, microbatch) -> time the data left the sender.
    activation_sent: HashMap<(usize, u32), f64>,
    grad_sent: HashMap<(usize, u32), f64>,
}

enum Step {
    Done,
    Blocked,
    Advanced,
}

impl<'a> Engine<'a> {
    fn new(programs: &'a [StageProgram], durations: &'a Durations, recompute: bool) -> Self {
        let stages = programs
            .iter()
            .map(|_| {
                let mut s = StageState::default();
                s.versions.insert(0, 0.0);
                s
            })
            .collect();
        Engine {
            programs,
            durations,
            recompute,
            stages,
            activation_sent: HashMap::new(),
            grad_sent: HashMap::new(),
        }
    }

    fn run(&mut self) -> Result<()> {
        loop {
            let mut progressed = false;
            let mut all_done = true;
            for s in 0..self.stages.len() {
                loop {
                    match self.step(s)? {
                        Step::Advanced => progressed = true,
                        Step::Blocked => {
                            all_done = false;
                            break;
                        }
                        Step::Done => break,
                    }
                }
            }
            if all_done {
                return Ok(());
            }
            if !progressed {
                let stuck: Vec<String> = self
                    .stages
                    .iter()
                    .enumerate()
                    .filter(|(i, st)| st.pc < self.programs[*i].ops.len())
                    .map(|(i, st)| format!("stage {i} at {}", self.programs[i].ops[st.pc]))
                    .collect();
                return Err(Error::Deadlock(stuck.join("; ")));
            }
        }
    }

    fn push(&mut self, stage: usize, lane: Lane, op: ScheduledOp, start: f64, end: f64) {
        self.stages[stage].entries.push(TimelineEntry {
            worker: stage,
            lane,
            op,
            start,
            end,
        });
    }

    fn step(&mut self, s: usize) -> Result<Step> {
        let Some(&op) = self.programs[s].ops.get(self.stages[s].pc) else {
            return Ok(Step::Done);
        };
        let d = self.programs.len();
        let dur = self.durations.of(s, op.kind);
        let mb = op.microbatch;
        match op.kind {
            OpKind::AllReduce | OpKind::WeightUpdate => {
                let st = &mut self.stages[s];
                let start = st.collective_free.max(st.last_compute_end);
                let end = start + dur;
                st.collective_free = end;
                if op.kind == OpKind::WeightUpdate {
                    let Some(VersionRef::Fixed(v)) = op.version else {
                        return Err(Error::Shape(format!("stage {s}: update without a version: {op}")));
                    };
                    st.versions.insert(v, end);
                    st.pending_update = Some(end);
                }
                self.push(s, Lane::Collective, op, start, end);
            }
            OpKind::FlushBarrier => {
                let n = self.stages[s].barriers_seen;
                if self.stages[s].barrier_updates.len() <= n {
                    let done = self.stages[s].pending_update.take().unwrap_or(self.stages[s].compute_free);
                    self.stages[s].barrier_updates.push(done);
                }
                let mut release = self.stages[s].compute_free;
                for peer in &self.stages {
                    match peer.barrier_updates.get(n) {
                        Some(t) => release = release.max(*t),
                        None => return Ok(Step::Blocked),
                    }
                }
                let st = &mut self.stages[s];
                st.barriers_seen += 1;
                st.compute_free = release;
                st.last_compute_end = release;
                self.push(s, Lane::Compute, op, release, release);
            }
            kind => {
                let k = mb.ok_or_else(|| Error::Shape(format!("stage {s}: {op} lacks a microbatch")))?;
                let ready = match kind {
                    OpKind::ActivationRecv => {
                        if s == 0 {
                            return Err(Error::Shape("first stage cannot receive activations".into()));
                        }
                        match self.activation_sent.get(&(s - 1, k)) {
                            Some(t) => *t,
                            None => return Ok(Step::Blocked),
                        }
                    }
                    OpKind::GradRecv => {
                        if s + 1 == d {
                            return Err(Error::Shape("last stage cannot receive gradients".into()));
                        }
                        match self.grad_sent.get(&(s + 1, k)) {
                            Some(t) => *t,
                            None => return Ok(Step::Blocked),
                        }
                    }
                    OpKind::Forward => match op.version {
                        Some(VersionRef::Fixed(v)) => match self.stages[s].versions.get(&v) {
                            Some(t) => *t,
                            None => {
                                return Err(Error::Deadlock(format!(
                                    "stage {s}: version {v} is used before any update produces it"
                                )))
                            }
                        },
                        _ => 0.0,
                    },
                    _ => 0.0,
                };
                let st = &mut self.stages[s];
                let start = st.compute_free.max(ready);
                let mut resolved = op;
                match kind {
                    OpKind::Forward => {
                        let v = match op.version {
                            Some(VersionRef::Fixed(v)) => v,
                            _ => st
                                .versions
                                .iter()
                                .filter(|(_, avail)| **avail <= start)
                                .map(|(v, _)| *v)
                                .max()
                                .unwrap_or(0),
                        };
                        st.stashed_version.insert(k, v);
                        st.forward_start.insert(k, start);
                        resolved.version = Some(VersionRef::Fixed(v));
                    }
                    OpKind::Backward => {
                        let v = *st
                            .stashed_version
                            .get(&k)
                            .ok_or_else(|| Error::Shape(format!("stage {s}: backward of {k} before its forward")))?;
                        if let Some(VersionRef::Fixed(want)) = op.version {
                            if want != v {
                                return Err(Error::Shape(format!(
                                    "stage {s}: microbatch {k} forward used version {v}, backward asks for {want}"
                                )));
                            }
                        }
                        resolved.version = Some(VersionRef::Fixed(v));
                    }
                    _ => {}
                }
                let mut start = start;
                if kind == OpKind::Backward && self.recompute {
                    let rdur = self.durations.of(s, OpKind::Recompute);
                    let rop = ScheduledOp::recompute(k, resolved.version.unwrap());
                    self.push(s, Lane::Compute, rop, start, start + rdur);
                    start += rdur;
                }
                let end = start + dur;
                let st = &mut self.stages[s];
                st.compute_free = end;
                st.last_compute_end = end;
                match kind {
                    OpKind::ActivationSend => {
                        self.activation_sent.insert((s, k), end);
                    }
                    OpKind::GradSend => {
                        self.grad_sent.insert((s, k), end);
                    }
                    OpKind::Forward => {
                        let v = st.stashed_version[&k];
                        st.version_uses.push((v, end));
                    }
                    OpKind::Backward => {
                        let v = st.stashed_version.remove(&k).unwrap();
                        st.version_uses.push((v, end));
                        let f = st.forward_start.remove(&k).unwrap();
                        st.stash_lifetimes.push((f, end));
                    }
                    _ => {}
                }
                self.push(s, Lane::Compute, resolved, start, end);
            }
        }
        self.stages[s].pc += 1;
        Ok(Step::Advanced)
    }

    fn into_report(self, stages: &[StageProfile], cfg: &ParallelConfig, num_batches: usize) -> Result<SimReport> {
        let m = cfg.microbatches_per_batch();
        let d = self.stages.len();

        let mut batch_completion = vec![0.0f64; num_batches];
        for st in &self.stages {
            for (t, slot) in batch_completion.iter_mut().enumerate() {
                let last = ((t + 1) * m) as u32;
                let pos = st
                    .entries
                    .iter()
                    .position(|e| e.op.kind == OpKind::Backward && e.op.microbatch == Some(last))
                    .ok_or_else(|| Error::Shape(format!("batch {} never completes", t + 1)))?;
                // the batch also owns the collectives that directly follow its last backward
                let mut done = st.entries[pos].end;
                for e in &st.entries[pos + 1..] {
                    match e.op.kind {
                        OpKind::AllReduce | OpKind::WeightUpdate => done = done.max(e.end),
                        OpKind::GradSend | OpKind::FlushBarrier => done = done.max(e.end),
                        _ => break,
                    }
                }
                *slot = slot.max(done);
            }
        }

        let mut timeline: Vec<TimelineEntry> = Vec::new();
        let mut memory = Vec::with_capacity(d);
        for (i, st) in self.stages.into_iter().enumerate() {
            memory.push(memory_trace(&st, &stages[i], cfg)?);
            timeline.extend(st.entries);
        }
        timeline.sort_by(|a, b| {
            a.start
                .total_cmp(&b.start)
                .then(a.worker.cmp(&b.worker))
                .then((a.lane as u8).cmp(&(b.lane as u8)))
        });

        let makespan = timeline.iter().map(|e| e.end).fold(0.0, f64::max);
        let (window, steady_batch_time) = if num_batches >= 3 {
            let a = batch_completion[0];
            let e = batch_completion[num_batches - 2];
            ((a, e), (e - a) / (num_batches - 2) as f64)
        } else {
            ((0.0, makespan), makespan / num_batches as f64)
        };
        let span = window.1 - window.0;
        let busy: f64 = timeline
            .iter()
            .filter(|e| e.lane == Lane::Compute)
            .map(|e| (e.end.min(window.1) - e.start.max(window.0)).max(0.0))
            .sum();
        let bubble_fraction = if span > 0.0 {
            (1.0 - busy / (d as f64 * span)).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let throughput = cfg.global_batch() as f64 / steady_batch_time;

        Ok(SimReport {
            label: String::new(),
            config: *cfg,
            microbatches_per_batch: m,
            num_batches,
            timeline,
            throughput,
            bubble_fraction,
            steady_batch_time,
            batch_completion,
            window,
            memory,
        })
    }
}

// Versions live from the update that creates them until both their last use
// has finished and a newer version exists.
fn memory_trace(st: &StageState, stage: &StageProfile, cfg: &ParallelConfig) -> Result<MemoryTrace> {
    let mut last_use: HashMap<u32, f64> = HashMap::new();
    for &(v, end) in &st.version_uses {
        let e = last_use.entry(v).or_insert(end);
        *e = e.max(end);
    }
    // (time, order, dv, ds): releases sort before acquisitions at equal times
    let mut events: Vec<(f64, u8, i64, i64)> = Vec::new();
    let created: Vec<(u32, f64)> = st.versions.iter().map(|(v, t)| (*v, *t)).collect();
    for (i, &(v, t)) in created.iter().enumerate() {
        events.push((t, 1, 1, 0));
        if let Some(&(_, next)) = created.get(i + 1) {
            let until = last_use.get(&v).copied().unwrap_or(next).max(next);
            events.push((until, 0, -1, 0));
        }
    }
    for &(f, b) in &st.stash_lifetimes {
        events.push((f, 1, 0, 1));
        events.push((b, 0, 0, -1));
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let b = cfg.microbatch_size;
    let mut samples = Vec::new();
    let (mut versions, mut stashes) = (0i64, 0i64);
    let mut i = 0;
    while i < events.len() {
        let t = events[i].0;
        while i < events.len() && events[i].0 == t {
            versions += events[i].2;
            stashes += events[i].3;
            i += 1;
        }
        let (nv, ns) = (versions as usize, stashes as usize);
        samples.push(MemorySample {
            time: t,
            weight_versions: nv,
            activation_stashes: ns,
            bytes: crate::costmodel::resident_bytes(stage, b, nv, ns, cfg.recompute)?,
        });
    }
    Ok(MemoryTrace { samples })
}
