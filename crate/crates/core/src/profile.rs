//! Model cost profiles, cluster descriptions and parallel configurations.
//!
//! Every quantity the cost model and the simulator consume lives here. Profiles
//! are tables keyed by per-GPU microbatch size; a lookup for a size that was
//! never profiled is an error rather than an interpolation.

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Per-microbatch-size table. Serialized with string keys (`"1"`, `"2"`, ...).
pub type Table<T> = BTreeMap<u32, T>;

/// Cost profile of one repeated block (e.g. a transformer layer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockProfile {
    pub fwd_ms: Table<f64>,
    pub bwd_ms: Table<f64>,
    pub weight_bytes: u64,
    pub act_total_bytes: Table<u64>,
    pub act_input_bytes: Table<u64>,
    pub act_boundary_bytes: Table<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub model: String,
    pub blocks: Vec<BlockProfile>,
}

/// Five scalars describing one block at microbatch size 1. Times and
/// activation sizes scale linearly with the microbatch size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformBlock {
    pub fwd_ms: f64,
    pub bwd_ms: f64,
    pub weight_bytes: u64,
    pub act_total_bytes: u64,
    pub act_input_bytes: u64,
}

impl UniformBlock {
    fn at(&self, sizes: &[u32], time_exponent: f64) -> BlockProfile {
        let times = |t1: f64| -> Table<f64> {
            sizes
                .iter()
                .map(|&b| (b, t1 * f64::from(b).powf(time_exponent)))
                .collect()
        };
        let bytes = |v: u64| -> Table<u64> { sizes.iter().map(|&b| (b, v * u64::from(b))).collect() };
        BlockProfile {
            fwd_ms: times(self.fwd_ms),
            bwd_ms: times(self.bwd_ms),
            weight_bytes: self.weight_bytes,
            act_total_bytes: bytes(self.act_total_bytes),
            act_input_bytes: bytes(self.act_input_bytes),
            // a block's input and output hidden states have the same shape
            act_boundary_bytes: bytes(2 * self.act_input_bytes),
        }
    }
}

impl ModelProfile {
    /// Builds `count` identical blocks whose times scale linearly in `b`.
    pub fn uniform(name: &str, count: usize, block: UniformBlock, sizes: &[u32]) -> Result<Self> {
        Self::uniform_scaled(name, count, block, sizes, 1.0)
    }

    /// Like [`ModelProfile::uniform`], but per-microbatch times scale as
    /// `b^time_exponent`. An exponent below one models kernels whose
    /// arithmetic intensity improves with larger microbatches.
    pub fn uniform_scaled(
        name: &str,
        count: usize,
        block: UniformBlock,
        sizes: &[u32],
        time_exponent: f64,
    ) -> Result<Self> {
        let profile = ModelProfile {
            model: name.to_string(),
            blocks: vec![block.at(sizes, time_exponent); count],
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn load<R: Read>(source: R) -> Result<Self> {
        let doc: RawProfile = serde_json::from_reader(source)?;
        let profile = doc.into_profile()?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Self::load(s.as_bytes())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Ascending microbatch sizes shared by every table.
    pub fn microbatch_sizes(&self) -> Vec<u32> {
        self.blocks
            .first()
            .map(|b| b.fwd_ms.keys().copied().collect())
            .unwrap_or_default()
    }

    pub fn total_weight_bytes(&self) -> u64 {
        self.blocks.iter().map(|b| b.weight_bytes).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(invalid("blocks", "model has no blocks"));
        }
        let keys: Vec<u32> = self.blocks[0].fwd_ms.keys().copied().collect();
        if keys.is_empty() {
            return Err(invalid("blocks[0].fwd_ms", "empty table"));
        }
        for (i, block) in self.blocks.iter().enumerate() {
            check_keys(&format!("blocks[{i}].fwd_ms"), &keys, &block.fwd_ms)?;
            check_keys(&format!("blocks[{i}].bwd_ms"), &keys, &block.bwd_ms)?;
            check_keys(&format!("blocks[{i}].act_total_bytes"), &keys, &block.act_total_bytes)?;
            check_keys(&format!("blocks[{i}].act_input_bytes"), &keys, &block.act_input_bytes)?;
            check_keys(&format!("blocks[{i}].act_boundary_bytes"), &keys, &block.act_boundary_bytes)?;
            for (name, table) in [("fwd_ms", &block.fwd_ms), ("bwd_ms", &block.bwd_ms)] {
                for (b, t) in table {
                    if !(t.is_finite() && *t > 0.0) {
                        return Err(invalid(
                            format!("blocks[{i}].{name}[{b}]"),
                            format!("time must be positive, got {t}"),
                        ));
                    }
                }
            }
            for b in &keys {
                if block.act_input_bytes[b] > block.act_total_bytes[b] {
                    return Err(invalid(
                        format!("blocks[{i}].act_input_bytes[{b}]"),
                        "input activation exceeds total activation",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Splits the model into `depth` stages with an equal number of blocks.
    pub fn partition_equal(&self, depth: usize) -> Result<Vec<StageProfile>> {
        let n = self.blocks.len();
        if depth == 0 || !n.is_multiple_of(depth) {
            return Err(Error::Indivisible { depth, blocks: n });
        }
        let per = n / depth;
        Ok(self
            .blocks
            .chunks(per)
            .enumerate()
            .map(|(index, blocks)| StageProfile::aggregate(index, blocks))
            .collect())
    }
}

fn check_keys<T>(field: &str, expected: &[u32], table: &Table<T>) -> Result<()> {
    if !table.keys().copied().eq(expected.iter().copied()) {
        let got: Vec<u32> = table.keys().copied().collect();
        return Err(invalid(
            field,
            format!("microbatch keys {got:?} do not match {expected:?}"),
        ));
    }
    Ok(())
}

// Loosely typed mirror of the document so that violations can name the field.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProfile {
    model: String,
    blocks: Vec<RawBlock>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBlock {
    fwd_ms: BTreeMap<String, f64>,
    bwd_ms: BTreeMap<String, f64>,
    weight_bytes: serde_json::Number,
    act_total_bytes: BTreeMap<String, serde_json::Number>,
    act_input_bytes: BTreeMap<String, serde_json::Number>,
    act_boundary_bytes: BTreeMap<String, serde_json::Number>,
}

fn parse_key(field: &str, key: &str) -> Result<u32> {
    match key.parse::<u32>() {
        Ok(b) if b >= 1 => Ok(b),
        _ => Err(invalid(field, format!("`{key}` is not a microbatch size"))),
    }
}

fn parse_bytes(field: &str, n: &serde_json::Number) -> Result<u64> {
    n.as_u64()
        .ok_or_else(|| invalid(field, format!("byte count must be a non-negative integer, got {n}")))
}

fn time_table(field: &str, raw: BTreeMap<String, f64>) -> Result<Table<f64>> {
    let mut out = Table::new();
    for (k, v) in raw {
        let b = parse_key(field, &k)?;
        if !(v.is_finite() && v > 0.0) {
            return Err(invalid(format!("{field}[{k}]"), format!("time must be positive, got {v}")));
        }
        out.insert(b, v);
    }
    Ok(out)
}

fn byte_table(field: &str, raw: BTreeMap<String, serde_json::Number>) -> Result<Table<u64>> {
    let mut out = Table::new();
    for (k, v) in raw {
        let b = parse_key(field, &k)?;
        out.insert(b, parse_bytes(&format!("{field}[{k}]"), &v)?);
    }
    Ok(out)
}

impl RawProfile {
    fn into_profile(self) -> Result<ModelProfile> {
        let blocks = self
            .blocks
            .into_iter()
            .enumerate()
            .map(|(i, raw)| {
                let p = |name: &str| format!("blocks[{i}].{name}");
                Ok(BlockProfile {
                    fwd_ms: time_table(&p("fwd_ms"), raw.fwd_ms)?,
                    bwd_ms: time_table(&p("bwd_ms"), raw.bwd_ms)?,
                    weight_bytes: parse_bytes(&p("weight_bytes"), &raw.weight_bytes)?,
                    act_total_bytes: byte_table(&p("act_total_bytes"), raw.act_total_bytes)?,
                    act_input_bytes: byte_table(&p("act_input_bytes"), raw.act_input_bytes)?,
                    act_boundary_bytes: byte_table(&p("act_boundary_bytes"), raw.act_boundary_bytes)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelProfile {
            model: self.model,
            blocks,
        })
    }
}

/// Aggregated costs of one pipeline stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageProfile {
    pub index: usize,
    pub blocks: usize,
    /// Seconds.
    pub fwd: Table<f64>,
    /// Seconds.
    pub bwd: Table<f64>,
    pub weight_bytes: u64,
    pub act_total_bytes: Table<u64>,
    /// Input activation of the stage's first block.
    pub act_input_bytes: Table<u64>,
    /// Tensor exchanged with the next stage: boundary size of the last block.
    pub act_boundary_bytes: Table<u64>,
}

impl StageProfile {
    fn aggregate(index: usize, blocks: &[BlockProfile]) -> Self {
        let first = &blocks[0];
        let last = &blocks[blocks.len() - 1];
        let sum_time = |f: fn(&BlockProfile) -> &Table<f64>| -> Table<f64> {
            f(first)
                .keys()
                .map(|b| (*b, blocks.iter().map(|blk| f(blk)[b]).sum::<f64>() / 1000.0))
                .collect()
        };
        StageProfile {
            index,
            blocks: blocks.len(),
            fwd: sum_time(|b| &b.fwd_ms),
            bwd: sum_time(|b| &b.bwd_ms),
            weight_bytes: blocks.iter().map(|b| b.weight_bytes).sum(),
            act_total_bytes: first
                .act_total_bytes
                .keys()
                .map(|b| (*b, blocks.iter().map(|blk| blk.act_total_bytes[b]).sum()))
                .collect(),
            act_input_bytes: first.act_input_bytes.clone(),
            act_boundary_bytes: last.act_boundary_bytes.clone(),
        }
    }

    fn lookup<T: Copy>(table: &Table<T>, b: u32) -> Result<T> {
        table.get(&b).copied().ok_or(Error::MissingMicrobatch { b })
    }

    pub fn fwd_time(&self, b: u32) -> Result<f64> {
        Self::lookup(&self.fwd, b)
    }

    pub fn bwd_time(&self, b: u32) -> Result<f64> {
        Self::lookup(&self.bwd, b)
    }

    pub fn act_total(&self, b: u32) -> Result<u64> {
        Self::lookup(&self.act_total_bytes, b)
    }

    pub fn act_input(&self, b: u32) -> Result<u64> {
        Self::lookup(&self.act_input_bytes, b)
    }

    pub fn act_boundary(&self, b: u32) -> Result<u64> {
        Self::lookup(&self.act_boundary_bytes, b)
    }
}

/// Hardware description. Bandwidths are bytes per second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ClusterDoc", try_from = "ClusterDoc")]
pub struct ClusterSpec {
    pub total_workers: usize,
    pub gpus_per_server: usize,
    pub bandwidth_high: f64,
    pub bandwidth_low: f64,
    pub memory_capacity: u64,
}

/// On-disk cluster document. Bandwidths in GB/s and capacity in GB, with
/// G = 1e9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterDoc {
    pub total_workers: usize,
    pub gpus_per_server: usize,
    pub bandwidth_high_gbps: f64,
    pub bandwidth_low_gbps: f64,
    pub memory_capacity_gb: f64,
}

const GIGA: f64 = 1e9;

impl From<ClusterSpec> for ClusterDoc {
    fn from(spec: ClusterSpec) -> Self {
        spec.to_doc()
    }
}

impl TryFrom<ClusterDoc> for ClusterSpec {
    type Error = Error;

    fn try_from(doc: ClusterDoc) -> Result<Self> {
        ClusterSpec::from_doc(&doc)
    }
}

impl ClusterSpec {
    pub fn load<R: Read>(source: R) -> Result<Self> {
        let doc: ClusterDoc = serde_json::from_reader(source)?;
        Self::from_doc(&doc)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Self::load(s.as_bytes())
    }

    pub fn from_doc(doc: &ClusterDoc) -> Result<Self> {
        if !(doc.memory_capacity_gb.is_finite() && doc.memory_capacity_gb >= 0.0) {
            return Err(invalid("memory_capacity_gb", "must be a non-negative number"));
        }
        let spec = ClusterSpec {
            total_workers: doc.total_workers,
            gpus_per_server: doc.gpus_per_server,
            bandwidth_high: doc.bandwidth_high_gbps * GIGA,
            bandwidth_low: doc.bandwidth_low_gbps * GIGA,
            memory_capacity: (doc.memory_capacity_gb * GIGA).round() as u64,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_doc(&self) -> ClusterDoc {
        ClusterDoc {
            total_workers: self.total_workers,
            gpus_per_server: self.gpus_per_server,
            bandwidth_high_gbps: self.bandwidth_high / GIGA,
            bandwidth_low_gbps: self.bandwidth_low / GIGA,
            memory_capacity_gb: self.memory_capacity as f64 / GIGA,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("cluster serializes")
    }

    /// Zero capacity is accepted so that an operator can ask the planner
    /// about a machine nothing fits on; every configuration is then rejected.
    pub fn validate(&self) -> Result<()> {
        if self.total_workers < 1 {
            return Err(invalid("total_workers", "must be at least 1"));
        }
        if self.gpus_per_server < 1 {
            return Err(invalid("gpus_per_server", "must be at least 1"));
        }
        if !(self.bandwidth_low.is_finite() && self.bandwidth_low > 0.0) {
            return Err(invalid("bandwidth_low_gbps", "must be positive"));
        }
        if !(self.bandwidth_high.is_finite() && self.bandwidth_high >= self.bandwidth_low) {
            return Err(invalid("bandwidth_high_gbps", "must be at least bandwidth_low_gbps"));
        }
        Ok(())
    }
}

/// Width `w`, depth `d`, per-GPU microbatch size `b`, recomputation flag `r`
/// and gradient-accumulation degree `g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParallelConfig {
    pub width: usize,
    pub depth: usize,
    pub microbatch_size: u32,
    pub recompute: bool,
    pub grad_accum: usize,
}

impl ParallelConfig {
    pub fn new(width: usize, depth: usize, microbatch_size: u32, recompute: bool, grad_accum: usize) -> Self {
        ParallelConfig {
            width,
            depth,
            microbatch_size,
            recompute,
            grad_accum,
        }
    }

    /// Microbatches each pipeline processes between weight updates, `m = d·g`.
    pub fn microbatches_per_batch(&self) -> usize {
        self.depth * self.grad_accum
    }

    /// `B = b·w·d·g`.
    pub fn global_batch(&self) -> u64 {
        u64::from(self.microbatch_size) * (self.width * self.depth * self.grad_accum) as u64
    }

    pub fn workers(&self) -> usize {
        self.width * self.depth
    }

    pub fn validate(&self, cluster: &ClusterSpec) -> Result<()> {
        if self.width < 1 || self.depth < 1 || self.microbatch_size < 1 || self.grad_accum < 1 {
            return Err(Error::Config(format!(
                "width, depth, microbatch size and accumulation must all be >= 1 (got {self:?})"
            )));
        }
        if self.workers() > cluster.total_workers {
            return Err(Error::Config(format!(
                "w*d = {} exceeds the {} available workers",
                self.workers(),
                cluster.total_workers
            )));
        }
        Ok(())
    }
}
