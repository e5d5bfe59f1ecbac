//! Small timeline fixtures shaped like the classic pipeline diagrams:
//! one block per stage, backward twice as long as forward, free transfers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::{ClusterSpec, ModelProfile, ParallelConfig, UniformBlock};
use crate::schedule::PipelinePolicy;
use crate::simulator::{run, SimReport};

pub const FIGURES: [&str; 5] = ["fig1a", "fig1b", "fig2", "fig3a", "fig3b"];

const GB: u64 = 1_000_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub name: String,
    pub description: String,
    pub policy: PipelinePolicy,
    pub model: ModelProfile,
    pub cluster: ClusterSpec,
    pub config: ParallelConfig,
    pub num_batches: usize,
}

impl Fixture {
    pub fn simulate(&self) -> Result<SimReport> {
        let mut report = run(self.policy, &self.model, &self.cluster, &self.config, self.num_batches)?;
        report.label = self.name.clone();
        Ok(report)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fixture serializes")
    }
}

/// `depth` identical blocks with `t_f = 1 s`, `t_b = 2 s` at `b = 1` and
/// zero-byte stage boundaries.
pub fn unit_pipeline(depth: usize) -> ModelProfile {
    let block = UniformBlock {
        fwd_ms: 1000.0,
        bwd_ms: 2000.0,
        weight_bytes: 2 * GB,
        act_total_bytes: GB,
        act_input_bytes: GB / 4,
    };
    let mut model = ModelProfile::uniform("unit-pipeline", depth, block, &[1]).expect("valid uniform profile");
    for b in &mut model.blocks {
        b.act_boundary_bytes.values_mut().for_each(|v| *v = 0);
    }
    model
}

pub fn figure(name: &str) -> Result<Fixture> {
    let (description, policy, depth, batches) = match name {
        "fig1a" => ("GPipe, 4 stages, 4 microbatches per batch", PipelinePolicy::GPipe, 4, 3),
        "fig1b" => ("PipeDream 1F1B with weight stashing, 4 stages", PipelinePolicy::PipeDream1F1B, 4, 3),
        "fig2" => ("double-buffered weight updates, 4 stages, m = 4", PipelinePolicy::TwoBW, 4, 4),
        "fig3a" => ("GPipe, 2 stages, 4 microbatches per batch", PipelinePolicy::GPipe, 2, 3),
        "fig3b" => ("PipeDream-Flush, 2 stages, 4 microbatches per batch", PipelinePolicy::PipeDreamFlush, 2, 3),
        other => {
            return Err(Error::Config(format!(
                "unknown fixture {other:?}; expected one of {}",
                FIGURES.join(", ")
            )))
        }
    };
    let grad_accum = 4 / depth;
    Ok(Fixture {
        name: name.to_string(),
        description: description.to_string(),
        policy,
        model: unit_pipeline(depth),
        cluster: ClusterSpec {
            total_workers: depth,
            gpus_per_server: depth,
            bandwidth_high: 1e11,
            bandwidth_low: 1e10,
            memory_capacity: 80 * GB,
        },
        config: ParallelConfig::new(1, depth, 1, false, grad_accum),
        num_batches: batches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{OpKind, VersionRef};

    #[test]
    fn all_figures_simulate() {
        for name in FIGURES {
            let f = figure(name).unwrap();
            assert_eq!(f.config.microbatches_per_batch(), 4);
            f.simulate().unwrap();
        }
        assert!(figure("fig9").is_err());
    }

    #[test]
    fn fig2_forward_nine_on_last_worker_uses_version_one() {
        let report = figure("fig2").unwrap().simulate().unwrap();
        let e = report
            .worker_entries(3)
            .find(|e| e.op.kind == OpKind::Forward && e.op.microbatch == Some(9))
            .unwrap();
        assert_eq!(e.op.version, Some(VersionRef::Fixed(1)));
    }

    #[test]
    fn fig2_steady_state_has_no_bubble() {
        let report = figure("fig2").unwrap().simulate().unwrap();
        assert!(report.bubble_fraction.abs() < 1e-12, "{}", report.bubble_fraction);
        assert_eq!(report.memory.iter().map(|m| m.peak_versions()).max(), Some(2));
    }
}
