//! Simulation, verification and planning for pipeline-parallel training
//! schedules: GPipe, PipeDream (weight stashing), PipeDream-Flush and
//! double-buffered weight updates (2BW).

pub mod costmodel;
pub mod error;
pub mod fixtures;
pub mod planner;
pub mod profile;
pub mod render;
pub mod schedule;
pub mod semantics;
pub mod simulator;

pub use error::{Error, Result};
pub use planner::{plan, PlanResult};
pub use profile::{ClusterSpec, ModelProfile, ParallelConfig, StageProfile, UniformBlock};
pub use schedule::{generate_schedule, OpKind, PipelinePolicy, ScheduledOp, StageProgram, VersionRef};
pub use render::{render_timeline, RenderFormat};
pub use simulator::{measure_high_water, simulate, SimReport};
