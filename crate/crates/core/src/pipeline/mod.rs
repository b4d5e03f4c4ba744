//! Mode orchestration: wiring the 2D frontend, local map, solvers, and
//! backend into the five tracking modes.

mod config;
mod run;
mod source;
mod trajectory;

pub use config::{
    parse_kv, parse_rig_text, rig_to_text, Mode, MonoBootstrapConfig, PipelineConfig,
    VioPipelineConfig,
};
pub use run::{run, PipelineError, RunOutput};
pub use source::{FrameSource, PipelineFrame};
pub use trajectory::{FrameStatus, TrajectoryEntry, TrajectoryEstimate};
