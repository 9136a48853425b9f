//! Configuration, traces, generators, the event loop, metrics and sweeps.

pub mod config;
pub mod engine;
pub mod generator;
pub mod metrics;
pub mod sweep;
pub mod trace;
pub mod verify;

pub use config::{ConfigError, SimConfig};
pub use engine::{run, RunOptions, RunOutput, SimError, Simulator};
pub use generator::{GeneratorSpec, RandomTraceSpec};
pub use metrics::{MetricsRow, RunStatus, Summary};
pub use trace::{TraceError, TraceOp};
