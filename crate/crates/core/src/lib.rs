//! Two-tier KV-cache serving for multi-turn conversations, simulated.
//!
//! Conversation state stays cached between turns in chunks of 32 tokens,
//! spread over a device tier and a host tier. Chunks leave the device in
//! ascending order of recomputation cost per idle second; dropped chunks
//! are rebuilt from raw tokens when the conversation returns. A
//! discrete-event simulator replays conversation traces through the
//! scheduler, timing each step with a cost model instead of a GPU.

pub mod attention;
pub mod batch;
pub mod cache;
pub mod cost_model;
pub mod eviction;
pub mod model_config;
pub mod scheduler;
pub mod simulator;
pub mod swap_engine;
pub mod types;
pub mod workload;

pub use batch::{BatchPlan, SubRequest};
pub use cache::{Location, PagedKvCache};
pub use cost_model::{synthetic_profile, CostProfile};
pub use eviction::PolicyKind;
pub use model_config::ModelConfig;
pub use scheduler::{BatchMode, Scheduler, SchedulerConfig};
pub use simulator::{run, sweep, MetricsReport, RunConfig};
pub use types::{ChunkId, ConvId, ReqId, Slot};
