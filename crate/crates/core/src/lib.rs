//! Stochastic network loading for urban traffic.
//!
//! Links are modelled as pairs of finite-capacity queues: the upstream
//! queue counts occupied spaces, the downstream queue counts vehicles ready
//! to leave. Each link's queue-length distributions are propagated
//! analytically; nodes couple neighbouring links through blocking
//! probabilities. A discrete-event simulator and a deterministic link
//! transmission model serve as references, and a signal-control layer
//! optimizes green splits against any of the three.

pub mod baseline;
pub mod config;
pub mod error;
pub mod kernel;
pub mod link;
pub mod loader;
pub mod node;
pub mod report;
pub mod scenarios;
pub mod signal;
pub mod sim;

pub use baseline::{run_deterministic_baseline, CumulativeCounts};
pub use config::{DemandProfile, DemandSegment, Network, NetworkConfig, NodeConfig};
pub use error::{Error, Result};
pub use kernel::{health_warning_count, propagate_birth_death, QueueDistribution};
pub use link::{compute_geometry, LinkGeometry, LinkParams};
pub use loader::{run_loading, LinkRecord, Loader, Trajectory};
pub use node::{flow_transmission_probability, NodeSpec};
pub use signal::{optimize, sample_feasible_plan, service_rates_from_plan, ObjectiveModel, SignalPlan};
pub use sim::monte_carlo::{monte_carlo, MonteCarloResult};
pub use sim::simulate_replication;
