//! Perimeter flow-metering laboratory: a grid spatial-queue simulator,
//! no-control and PI baselines, and a PPO-trained metering policy.

pub mod ctrl;
pub mod demand;
pub mod error;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod ppo;
pub mod scenario;
pub mod sim;

pub use error::{DemandError, MetricsError, NetError, NnError, PpoError, SimError};
