//! Joint load balancing and offloading for anycast CDNs.
//!
//! Proxies sit behind anycast addresses whose routing is captured by a
//! row-stochastic correlation matrix. Each node decides what fraction of its
//! DNS arrivals to redirect onto the anycast address; the rest is offloaded.

pub mod cost;
pub mod dual;
pub mod dynamics;
pub mod fastcontrol;
pub mod harness;
pub mod model;

pub use cost::{CostError, CostParams, OffloadCostParams};
pub use dual::{run_dual, run_dual_with, ConvergenceReport, DualError, DualOptions, StepSizePolicy};
pub use fastcontrol::{run_distributed, ChannelMode, DistributedOptions, FastControlError, FastControlReport};
pub use model::{ArrivalRates, CapacityVector, ControlVector, CorrelationMatrix, LoadVector, ModelError, SystemInstance};
