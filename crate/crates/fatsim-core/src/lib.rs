//! Deterministic simulator of federated adversarial training.
//!
//! Honest clients run PGD adversarial training on private data partitions, a
//! central server aggregates weight updates with FedAvg or Byzantine-robust
//! rules (Krum, coordinate-wise Trimmed Mean, Bulyan), malicious clients mount
//! convergence or distillation attacks, and an evaluation harness measures
//! apparent vs. true adversarial robustness.
//!
//! Everything is a pure function of (config, seed): reruns produce
//! byte-identical metrics regardless of worker-thread count.

pub mod aggregation;
pub mod autodiff;
pub mod byzantine;
pub mod data;
pub mod evasion;
pub mod nn;
pub mod optim;
pub mod orchestrator;
pub mod seed;

pub use aggregation::{AggregationConfig, AggregationRule, ClientUpdate};
pub use autodiff::{Graph, NodeId, Tensor};
pub use byzantine::{ConvergenceAttackConfig, DistillationAttackConfig};
pub use data::{Dataset, Partition};
pub use evasion::PgdConfig;
pub use nn::{Architecture, ArchKind, ModelParams};
pub use orchestrator::{ExperimentConfig, MixSchedule, RoundRecord};
