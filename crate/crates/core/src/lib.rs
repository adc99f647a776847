//! Discrete-event simulation of microservice applications on a virtualized
//! cluster: request generation, per-service cloudlet scheduling with dynamic
//! derivation along the call graph, resource policies, and QoS telemetry.

pub mod engine;
pub mod model;
pub mod policies;
pub mod registry;
pub mod scenarios;
pub mod scheduling;
pub mod simulation;
pub mod telemetry;
pub mod workload;

pub use engine::{EventKind, Kernel, SimTime};
pub use model::{ApiId, Cluster, InstanceId, ModelError, ServiceGraph, ServiceId, VmId};
pub use policies::{Direction, Outcome, Provisioner, ScalingDecision};
pub use registry::{RegistryError, Scenario, ScenarioConfig};
pub use simulation::{run_scenario, RunOutput, SimError, Simulation};
pub use telemetry::{QosReport, Report};
pub use workload::{predict, Prediction, Request, RequestStatus};
