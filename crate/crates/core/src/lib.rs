//! Distributed EV charging coordination on a radial feeder, solved with a
//! projected primal-dual method, plus the integrity attacks that a tap on
//! the agent/operator channels can mount against it.
//!
//! Everything numerical is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common `f64` instantiation.

pub mod analysis;
pub mod attacks;
pub mod comms;
pub mod error;
pub mod fleet;
pub mod linalg;
pub mod netmodel;
pub mod problem;
pub mod reference;
pub mod scalar;
pub mod spds;

pub use attacks::{
    battery_damage_matrix, equivalent_objective, predicted_activation, time_tuning_matrix, AttackSpec, GoalSpec,
    ReshapeMatrix, StealthGate,
};
pub use comms::{
    AgentNode, Broadcast, Channel, ChannelTap, CouplingData, Direction, LogLevel, LogRecord, MessageBus, MessageKind,
    OperatorNode, Payload, TapContext, TapHandle,
};
pub use error::{Error, Result};
pub use fleet::{energy_requirement, ChargingProfile, EvSpec, FeasibleSet};
pub use linalg::Matrix;
pub use netmodel::{
    baseline_voltage_drop, build_injection_model, nodal_voltages, shared_path_matrices, stacked_voltages,
    BaselineProfile, DistributionNetwork, InjectionModel, Line, PerUnitBase,
};
pub use problem::{DualState, EqualityCoupling, InequalityCoupling, ProblemParts, ValleyFillingProblem};
pub use reference::{kkt_report, project_feasible, reference_solve, DiagQuadratic, KktReport, ProjectionQuery, ReferenceOptions, ReferenceSolution};
pub use scalar::Scalar;
pub use spds::{
    dual_update, primal_update, primal_update_damped, run as run_spds, InjectionMode, PrimalInjection, run_in_memory, AttackActivity, IterationRecord, IterationTrace,
    RunOptions, SpdsConfig, SpdsOutcome, StepSchedule,
};

pub type Network = DistributionNetwork<f64>;
pub type Baseline = BaselineProfile<f64>;
pub type Injection = InjectionModel<f64>;
pub type Ev = EvSpec<f64>;
pub type LocalSet = FeasibleSet<f64>;
pub type Problem = ValleyFillingProblem<f64>;
pub type Duals = DualState<f64>;
pub type Attack = AttackSpec<f64>;
pub type Config = SpdsConfig<f64>;
pub type Outcome = SpdsOutcome<f64>;
