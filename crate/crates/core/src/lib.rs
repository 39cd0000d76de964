//! Dual-consensus solvers for convex problems with globally coupled
//! constraints, simulated as synchronous message passing over a graph.

pub mod engine;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod localsolver;
pub mod mailbox;
pub mod metrics;
pub mod oracle;
pub mod problem;
pub mod setting;

pub use engine::{Engine, EngineOptions, NetworkState};
pub use error::{Error, Result};
pub use graph::Graph;
pub use problem::{Problem, StackedPoint};
pub use setting::{make_setting, validate_setting, ExchangeMode, ParamSetting, Variant};
pub use nalgebra;
