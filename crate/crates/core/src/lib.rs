//! Planar UAV navigation with mode arbitration between a guidance-line
//! tracker, a waypoint-emitting TD3 agent and a landing controller.

pub mod arbiter;
pub mod checkpoint;
pub mod config;
pub mod control;
pub mod env;
pub mod fuzzy;
pub mod nn;
pub mod planner;
pub mod replay;
pub mod td3;
pub mod world;
