//! Pipeline-parallel training planner and simulator for heterogeneous GPU
//! clusters.
//!
//! A model is reduced to a layer sequence ([`model_graph`]), every stage
//! candidate is costed once per distinct structure ([`profiler`]), and a DP
//! over meshes picks spans, submeshes and a latency bound ([`planner`]). Warm-up
//! launch counts come from the link-to-stage cost ratio ([`scheduler`]), and
//! any schedule can be replayed as a dependency DAG ([`pipeline_sim`]).

// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cluster;
pub mod model_graph;
pub mod scheduler;
pub mod profiler;
pub mod pipeline_sim;
pub mod metrics;
pub mod planner;
pub mod cli;
