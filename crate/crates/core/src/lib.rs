//! Meta-causal-graph world models.
//!
//! Environments whose causal structure switches with a latent context, a
//! vector-quantized world model that discovers those contexts and their
//! causal subgraphs, a curiosity-driven intervention agent, an intervention
//! reachability analyzer and a planning/evaluation harness.

pub mod numkit;
pub mod envsim;
pub mod metagraph;
pub mod reach;
pub mod worldmodel;
pub mod agent;
pub mod planner;
pub mod harness;
