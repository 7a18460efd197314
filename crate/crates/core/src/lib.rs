//! Core of a trajectory-keyed tool-value cache for agent rollouts.

pub mod cache;
pub mod executor;
pub mod forkpool;
pub mod sandbox;
pub mod snapshot;
pub mod tcg;
