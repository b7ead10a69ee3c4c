//! Simulator for personalized federated learning with data-free mutual
//! knowledge distillation and a deep-to-shallow layer-dropping schedule.

pub mod baselines;
pub mod data;
pub mod experiment;
pub mod nn;
pub mod protocol;
pub mod rng;
