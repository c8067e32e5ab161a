pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod envs;
pub mod learner;
pub mod network;
pub mod nn;
pub mod orchestrator;
pub mod plot;
pub mod replay;
pub mod rng;
pub mod run;
