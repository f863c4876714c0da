//! Scalable Byzantine agreement against an adaptive rushing adversary,
//! simulated at desk scale.

pub mod ae2e;
pub mod aeba;
pub mod coinba;
pub mod election;
pub mod harness;
pub mod netsim;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod secrets;
pub mod topology;
