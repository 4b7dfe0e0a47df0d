//! Dynamic-topology TD3: sparse masked networks that grow connections along
//! large gradients, prune dormant neurons, and replay old experience when the
//! critic's activated-neuron ratio stalls.
//!
//! The numeric core is generic over `f32` and `f64`; the aliases below fix the
//! scalar for the common cases.

pub mod agent;
pub mod config;
pub mod envs;
pub mod metrics;
pub mod netcore;
pub mod scalar;
pub mod topology;

pub use scalar::Scalar;

pub type Network = netcore::MaskedNetwork<f64>;
pub type Network32 = netcore::MaskedNetwork<f32>;
pub type Layer = netcore::MaskedLayer<f64>;
pub type Layer32 = netcore::MaskedLayer<f32>;
pub type Adam = netcore::AdamState<f64>;
pub type Adam32 = netcore::AdamState<f32>;
pub type Agent = agent::Td3Agent<f64>;
pub type Agent32 = agent::Td3Agent<f32>;
pub type Trainer = agent::Trainer<f64>;
pub type Trainer32 = agent::Trainer<f32>;
pub type RunResult = agent::RunResult<f64>;
