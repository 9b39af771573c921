//! Hybrid quantum-classical reinforcement learning for sector rotation.
//!
//! The crate covers the whole pipeline: market data ingestion and synthesis
//! ([`data`]), technical features ([`features`]), the sector-rotation MDP
//! ([`env`]), a small reverse-mode autodiff engine ([`autodiff`]), a
//! statevector simulator with parameter-shift gradients ([`qsim`]), classical
//! and quantum-enhanced policy/value networks ([`backbones`]), the PPO
//! trainer ([`ppo`]) and out-of-sample evaluation ([`backtest`]).

pub mod autodiff;
pub mod backbones;
pub mod backtest;
pub mod data;
pub mod env;
pub mod error;
pub mod experiment;
pub mod features;
pub mod par;
pub mod ppo;
pub mod qsim;
pub mod rng;

pub use error::{Error, Result};
