//! Pessimistic model-based offline reinforcement learning on finite-horizon
//! tabular MDPs, plus the estimators and coverage quantities behind it.
//!
//! The crate is organised bottom-up: [`mdp`] holds exact dynamic programming,
//! [`models`] and [`data`] build problems and datasets, [`estimation`] fits
//! models and version spaces, [`cppo`] and [`pspo`] optimize policies, and
//! [`coverage`] / [`lowrank`] compute the quantities that explain when they work.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod coverage;
pub mod cppo;
pub mod data;
pub mod error;
pub mod estimation;
pub mod experiments;
pub mod lowrank;
pub mod mdp;
pub mod models;
pub mod oracle;
pub mod pspo;
pub mod rng;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
pub use mdp::{TabularMdp, Task, TimePolicy, TransitionTable};
