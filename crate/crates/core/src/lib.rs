//! Smart-grid stability: ensemble classifiers over 4-node grid features,
//! plus reinforcement-learning control that restores stability when the
//! classifier gate flags an unstable state.

pub mod data;
pub mod datagen;
pub mod env;
pub mod error;
pub mod experiment;
pub mod forest;
pub mod gbt;
pub mod matrix;
pub mod metrics;
pub mod mlp;
pub mod rl;
pub mod stacking;
pub mod tree;
