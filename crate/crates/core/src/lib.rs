//! Two-stream MLP click-through-rate model with feature gating and
//! multi-head bilinear fusion.

pub mod config;
pub mod container;
pub mod data;
pub mod embedding;
pub mod error;
pub mod fusion;
pub mod gating;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod mlp;
pub mod model;
pub mod optim;
pub mod params;
pub mod run;
pub mod seed;
pub mod train;

pub use config::RunConfig;
pub use container::ModelContainer;
pub use error::{Error, Result};
pub use fusion::{FusionKind, FusionSpec};
pub use model::{FieldInfo, Model, ModelConfig, Variant};
pub use train::TrainConfig;
