//! Feature-noise patch data, a two-layer CNN trained by full-batch gradient
//! descent with exact ERM, Cutout and CutMix objectives, and numerical checks
//! of the feature-learning theory built around them.

pub mod augment;
pub mod decompose;
pub mod error;
pub mod eval;
pub mod exec;
pub mod model;
pub mod synthdata;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
pub use exec::Executor;
pub use model::{ActivationParams, Filters, InitConfig, Weights};
pub use synthdata::{DataConfig, Dataset, FeatureBank, FeatureId, Sample, Sign, Tier};

pub use train::{Method, TrainConfig, TraceLog};
