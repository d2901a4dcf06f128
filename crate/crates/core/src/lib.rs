//! Resolution-adaptive embeddings for cross-resolution person re-identification.
//!
//! An image observed at resolution level `k` is represented by the first `k`
//! sub-vectors of a fixed layout `d_1..d_m` and compared against
//! full-resolution gallery embeddings on that prefix only. Per-level channel
//! masks inside the backbone are learned one block at a time.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod layout;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod resolution;
pub mod retrieval;
pub mod scalar;
pub mod state;
pub mod training;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use config::{Precision, RunConfig};
pub use data::{IdentityImageRecord, MlrTrainingSet};
pub use error::{Error, Result};
pub use image::Image;
pub use layout::{zero_pad, EmbeddingLayout, VaryingLengthEmbedding};
pub use losses::{id_loss, total_loss, verification_loss, verification_probability, LossWeights};
pub use model::{apply_resolution_mask, BackboneConfig, EmbeddingNet, MaskBank, MaskState, Scale};
pub use optim::{Adam, OptimizerConfig};
pub use resolution::{
    quantize_resolution, ratios_from_rates, resolve_unseen_resolution, Rational, ResolutionLevel,
};
pub use retrieval::{cross_res_distance, evaluate_mlr, rank, EvalOptions, EvalReport};
pub use scalar::Scalar;
pub use state::{ModelSpec, ModelState, ParamGroup};
pub use training::{
    build_stage_plan, train, train_step, Ablation, TrainEvent, TrainMode, TrainOptions, TrainingStagePlan,
};

pub type ModelState32 = ModelState<f32>;
pub type ModelState64 = ModelState<f64>;
pub type Embedding32 = VaryingLengthEmbedding<f32>;
pub type Embedding64 = VaryingLengthEmbedding<f64>;
pub type Image32 = Image<f32>;
pub type Image64 = Image<f64>;
pub type Checkpoint32 = Checkpoint<f32>;
pub type Checkpoint64 = Checkpoint<f64>;
