//! Tangent model composition for small dense networks.
//!
//! Components are fine-tuned as first-order linearizations of a frozen
//! pre-trained network, so they live in one vector space: they can be
//! averaged into a single model with the inference cost of one network,
//! rescaled, and subtracted again to forget a task without retraining.
//!
//! Module map:
//! - [`param`]: flat parameter vectors and their algebra
//! - [`net`]: dense networks with forward, JVP and VJP passes
//! - [`loss`]: cross-entropy, MSE and the rescaled square loss
//! - [`tangent`]: tangent models, composition and unlearning
//! - [`train`]: optimizers and the tangent / non-linear training loops
//! - [`ensemble`]: soup and ensemble baselines, evaluation
//! - [`data`]: datasets and synthetic benchmark generators
//! - [`continual`]: incremental protocols and experiment drivers
//! - [`io`]: checkpoints, CSV data, configs and results
//! - [`experiment`]: config-driven runs over protocols, methods and seeds
//! - [`latency`]: inference timing of compositions versus ensembles

pub mod continual;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod io;
pub mod latency;
pub mod loss;
pub mod net;
pub mod param;
pub mod tangent;
pub mod train;

pub use data::Dataset;
pub use error::{Error, Result};
pub use loss::LossSpec;
pub use net::{Activation, BaseModel, Fingerprint, Layer, NetworkSpec};
pub use param::ParamVector;
pub use tangent::{compose_many, CompositionWeights, TangentModel};
pub use train::{InitMode, OptimizerSpec, TrainConfig};
