//! Short-term corridor speed forecasting with a dual CNN+LSTM network and a
//! time-marker branch.

pub mod baselines;
pub mod checkpoint;
pub mod container;
pub mod data;
pub mod error;
pub mod experiment;
pub mod layers;
pub mod model;
pub mod scenario;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use data::{Batch, CorridorDataset, DaySplit, Sample, SampleConfig, Scaler};
pub use error::{Error, Result};
pub use model::{Model, ModelSpec, Variant};
pub use tensor::{Graph, Tensor, Var};
pub use train::{evaluate, fit, EvalReport, TrainConfig};
