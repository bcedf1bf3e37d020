pub mod augment;
pub mod baselines;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod maps;
pub mod metrics;
pub mod model;
pub mod model_io;
pub mod pipeline;
pub mod resample;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod uncertainty;

pub use augment::{Augmentation, Space};
pub use error::{Error, Result};
pub use maps::{DepthMap, UncertaintyMap, ValidMask};
pub use model::{EncoderFeatures, ForwardOptions, Model, ModelConfig, PredictionBundle};
pub use scalar::Scalar;
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::{Shape, Tensor};

pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub type ModelF32 = Model<f32>;
pub type ModelF64 = Model<f64>;
pub type TapeF64 = Tape<f64>;
