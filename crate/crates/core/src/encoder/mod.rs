//! Small convolutional encoder with a classification head, trained with
//! hand-written backpropagation and Adam.

pub mod adam;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod network;
pub mod trainer;

pub use adam::Adam;
pub use augment::{augment, AugmentConfig};
pub use config::{EncoderConfig, TrainConfig, TrainMode};
pub use network::{argmax, Architecture, LayoutEntry, Network, Trace};
pub use trainer::{
    embed, evaluate_objective, gradient_check, train, EpochRecord, GradientCheck, Sample, StepLoss, TrainReport, Trainer,
};
