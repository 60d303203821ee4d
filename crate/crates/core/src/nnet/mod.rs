//! Conditional VAE-GAN for slice imputation, with a small reverse-mode autodiff engine.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use graph::{Grads, Graph, ParamRef, Var};
pub use loss::{
    gan_losses, generator_objective, kl_divergence, kl_value, reconstruction_loss, total_loss, LossParts, LossWeights,
};
pub use model::{
    coordinate_channels, stack_inputs, ImputationModel, LatentCode, ModelHyper, Shell, DISCRIMINATOR, GENERATOR,
};
pub use optim::{OptimConfig, Optimizer, OptimizerKind};
pub use params::ParamStore;
pub use tensor::{Real, Tensor};
