//! A small CPU tensor and layer framework with backpropagation.

mod gradcheck;
mod layers;
mod linalg;
mod loss;
mod network;
mod optim;
mod tensor;
mod train;

pub use gradcheck::{gradient_check, gradient_check_against, relative_error, GradCheckConfig, GradCheckReport};
pub use layers::{Conv2d, Dense, Layer};
pub use loss::{loss_logloss, loss_mse, LossKind, PROB_EPS};
pub use network::{
    build_autoencoder, build_autoencoder_with, build_classifier, build_classifier_with, load_network, save_network,
    transfer_encoder, ClassifierSpec, Gradients, Mode, NetKind, Network, Trace, CHECKPOINT_VERSION,
};
pub use optim::{adam_step, plateau_schedule, AdamConfig, AdamState, PlateauConfig, PlateauScheduler};
pub use tensor::Tensor;
pub use train::{
    batch_gradients, fit, fit_autoencoder, forward_eval, predict, ChannelRecipe, ChannelSource, EpochRecord, History,
    Preprocessing, ReconstructionHistory, TrainConfig,
};
