//! Dense-network substrate: models, losses, optimizers and checkpoints.

mod checkpoint;
mod loss;
mod model;
mod optim;

pub use checkpoint::{load_model, save_model, Checkpoint, NamedArray, CHECKPOINT_VERSION};
pub use loss::{
    argmax_rows, binary_logit_loss, cross_entropy, kl_distill, log_softmax, per_sample_cross_entropy,
    per_sample_kl, softmax, softplus,
};
pub use model::{sigmoid, Activation, Dense, DenseGrad, GradientBundle, MlpModel, Trace};
pub use optim::{sgd_step, Adam, Sgd, Velocity};
