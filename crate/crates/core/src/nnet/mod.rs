//! Network, gradient tape, losses and optimizer.

mod adam;
mod loss;
mod model;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::{adversarial_loss, cross_entropy, supcon_loss, target_rows, Targets};
pub use model::{
    argmax_rows, infer, input, predict, Architecture, Inference, LayerSizes, ModelParams, Network, ParamGrads, Part,
    PARAMS_VERSION,
};
pub use tape::{softmax_rows, supcon_value, Gradients, Tape, Var};
pub use tensor::Tensor;
