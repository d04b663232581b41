//! Covariance-matrix convolutional network: architecture, parameters,
//! batched forward/backward passes, training and model files.

mod arch;
mod io;
mod net;
mod params;
mod train;

pub use arch::{CmnetArch, DropoutSemantics, Padding};
pub use io::{from_text, load_params, load_params_for, save_params, to_text};
pub use net::{
    backward, backward_head, conv_features, forward, forward_batch, forward_eval,
    forward_eval_batch, head_scores, loss, Mode, Scores,
};
pub use params::{init_params, CmnetParams, Gradients, TENSOR_NAMES};
pub use train::{feature_table, train, Optimizer, TrainConfig, TrainReport};

#[cfg(test)]
mod tests;
