//! Tensor engine: layer kernels, reverse-mode tape, loss, optimizer and
//! gradient verification.

pub mod gradcheck;
pub mod loss;
pub mod ops;
pub mod optim;
pub mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use loss::{softmax_weighted_ce, IGNORE};
pub use ops::{
    batchnorm, concat_channels, conv2d, maxpool2, relu, upsample2, BatchNormParams, ConvParams, LayerParams, Mode,
};
pub use optim::sgd_step;
pub use tape::{BatchStats, Gradients, Tape, Var};
