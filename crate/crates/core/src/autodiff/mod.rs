//! Dense `f64` tensors, a reverse-mode tape, Adam, and a splitmix64 stream.

mod adam;
mod gradcheck;
mod layers;
mod params;
mod rng;
mod tape;
mod tensor;

pub use adam::{adam_step, sgd_step, AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport};
pub use layers::{
    affine, affine_vars, dropout_mask, init_affine, init_attention, self_attention_encoder,
    ATTENTION_HEADS, LAYER_NORM_EPS,
};
pub use params::ParamStore;
pub use rng::{seeded_rng, RngStream};
pub use tape::{sigmoid, softplus, Grads, Tape, Var};
pub use tensor::Tensor;
