//! BatchTopK crosscoder: one shared encoder over both models' activations and
//! one decoder per model.
//!
//! ```text
//! z      = relu(a · W_enc_a + b · W_enc_b + b_enc)              (B x D)
//! score  = z[t, j] · (‖dec_a[j]‖ + ‖dec_b[j]‖)
//! f      = z restricted to the k·B highest scores in the batch
//! â, b̂   = f · W_dec_a + b_dec_a,  f · W_dec_b + b_dec_b
//! loss   = (‖a − â‖² + ‖b − b̂‖²) / (B · d)
//! ```
//!
//! Gradients are closed-form with the selection mask held fixed.

mod checkpoint;
mod codes;
mod model;
mod params;
mod train;

pub use checkpoint::{CHECKPOINT_MAGIC, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use codes::{batch_topk, SparseCodes, TopK};
pub use model::{
    aux_loss_with_residual, backward, decode, decode_dense, encode, encode_inference, forward, loss, AuxSpec,
    BackwardOutput, Forward, Gradients,
};
pub use params::{CrosscoderParams, ScoreMode, TENSOR_NAMES};
pub use train::{train, StepRecord, TrainConfig, TrainLog};
