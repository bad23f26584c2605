//! Source/target encoders: a small affine backbone with a BN projector.

mod checkpoint;
mod forward;
mod pair;
mod params;

pub use checkpoint::{hex_digest, Checkpoint};
pub use forward::{
    backbone_features, encode, encode_backward, encode_inference, encode_unnormalized,
    mean_encoding, EncodeCache,
};
pub use pair::{bits_equal, stop_gradient_check, EncoderPair};
pub use params::{
    BatchNorm, EncoderDims, EncoderGrads, EncoderParams, Linear, BUFFER_NAMES, TRAINABLE_NAMES,
};
