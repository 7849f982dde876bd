//! Minimal neural-net stack: conv/linear layers with manual backprop,
//! staged encoders with tap points, an MLP head, and Adam.

pub mod adam;
pub mod conv;
pub mod encoder;
pub mod mlp;

pub use adam::Adam;
pub use conv::{Conv2d, Linear};
pub use encoder::{check_tap_compatibility, ArchSpec, BlockSpec, Encoder, EncoderGrads, ForwardCache};
pub use mlp::{cross_entropy, Mlp};
