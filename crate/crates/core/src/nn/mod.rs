//! Differentiable building blocks.

mod attention;
mod conv;
mod gat;
pub mod init;
mod linear;
mod lstm;

pub use attention::{AttentionOutput, CrossAttention};
pub use conv::{Conv1dLayer, ConvMlpEncoder};
pub use gat::{EdgeIndex, GatLayer, GatOutput};
pub use linear::{Linear, MlpBlock};
pub use lstm::LstmEncoder;

#[cfg(test)]
mod tests;
