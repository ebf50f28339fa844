//! Cross-domain medical image segmentation with normalization-ordered
//! convolution blocks and a conditional adversarial loss.

pub mod tensor;
pub mod network;
pub mod data;
pub mod metrics;
pub mod training;
