//! Minimal dense/convolutional network primitives in `f64`.

pub mod layers;
pub mod loss;
pub mod optim;

pub use layers::{Conv1d, Dense};
pub use loss::{cross_entropy, nt_xent, softmax, NtXent};
pub use optim::{cosine_lr, Adam, Sgd};
