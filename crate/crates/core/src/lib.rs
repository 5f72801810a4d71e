//! MuonClip: the Muon optimizer with RMS-matched updates and weight decay, plus
//! per-head QK-Clip, together with a small decoder-only transformer (MHA or
//! MLA attention) that reports per-head max attention logits on every forward
//! pass.

pub mod autodiff;
pub mod cli;
pub mod diag;
pub mod error;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod param;
pub mod qkclip;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
