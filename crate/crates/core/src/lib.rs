//! avatarfit: clone a black-box parametric face renderer with a small
//! generative network, then recover renderer parameters for a target
//! portrait by projected gradient descent through the clone.

pub mod autodiff;
pub mod ckpt;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod evalkit;
pub mod extractors;
pub mod gradcheck;
pub mod imgio;
pub mod imitator;
pub mod nn;
pub mod renderer;
pub mod search;

pub use cli::run;
