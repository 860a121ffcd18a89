//! End-to-end stack: frozen stub backbone, vanishing point guided motion
//! and dense context, attention-gated fusion, and a small training loop.

mod backbone;
mod config;
mod model;
mod train;

pub use backbone::{resize_frame, stub_decode, to_tensor, StubBackbone};
pub use config::PipelineConfig;
pub use model::{
    forward, forward_tape, loss, loss_and_gradients, prepare, run_pipeline, ModelParams, PipelineOutput, Prepared,
    TapedForward, VpReport,
};
pub use train::{evaluate, smooth, synthetic_samples, train_synthetic, train_toy, Sample, TrainConfig, TrainReport};
