//! Training orchestration: synthetic scenes, losses, the two-stage training
//! loop with its ablation variants, evaluation, checkpoints and plots.

mod ablate;
mod checkpoint;
mod config;
mod loss;
mod metrics;
mod model;
mod optim;
mod plot;
mod scene;
mod train;

use thiserror::Error;

pub use ablate::{ablation_rows, format_table, run_ablation, AblationResult, AblationRow};
pub use checkpoint::{
    block_sizes, canonical_blocks, checkpoint_blocks, checkpoint_from_blocks, explicit_dump, explicit_dump_bytes,
    load_checkpoint, model_blocks, read_container, save_checkpoint, storage_bytes, write_container, Block, Checkpoint,
    Payload, CHECKPOINT_VERSION,
};
pub use config::{TrainConfig, Variant};
pub use loss::{l1_loss, photometric_loss, ssim_op};
pub use metrics::{psnr, ssim, PSNR_CAP};
pub use model::{padded_bounds, Canonical, Deformer, ExplicitGaussians, Forward, Model, Stage};
pub use optim::{Adam, LrGroup, Moments};
pub use plot::{interval_chart, plot_intervals};
pub use scene::{arc_cameras, generate_scene, is_test_frame, ClusterMotion, MovingGaussian, SceneSpec, Split, SyntheticScene};
pub use train::{evaluate, train, train_global, train_local, EvalRecord, FrameMetric, LogRecord, TrainState};

use crate::autodiff::AutodiffError;
use crate::deform::DeformError;
use crate::render::RenderError;
use crate::scaffold::ScaffoldError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("io")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Scaffold(#[from] ScaffoldError),
    #[error(transparent)]
    Deform(#[from] DeformError),
    #[error("loss diverged in the {stage} stage at iteration {iter} (loss = {loss})")]
    Diverged { stage: &'static str, iter: u64, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
