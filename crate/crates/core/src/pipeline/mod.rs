//! Training, augmentation, sequential video inference and checkpoints.

mod augment;
mod checkpoint;
pub mod config;
mod infer;
mod model;
mod train;

pub use augment::{augment, prepare, resize_bilinear, FramePair, Transform};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::Config;
pub use infer::{infer_frame, infer_video, FrameResult, ReferenceState, VideoInference};
pub use model::{batch_tensor, image_to_tensor, BaseDetector, Model, IMAGE_MEAN, IMAGE_STD};
pub use train::{
    build_pairs, plan_epoch, train_step, BaseTrainer, LossWriter, StepLoss, Trainer, LOSS_HEADER,
};
