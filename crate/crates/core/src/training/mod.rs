//! Pre-training, AF fine-tuning with a frozen prefix, AdamW and the
//! leave-one-subject-out harness.

mod auc;
mod config;
mod finetune;
mod loso;
mod optim;
mod pretrain;

pub use auc::auc;
pub use config::TrainRunConfig;
pub use finetune::{finetune_af, prepare_finetune, score_windows, FinetuneReport, PrefixCache};
pub use loso::{fold_seed, loso_evaluate, AucReport, FoldResult, WindowScore};
pub use optim::{adamw_step, grad_norm, AdamWConfig, OptimizerState};
pub use pretrain::{
    estimate_loss, lm_loss, lm_train_step, overfit_batch, pretrain, write_loss_csv, write_steps_csv, EvalRow, PretrainPaths,
    PretrainReport,
};
