//! Desk-scale experiment harness: data, training, evaluation, checkpoints
//! and mask visualisation.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod optim;
pub mod train;
pub mod viz;

pub use checkpoint::{backbone_only, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, Normalisation};
pub use config::{DataConfig, TrainConfig};
pub use data::{load_idx_dataset, load_idx_dir, synth_dataset, synth_dataset_with, Dataset, SynthSpec};
pub use eval::{evaluate, EvalReport};
pub use train::{pretrain_teacher, train_dynamic, EpochRecord, TrainHistory, TrainOutput};
pub use viz::{export_mask_viz, keep_prob_stats, stage_masks, KeepStats};

/// Train and validation splits described by `cfg`; validation uses the
/// training normalisation.
pub fn synth_splits(cfg: &DataConfig) -> crate::Result<(Dataset, Dataset)> {
    let (train, _) = synth_dataset_with(&cfg.synth, cfg.train_per_class, cfg.seed)?;
    let (val, _) = synth_dataset_with(&cfg.synth, cfg.val_per_class, cfg.seed.wrapping_add(1_000_003))?;
    let val = val.with_normalisation_of(&train);
    Ok((train, val))
}
