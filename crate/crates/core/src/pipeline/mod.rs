//! Coarse-to-fine segmentation pipeline and the synthetic data it trains on.

pub mod blocks;
pub mod infer;
pub mod resample;
pub mod synth;
pub mod train;

pub use blocks::{extract_blocks, merge_blocks, BlockIndex, Extraction, ExtractionStatus};
pub use infer::{
    coarse_segment, fine_segment_blocks, stage1_only, two_stage_infer, InferConfig, Segmenter, TwoStageOutput,
};
pub use resample::{downsample_volume, resample_nearest, resample_trilinear};
pub use synth::{connected_components, synth_generate, SynthSpec};
pub use train::{
    format_loss_trace, sample_dice, stage1_dataset, stage2_dataset, train_stage, Adam, BlockSamplingConfig, Case,
    EpochStats, Guidance, LossKind, Sample, TrainConfig, TrainReport,
};
