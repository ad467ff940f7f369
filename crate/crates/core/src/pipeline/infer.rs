//! Two-stage inference: coarse whole-volume pass, guided block extraction,
//! fine block pass, merge.

use rayon::prelude::*;

use super::blocks::{extract_blocks, merge_blocks, BlockIndex, ExtractionStatus};
use super::resample::downsample_volume;
use crate::error::Result;
use crate::network::Network;
use crate::volume::{LabelVolume, Volume};

/// Anything that maps an intensity volume to a same-shape probability volume.
pub trait Segmenter: Sync {
    fn segment(&self, input: &Volume) -> Result<Volume>;
}

impl Segmenter for Network {
    fn segment(&self, input: &Volume) -> Result<Volume> {
        let probs = self.predict(&input.to_tensor())?;
        Volume::from_tensor(&probs, input.spacing())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferConfig {
    pub coarse_shape: [usize; 3],
    pub block_side: usize,
    pub threshold: f32,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            coarse_shape: [128, 128, 64],
            block_side: 64,
            threshold: 0.5,
        }
    }
}

/// Stage-1 probabilities at the coarse resolution.
pub fn coarse_segment(v: &Volume, net: &dyn Segmenter, coarse_shape: [usize; 3]) -> Result<Volume> {
    net.segment(&downsample_volume(v, coarse_shape)?)
}

/// Independent fine passes; output order follows input order.
pub fn fine_segment_blocks(blocks: &[(BlockIndex, Volume)], net: &dyn Segmenter) -> Result<Vec<(BlockIndex, Volume)>> {
    blocks
        .par_iter()
        .map(|(idx, block)| net.segment(block).map(|p| (*idx, p)))
        .collect()
}

#[derive(Clone, Debug)]
pub struct TwoStageOutput {
    pub label: LabelVolume,
    pub coarse_probs: Volume,
    pub blocks: Vec<BlockIndex>,
    pub status: ExtractionStatus,
}

pub fn two_stage_infer(
    v: &Volume,
    net1: &dyn Segmenter,
    net2: &dyn Segmenter,
    cfg: &InferConfig,
) -> Result<TwoStageOutput> {
    let coarse_probs = coarse_segment(v, net1, cfg.coarse_shape)?;
    let ex = extract_blocks(&coarse_probs, v, cfg.threshold, cfg.block_side)?;
    let pieces = fine_segment_blocks(&ex.blocks, net2)?;
    let label = merge_blocks(&pieces, v.shape(), cfg.threshold)?.with_spacing(v.spacing())?;
    Ok(TwoStageOutput {
        label,
        coarse_probs,
        blocks: ex.blocks.iter().map(|(i, _)| *i).collect(),
        status: ex.status,
    })
}

/// Stage-1 prediction alone, brought back to full resolution (trilinear on
/// probabilities, then thresholded).
pub fn stage1_only(v: &Volume, net1: &dyn Segmenter, cfg: &InferConfig) -> Result<LabelVolume> {
    let coarse = coarse_segment(v, net1, cfg.coarse_shape)?;
    let full = super::resample::resample_trilinear(&coarse, v.shape())?;
    full.threshold(cfg.threshold).with_spacing(v.spacing())
}
