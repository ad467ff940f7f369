//! Guided block extraction and merging for the fine stage.
//!
//! The coarse mask (probabilities strictly above the threshold) is upscaled to
//! the original grid by nearest neighbour and dilated by `side / 8` voxels (a
//! cube element). The bounding box of the dilated mask is tiled with
//! non-overlapping cubes of side `side` starting at its corner; cubes that
//! would cross the volume edge are shifted inward. Cubes touching the dilated
//! mask are kept, deduplicated and sorted by origin.

use log::warn;

use super::resample::resample_nearest;
use crate::error::{shape_err, Error, Result};
use crate::volume::{linear_index, LabelVolume, Volume};

/// Placement of one cubic block in its source volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockIndex {
    pub origin: [usize; 3],
    pub side: usize,
    pub source: [usize; 3],
}

impl BlockIndex {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.origin[a] && p[a] < self.origin[a] + self.side)
    }

    fn check(&self) -> Result<()> {
        if self.side == 0 || (0..3).any(|a| self.origin[a] + self.side > self.source[a]) {
            return Err(Error::Contract(format!("block {self:?} lies outside its source")));
        }
        Ok(())
    }
}

/// Why extraction returned no blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtractionStatus {
    Ok,
    EmptyGuidance,
}

#[derive(Clone, Debug)]
pub struct Extraction {
    pub blocks: Vec<(BlockIndex, Volume)>,
    /// Upscaled coarse mask before dilation.
    pub guidance: LabelVolume,
    pub dilated: LabelVolume,
    pub status: ExtractionStatus,
}

pub fn dilation_margin(side: usize) -> usize {
    side / 8
}

/// Chebyshev (cube) dilation by `r` voxels, done one axis at a time.
pub fn dilate(mask: &LabelVolume, r: usize) -> LabelVolume {
    let shape = mask.shape();
    let mut cur = mask.data().to_vec();
    if r == 0 {
        return mask.clone();
    }
    let strides = [shape[1] * shape[2], shape[2], 1];
    for axis in 0..3 {
        let mut next = vec![0u8; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = (i / strides[axis]) % shape[axis];
            let lo = pos.saturating_sub(r);
            let hi = (pos + r).min(shape[axis] - 1);
            let base = i - pos * strides[axis];
            *out = u8::from((lo..=hi).any(|j| cur[base + j * strides[axis]] != 0));
        }
        cur = next;
    }
    LabelVolume::new(shape, cur, mask.spacing()).expect("same shape")
}

/// Copies a block out of `v`.
pub fn crop(v: &Volume, idx: &BlockIndex) -> Result<Volume> {
    idx.check()?;
    if idx.source != v.shape() {
        return Err(shape_err(
            "crop",
            "source",
            format!("{:?} vs {:?}", idx.source, v.shape()),
        ));
    }
    let o = idx.origin;
    Volume::from_fn([idx.side; 3], |h, w, d| v.get(o[0] + h, o[1] + w, o[2] + d))?.with_spacing(v.spacing())
}

pub fn crop_labels(v: &LabelVolume, idx: &BlockIndex) -> Result<LabelVolume> {
    idx.check()?;
    let o = idx.origin;
    LabelVolume::from_fn([idx.side; 3], |h, w, d| v.get(o[0] + h, o[1] + w, o[2] + d))
}

/// Origins along one axis covering `[lo, hi]` with the inward shift rule.
fn axis_origins(lo: usize, hi: usize, side: usize, extent: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut o = lo;
    while o <= hi {
        out.push(o.min(extent - side));
        o += side;
    }
    out
}

/// Block placements for a dilated guidance mask.
pub fn tile_mask(dilated: &LabelVolume, side: usize) -> Result<Vec<BlockIndex>> {
    let shape = dilated.shape();
    if side == 0 || shape.iter().any(|&e| e < side) {
        return Err(Error::Contract(format!(
            "block side {side} does not fit volume {shape:?}"
        )));
    }
    let mut lo = shape;
    let mut hi = [0usize; 3];
    let mut any = false;
    for h in 0..shape[0] {
        for w in 0..shape[1] {
            for d in 0..shape[2] {
                if dilated.get(h, w, d) {
                    any = true;
                    for (a, p) in [h, w, d].into_iter().enumerate() {
                        lo[a] = lo[a].min(p);
                        hi[a] = hi[a].max(p);
                    }
                }
            }
        }
    }
    if !any {
        return Ok(Vec::new());
    }
    let per_axis: Vec<Vec<usize>> = (0..3).map(|a| axis_origins(lo[a], hi[a], side, shape[a])).collect();
    let mut blocks = Vec::new();
    for &oh in &per_axis[0] {
        for &ow in &per_axis[1] {
            for &od in &per_axis[2] {
                let idx = BlockIndex {
                    origin: [oh, ow, od],
                    side,
                    source: shape,
                };
                if touches(dilated, &idx) {
                    blocks.push(idx);
                }
            }
        }
    }
    blocks.sort();
    blocks.dedup();
    Ok(blocks)
}

fn touches(mask: &LabelVolume, idx: &BlockIndex) -> bool {
    let o = idx.origin;
    let s = mask.shape();
    (o[0]..o[0] + idx.side).any(|h| {
        (o[1]..o[1] + idx.side).any(|w| {
            let row = linear_index(s, h, w, o[2]);
            mask.data()[row..row + idx.side].iter().any(|&v| v != 0)
        })
    })
}

/// Guided extraction of intensity blocks from `original`.
pub fn extract_blocks(coarse_probs: &Volume, original: &Volume, threshold: f32, side: usize) -> Result<Extraction> {
    let shape = original.shape();
    if side == 0 || shape.iter().any(|&e| e < side) {
        return Err(Error::Contract(format!(
            "block side {side} does not fit volume {shape:?}"
        )));
    }
    let coarse_mask = coarse_probs.threshold(threshold);
    let guidance = resample_nearest(&coarse_mask, shape)?.with_spacing(original.spacing())?;
    let dilated = dilate(&guidance, dilation_margin(side));
    let placements = tile_mask(&dilated, side)?;
    let status = if placements.is_empty() {
        warn!("coarse stage found no foreground; fine stage will return an empty mask");
        ExtractionStatus::EmptyGuidance
    } else {
        ExtractionStatus::Ok
    };
    let blocks = placements
        .into_iter()
        .map(|idx| crop(original, &idx).map(|v| (idx, v)))
        .collect::<Result<_>>()?;
    Ok(Extraction {
        blocks,
        guidance,
        dilated,
        status,
    })
}

/// Averages overlapping block probabilities and thresholds (strictly above
/// `threshold`). Voxels outside every block are background. Pieces are merged
/// in origin order, so the result does not depend on their input order.
pub fn merge_blocks(pieces: &[(BlockIndex, Volume)], shape: [usize; 3], threshold: f32) -> Result<LabelVolume> {
    let n: usize = shape.iter().product();
    let mut sum = vec![0.0f64; n];
    let mut hits = vec![0u32; n];
    let mut order: Vec<usize> = (0..pieces.len()).collect();
    order.sort_by_key(|&i| pieces[i].0);
    for i in order {
        let (idx, block) = &pieces[i];
        idx.check()?;
        if idx.source != shape {
            return Err(Error::Contract(format!(
                "block {idx:?} belongs to a different volume than {shape:?}"
            )));
        }
        if block.shape() != [idx.side; 3] {
            return Err(shape_err(
                "merge_blocks",
                "block",
                format!("{:?} for side {}", block.shape(), idx.side),
            ));
        }
        let o = idx.origin;
        for h in 0..idx.side {
            for w in 0..idx.side {
                for d in 0..idx.side {
                    let j = linear_index(shape, o[0] + h, o[1] + w, o[2] + d);
                    sum[j] += block.get(h, w, d) as f64;
                    hits[j] += 1;
                }
            }
        }
    }
    let data = sum
        .iter()
        .zip(&hits)
        .map(|(&s, &c)| u8::from(c > 0 && s / c as f64 > threshold as f64))
        .collect();
    LabelVolume::new(shape, data, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_voxel_gives_one_containing_block() {
        let shape = [512, 512, 192];
        let mut probs = vec![0.0f32; shape.iter().product()];
        probs[linear_index(shape, 100, 100, 30)] = 1.0;
        let coarse = Volume::new(shape, probs, None).unwrap();
        let mask = resample_nearest(&coarse.threshold(0.5), shape).unwrap();
        let blocks = tile_mask(&dilate(&mask, dilation_margin(64)), 64).unwrap();
        assert_eq!(blocks.len(), 1);
        assert!(blocks[0].contains([100, 100, 30]));
    }

    #[test]
    fn full_mask_gives_ceil_grid_with_inward_shift() {
        let shape = [130, 64, 70];
        let full = LabelVolume::from_fn(shape, |_, _, _| true).unwrap();
        let blocks = tile_mask(&full, 64).unwrap();
        assert_eq!(blocks.len(), 3 * 2);
        assert!(blocks.iter().any(|b| b.origin == [66, 0, 6]));
        assert!(blocks.iter().all(|b| (0..3).all(|a| b.origin[a] + 64 <= shape[a])));
    }

    #[test]
    fn empty_mask_gives_no_blocks() {
        let v = Volume::zeros([32, 32, 32]).unwrap();
        let ex = extract_blocks(&Volume::zeros([16, 16, 16]).unwrap(), &v, 0.5, 16).unwrap();
        assert!(ex.blocks.is_empty());
        assert_eq!(ex.status, ExtractionStatus::EmptyGuidance);
    }

    #[test]
    fn overlapping_blocks_average() {
        let shape = [4, 4, 2];
        let a = BlockIndex {
            origin: [0, 0, 0],
            side: 2,
            source: shape,
        };
        let b = BlockIndex {
            origin: [1, 1, 0],
            side: 2,
            source: shape,
        };
        let pa = Volume::from_fn([2; 3], |_, _, _| 0.4).unwrap();
        let pb = Volume::from_fn([2; 3], |_, _, _| 0.8).unwrap();
        let merged = merge_blocks(&[(a, pa), (b, pb)], shape, 0.5).unwrap();
        assert!(merged.get(1, 1, 0)); // mean 0.6
        assert!(!merged.get(0, 0, 0)); // 0.4 alone
        assert!(merged.get(2, 2, 1)); // 0.8 alone
        assert!(!merged.get(3, 0, 0)); // uncovered
    }

    #[test]
    fn no_pieces_is_background() {
        let m = merge_blocks(&[], [3, 3, 3], 0.5).unwrap();
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn out_of_bounds_piece_is_rejected() {
        let idx = BlockIndex {
            origin: [3, 0, 0],
            side: 2,
            source: [4, 4, 4],
        };
        let r = merge_blocks(&[(idx, Volume::zeros([2; 3]).unwrap())], [4, 4, 4], 0.5);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn dilation_is_a_cube() {
        let m = LabelVolume::from_points([7, 7, 7], &[[3, 3, 3]]).unwrap();
        let d = dilate(&m, 1);
        assert_eq!(d.count(), 27);
        assert!(d.get(2, 4, 2) && !d.get(1, 3, 3));
    }
}
