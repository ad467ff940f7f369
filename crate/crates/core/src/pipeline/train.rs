//! Training loop: Adam with step decay, per-epoch loss trace, optional early
//! stop on hard Dice, checkpoints at milestones and at the end.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::blocks::{crop, crop_labels, extract_blocks, BlockIndex};
use super::infer::{coarse_segment, Segmenter};
use super::resample::{downsample_volume, resample_nearest};
use crate::checkpoint::save_checkpoint;
use crate::error::{shape_err, Error, Result};
use crate::losses::{dice_loss, focal_loss, DEFAULT_SMOOTH, FOCAL_ALPHA, FOCAL_GAMMA};
use crate::metrics::dice_coefficient;
use crate::network::Network;
use crate::tensor::Tensor;
use crate::volume::{LabelVolume, Volume};

/// One training pair at network resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Volume,
    pub label: LabelVolume,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossKind {
    #[default]
    Dice,
    Focal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: u8,
    pub epochs: usize,
    pub lr: f64,
    /// Epochs (0-based) at which the rate is multiplied by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub loss: LossKind,
    /// Stop once an epoch's hard Dice on the training batches exceeds this.
    pub stop_at_dice: Option<f64>,
    /// Final checkpoint path; milestone checkpoints are written next to it.
    pub checkpoint: Option<PathBuf>,
}

impl TrainConfig {
    /// Coarse stage defaults: 25 epochs of Adam at 1e-3.
    pub fn stage1() -> Self {
        Self {
            stage: 1,
            epochs: 25,
            lr: 1e-3,
            milestones: Vec::new(),
            decay: 0.1,
            batch_size: 1,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            loss: LossKind::Dice,
            stop_at_dice: None,
            checkpoint: None,
        }
    }

    /// Fine stage defaults: 50 epochs, decay by 0.1 at epochs 30 and 40.
    pub fn stage2() -> Self {
        Self {
            stage: 2,
            epochs: 50,
            milestones: vec![30, 40],
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.stage != 1 && self.stage != 2 {
            return cfg(format!("stage must be 1 or 2, got {}", self.stage));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return cfg("epochs and batch size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.decay > 0.0 && self.decay <= 1.0) {
            return cfg(format!("invalid learning rate {} or decay {}", self.lr, self.decay));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return cfg(format!("milestones {:?} must be strictly increasing", self.milestones));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.epochs) {
            return cfg(format!(
                "milestones {:?} must be below {} epochs",
                self.milestones, self.epochs
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return cfg("Adam moments must lie in [0, 1) and eps must be positive".into());
        }
        Ok(())
    }

    /// `lr * decay^(milestones passed)` at a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.decay.powi(passed as i32)
    }
}

/// Adam state keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, net: &mut Network, grads: &IndexMap<String, Tensor>, lr: f64) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, g) in grads {
            let p = net.params_mut().get_mut(name)?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    pub lr: f64,
    /// Hard Dice of the epoch's forward passes against their labels.
    pub dice: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub checkpoints: Vec<PathBuf>,
    pub stopped_early: bool,
}

/// `epoch\tloss\tlr` lines.
pub fn format_loss_trace(stats: &[EpochStats]) -> String {
    let mut out = String::from("epoch\tloss\tlr\n");
    for s in stats {
        let _ = writeln!(out, "{}\t{:.8}\t{:e}", s.epoch, s.loss, s.lr);
    }
    out
}

fn stack(samples: &[&Sample]) -> Result<(Tensor, Tensor)> {
    let shape = samples[0].image.shape();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for s in samples {
        if s.image.shape() != shape || s.label.shape() != shape {
            return Err(shape_err(
                "train_stage",
                "sample",
                "all samples in a batch need one shape",
            ));
        }
        x.extend(s.image.data().iter().map(|&v| v as f64));
        y.extend(s.label.data().iter().map(|&v| v as f64));
    }
    let dims = [samples.len(), 1, shape[0], shape[1], shape[2]];
    Ok((Tensor::new(dims, x)?, Tensor::new(dims, y)?))
}

fn milestone_path(final_path: &Path, epoch: usize) -> PathBuf {
    let stem = final_path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    final_path.with_file_name(format!("{stem}.epoch{epoch}.ckpt"))
}

/// Trains `net` in place.
pub fn train_stage(dataset: &[Sample], config: &TrainConfig, net: &mut Network) -> Result<TrainReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Contract("train_stage: empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.beta1, config.beta2, config.eps);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        let (mut inter, mut total) = (0usize, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (x, y) = stack(&batch)?;
            if x.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract("train_stage: non-finite input volume".into()));
            }
            let grads = {
                let mut ctx = net.bind(true);
                let xv = ctx.graph.constant(x);
                let probs = match net.forward(&mut ctx, xv) {
                    Ok(p) => p,
                    // finite inputs, so non-finite activations mean the weights diverged
                    Err(e) => match ctx.graph.first_non_finite() {
                        Some(node) => {
                            return Err(Error::NonFinite(format!(
                                "forward pass at epoch {epoch}: activation {node} overflowed ({e})"
                            )))
                        }
                        None => return Err(e),
                    },
                };
                let loss = match config.loss {
                    LossKind::Dice => dice_loss(&mut ctx.graph, probs, &y, DEFAULT_SMOOTH)?,
                    LossKind::Focal => focal_loss(&mut ctx.graph, probs, &y, FOCAL_GAMMA, FOCAL_ALPHA)?,
                };
                let lv = ctx.graph.value(loss).item()?;
                if !lv.is_finite() {
                    return Err(Error::NonFinite(format!("loss {lv} at epoch {epoch}")));
                }
                for (p, t) in ctx.graph.value(probs).data().iter().zip(y.data()) {
                    let hit = *p > 0.5;
                    inter += usize::from(hit && *t == 1.0);
                    total += usize::from(hit) + usize::from(*t == 1.0);
                }
                ctx.graph.backward(loss)?;
                loss_sum += lv;
                batches += 1;
                ctx.grads()
            };
            if let Some((name, _)) = grads.iter().find(|(_, g)| g.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter {name} at epoch {epoch}"
                )));
            }
            adam.step(net, &grads, lr)?;
            if let Some((name, _)) = net
                .params()
                .iter()
                .find(|(_, t)| t.data().iter().any(|v| !v.is_finite()))
            {
                return Err(Error::NonFinite(format!(
                    "parameter {name} after the update at epoch {epoch}"
                )));
            }
        }
        let dice = if total == 0 {
            1.0
        } else {
            2.0 * inter as f64 / total as f64
        };
        let stats = EpochStats {
            epoch,
            loss: loss_sum / batches as f64,
            lr,
            dice,
        };
        info!(
            "stage {} epoch {epoch}: loss {:.6} dice {:.4} lr {lr:e}",
            config.stage, stats.loss, dice
        );
        report.epochs.push(stats);
        if let Some(path) = &config.checkpoint {
            if config.milestones.contains(&(epoch + 1)) {
                let p = milestone_path(path, epoch + 1);
                save_checkpoint(&p, net)?;
                report.checkpoints.push(p);
            }
        }
        if config.stop_at_dice.is_some_and(|t| dice > t) {
            report.stopped_early = true;
            break;
        }
    }
    if let Some(path) = &config.checkpoint {
        save_checkpoint(path, net)?;
        report.checkpoints.push(path.clone());
    }
    Ok(report)
}

/// Hard Dice of `net` on one sample.
pub fn sample_dice(net: &dyn Segmenter, sample: &Sample) -> Result<f64> {
    let probs = net.segment(&sample.image)?;
    dice_coefficient(&probs.threshold(0.5), &sample.label)
}

/// Full-resolution case: image plus reference labels.
pub type Case = Sample;

/// Coarse-stage training pairs (trilinear image, nearest-neighbour label).
pub fn stage1_dataset(cases: &[Case], coarse_shape: [usize; 3]) -> Result<Vec<Sample>> {
    cases
        .iter()
        .map(|c| {
            Ok(Sample {
                image: downsample_volume(&c.image, coarse_shape)?,
                label: resample_nearest(&c.label, coarse_shape)?,
            })
        })
        .collect()
}

/// Source of block guidance when preparing fine-stage training data.
#[derive(Clone, Copy)]
pub enum Guidance<'a> {
    /// Blocks follow the trained coarse network's predictions.
    Coarse(&'a dyn Segmenter),
    /// Blocks follow the reference labels brought to the coarse grid.
    Truth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockSamplingConfig {
    pub coarse_shape: [usize; 3],
    pub block_side: usize,
    pub threshold: f32,
    /// Positive blocks per negative block.
    pub pos_per_neg: usize,
    pub seed: u64,
}

/// Fine-stage blocks: every guided block containing foreground, plus
/// background-only blocks at one per `pos_per_neg` positives (guided ones
/// first, then random placements anywhere in the volume).
pub fn stage2_dataset(cases: &[Case], guidance: Guidance, cfg: &BlockSamplingConfig) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for case in cases {
        let coarse = match guidance {
            Guidance::Coarse(net) => coarse_segment(&case.image, net, cfg.coarse_shape)?,
            Guidance::Truth => {
                let l = resample_nearest(&case.label, cfg.coarse_shape)?;
                Volume::new(l.shape(), l.data().iter().map(|&b| b as f32).collect(), None)?
            }
        };
        let ex = extract_blocks(&coarse, &case.image, cfg.threshold, cfg.block_side)?;
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for (idx, image) in ex.blocks {
            let label = crop_labels(&case.label, &idx)?;
            let s = Sample { image, label };
            if s.label.count() > 0 {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
        let want_neg = pos.len().div_ceil(cfg.pos_per_neg.max(1)).max(1);
        neg.shuffle(&mut rng);
        neg.truncate(want_neg);
        let shape = case.image.shape();
        let mut tries = 0;
        while neg.len() < want_neg && tries < 50 {
            tries += 1;
            let origin = std::array::from_fn(|a| rng.random_range(0..=shape[a] - cfg.block_side));
            let idx = BlockIndex {
                origin,
                side: cfg.block_side,
                source: shape,
            };
            let label = crop_labels(&case.label, &idx)?;
            if label.count() == 0 {
                neg.push(Sample {
                    image: crop(&case.image, &idx)?,
                    label,
                });
            }
        }
        out.extend(pos);
        out.extend(neg);
    }
    Ok(out)
}
