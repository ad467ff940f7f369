use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use mdsvm_core::checkpoint::load_checkpoint;
use mdsvm_core::metrics::{surface_distances, DistanceMethod};
use mdsvm_core::pipeline::{
    format_loss_trace, stage1_dataset, stage2_dataset, synth_generate, train_stage, two_stage_infer,
    BlockSamplingConfig, Case, ExtractionStatus, Guidance, InferConfig, LossKind, SynthSpec, TrainConfig,
};
use mdsvm_core::verify::{format_table, run_suite, Fault};
use mdsvm_core::{dice_coefficient, Error, LabelVolume, Network, NetworkConfig, ScanStrategy, Volume};
use rayon::prelude::*;

use crate::config::{Dims, Resolver};
use crate::manifest::RunManifest;
use crate::{EvalArgs, Failure, FaultArg, GuidanceArg, NetArgs, SegmentArgs, SynthArgs, TrainArgs, VerifyArgs};

type CmdResult = Result<(), Failure>;

/// `dir/stem.suffix` for a file `dir/stem.ext`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn dims_flag(v: &Option<Vec<usize>>) -> Option<Dims> {
    v.clone().map(Dims)
}

pub fn synth(a: &SynthArgs, m: &mut RunManifest) -> CmdResult {
    let mut r = Resolver::new(a.config.as_deref())?;
    let base = SynthSpec::default();
    let seed = r.get("seed", a.seed, 0)?;
    let shape = r
        .get("shape", dims_flag(&a.shape), Dims(base.shape.to_vec()))?
        .triple("shape")?;
    let count = r.get("count", a.count, 1)?;
    let out: PathBuf = r
        .require("out", a.out.as_ref().map(|p| p.display().to_string()))?
        .into();
    let spec = SynthSpec {
        seed,
        shape,
        tubes: r.get("tubes", a.tubes, base.tubes)?,
        branch_depth: r.get("branch-depth", a.branch_depth, base.branch_depth)?,
        noise_sigma: r.get("noise", a.noise, base.noise_sigma)?,
        contrast: r.get("contrast", a.contrast, base.contrast)?,
        ..base
    };
    m.config = r.finish()?;
    m.seed = Some(seed);
    if let Some(bad) = shape.iter().find(|&&e| e == 0 || e % 16 != 0) {
        return Err(Error::Config(format!(
            "--shape extents must be positive multiples of 16, got {bad} in {shape:?}"
        ))
        .into());
    }
    if count == 0 {
        return Err(Error::Config("--count must be positive".into()).into());
    }
    spec.validate()?;
    fs::create_dir_all(&out)?;
    let cases: Vec<(Volume, LabelVolume)> = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            synth_generate(&SynthSpec {
                seed: seed.wrapping_add(i),
                ..spec.clone()
            })
        })
        .collect::<Result<_, _>>()?;
    for (i, (img, lbl)) in cases.iter().enumerate() {
        let (ip, lp) = (
            out.join(format!("case_{i:04}.img.mdsv")),
            out.join(format!("case_{i:04}.lbl.mdsv")),
        );
        img.write(&ip)?;
        lbl.write(&lp)?;
        m.outputs.extend([ip, lp]);
    }
    info!("wrote {count} case(s) to {}", out.display());
    Ok(())
}

fn network_config(r: &mut Resolver, a: &NetArgs) -> Result<NetworkConfig, Error> {
    let d = NetworkConfig::default();
    let chunk = r.get("scan-chunk", a.scan_chunk, 0)?;
    Ok(NetworkConfig {
        ladder: r.get("ladder", a.ladder.clone(), Dims(d.ladder.clone()))?.0,
        c_max: r.get("c-max", a.c_max, d.c_max)?,
        expand: r.get("expand", a.expand, d.expand)?,
        state_dim: r.get("state-dim", a.state_dim, d.state_dim)?,
        dense_skips: r.get("dense-skips", a.dense_skips, d.dense_skips)?,
        transposed_head: r.get("transposed-head", a.transposed_head, d.transposed_head)?,
        scan: if chunk == 0 {
            ScanStrategy::Sequential
        } else {
            ScanStrategy::Chunked(chunk)
        },
        ..d
    })
}

/// Case pairs in file-name order.
fn load_cases(dir: &Path) -> Result<Vec<Case>, Error> {
    if !dir.is_dir() {
        return Err(Error::Config(format!(
            "data directory {} does not exist",
            dir.display()
        )));
    }
    let mut images: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .filter(|p| p.to_str().is_some_and(|s| s.ends_with(".img.mdsv")))
        .collect();
    images.sort();
    if images.is_empty() {
        return Err(Error::Config(format!("no *.img.mdsv files in {}", dir.display())));
    }
    images
        .iter()
        .map(|ip| {
            let lp = PathBuf::from(ip.to_str().expect("utf-8").replace(".img.mdsv", ".lbl.mdsv"));
            let image = Volume::read(ip)?;
            let label = LabelVolume::read(&lp)?;
            if image.shape() != label.shape() {
                return Err(Error::Format(format!(
                    "{} and {} differ in shape",
                    ip.display(),
                    lp.display()
                )));
            }
            Ok(Case { image, label })
        })
        .collect()
}

pub fn train(a: &TrainArgs, m: &mut RunManifest) -> CmdResult {
    let mut r = Resolver::new(a.config.as_deref())?;
    let stage = r.get("stage", a.stage, 1)?;
    let defaults = if stage == 2 {
        TrainConfig::stage2()
    } else {
        TrainConfig::stage1()
    };
    let data: PathBuf = r
        .require("data", a.data.as_ref().map(|p| p.display().to_string()))?
        .into();
    let out: PathBuf = r
        .require("out", a.out.as_ref().map(|p| p.display().to_string()))?
        .into();
    let epochs = r.get("epochs", a.epochs, defaults.epochs)?;
    // default milestones that fall outside a shortened run are dropped
    let default_ms = Dims(defaults.milestones.iter().copied().filter(|&e| e < epochs).collect());
    let loss = match r.get("loss", a.loss.clone(), "dice".to_string())?.as_str() {
        "dice" => LossKind::Dice,
        "focal" => LossKind::Focal,
        other => return Err(Error::Config(format!("--loss must be dice or focal, got {other}")).into()),
    };
    let cfg = TrainConfig {
        stage,
        epochs,
        lr: r.get("lr", a.lr, defaults.lr)?,
        milestones: r.get("milestones", a.milestones.clone(), default_ms)?.0,
        decay: r.get("decay", a.decay, defaults.decay)?,
        batch_size: r.get("batch-size", a.batch_size, defaults.batch_size)?,
        seed: r.get("seed", a.seed, defaults.seed)?,
        loss,
        stop_at_dice: r.opt("stop-at-dice", a.stop_at_dice)?,
        checkpoint: Some(out.clone()),
        ..defaults
    };
    let infer = InferConfig::default();
    let coarse = r
        .get(
            "coarse-shape",
            dims_flag(&a.coarse_shape),
            Dims(infer.coarse_shape.to_vec()),
        )?
        .triple("coarse-shape")?;
    let (block_side, guidance, model1, pos_per_neg) = if stage == 2 {
        let g = r.get(
            "guidance",
            a.guidance.map(|g| format!("{g:?}").to_lowercase()),
            "coarse".into(),
        )?;
        let g = match g.as_str() {
            "coarse" => GuidanceArg::Coarse,
            "truth" => GuidanceArg::Truth,
            other => return Err(Error::Config(format!("--guidance must be coarse or truth, got {other}")).into()),
        };
        (
            r.get("block-side", a.block_side, infer.block_side)?,
            g,
            r.opt("model1", a.model1.as_ref().map(|p| p.display().to_string()))?,
            r.get("pos-per-neg", a.pos_per_neg, 3)?,
        )
    } else {
        (infer.block_side, GuidanceArg::Truth, None, 3)
    };
    let net_cfg = network_config(&mut r, &a.net)?;
    m.config = r.finish()?;
    m.seed = Some(cfg.seed);
    cfg.validate()?;
    net_cfg.validate()?;

    let cases = load_cases(&data)?;
    let dataset = if stage == 1 {
        stage1_dataset(&cases, coarse)?
    } else {
        let sampling = BlockSamplingConfig {
            coarse_shape: coarse,
            block_side,
            threshold: infer.threshold,
            pos_per_neg,
            seed: cfg.seed,
        };
        match guidance {
            GuidanceArg::Truth => stage2_dataset(&cases, Guidance::Truth, &sampling)?,
            GuidanceArg::Coarse => {
                let path = model1.ok_or_else(|| Error::Config("coarse guidance needs --model1".into()))?;
                let net1 = load_checkpoint(path)?;
                stage2_dataset(&cases, Guidance::Coarse(&net1), &sampling)?
            }
        }
    };
    info!(
        "stage {stage}: {} training samples from {} cases",
        dataset.len(),
        cases.len()
    );
    let mut net = Network::build(net_cfg, cfg.seed)?;
    let trace_path = sibling(&out, "loss.tsv");
    let result = train_stage(&dataset, &cfg, &mut net);
    let report = match result {
        Ok(r) => r,
        Err(e) => {
            m.outputs.push(trace_path);
            return Err(e.into());
        }
    };
    fs::write(&trace_path, format_loss_trace(&report.epochs))?;
    m.outputs.extend(report.checkpoints);
    m.outputs.push(trace_path);
    if report.stopped_early {
        info!("stopped early after {} epochs", report.epochs.len());
    }
    Ok(())
}

/// One `P5` image per axial (`d`) slice, foreground white.
fn export_slices(label: &LabelVolume, dir: &Path) -> Result<Vec<PathBuf>, Error> {
    fs::create_dir_all(dir)?;
    let [h, w, d] = label.shape();
    (0..d)
        .map(|z| {
            let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
            for y in 0..h {
                for x in 0..w {
                    bytes.push(if label.get(y, x, z) { 255 } else { 0 });
                }
            }
            let p = dir.join(format!("slice_{z:04}.pgm"));
            fs::write(&p, bytes)?;
            Ok(p)
        })
        .collect()
}

pub fn segment(a: &SegmentArgs, m: &mut RunManifest) -> CmdResult {
    let mut r = Resolver::new(a.config.as_deref())?;
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let model1: PathBuf = r.require("model1", path(&a.model1))?.into();
    let model2: PathBuf = r.require("model2", path(&a.model2))?.into();
    let input: PathBuf = r.require("input", path(&a.input))?.into();
    let output: PathBuf = r.require("output", path(&a.output))?.into();
    let slices: Option<PathBuf> = r.opt("export-slices", path(&a.export_slices))?.map(Into::into);
    let d = InferConfig::default();
    let cfg = InferConfig {
        coarse_shape: r
            .get(
                "coarse-shape",
                dims_flag(&a.coarse_shape),
                Dims(d.coarse_shape.to_vec()),
            )?
            .triple("coarse-shape")?,
        block_side: r.get("block-side", a.block_side, d.block_side)?,
        threshold: r.get("threshold", a.threshold, d.threshold)?,
    };
    m.config = r.finish()?;

    let net1 = load_checkpoint(&model1)?;
    let net2 = load_checkpoint(&model2)?;
    let volume = Volume::read(&input)?;
    let out = two_stage_infer(&volume, &net1, &net2, &cfg)?;
    if out.status == ExtractionStatus::EmptyGuidance {
        warn!("coarse stage found no foreground; the prediction is empty");
    }
    info!(
        "{} fine block(s), {} foreground voxels",
        out.blocks.len(),
        out.label.count()
    );
    out.label.write(&output)?;
    m.outputs.push(output);
    if let Some(dir) = slices {
        m.outputs.extend(export_slices(&out.label, &dir)?);
    }
    Ok(())
}

pub fn eval(a: &EvalArgs, m: &mut RunManifest) -> CmdResult {
    m.config.insert("pred".into(), a.pred.display().to_string());
    m.config.insert("gt".into(), a.gt.display().to_string());
    let pred = LabelVolume::read(&a.pred)?;
    let gt = LabelVolume::read(&a.gt)?;
    let dsc = dice_coefficient(&pred, &gt)?;
    match surface_distances(&pred, &gt, DistanceMethod::Indexed) {
        Ok((ab, ba)) => {
            println!(
                "DSC {dsc:.4} HD {:.4} AHD {:.4}",
                ab.max.max(ba.max),
                ab.mean.max(ba.mean)
            );
            println!("# distances in {}", mdsvm_core::metrics::distance_units(&gt));
            Ok(())
        }
        Err(e @ Error::UndefinedMetric(_)) => {
            println!("DSC {dsc:.4} HD undefined AHD undefined");
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

pub fn verify(a: &VerifyArgs, m: &mut RunManifest) -> CmdResult {
    m.config.insert("suite".into(), a.suite.clone());
    m.config.insert("seeds".into(), a.seeds.to_string());
    let fault = match a.inject_fault {
        FaultArg::None => Fault::None,
        FaultArg::DiceSign => Fault::DiceSignFlip,
    };
    if fault != Fault::None {
        m.config.insert("inject-fault".into(), "dice-sign".into());
    }
    let checks = run_suite(&a.suite, a.seeds, fault)?;
    print!("{}", format_table(&checks));
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Failure::Verification(format!("{failed} verification check(s) failed")));
    }
    Ok(())
}
