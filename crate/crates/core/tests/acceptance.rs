//! Acceptance criteria 1 to 8, one PASS/FAIL line each.
//!
//! Runs as a plain binary (`harness = false`). Pass criterion numbers as
//! arguments to run a subset, e.g. `cargo test --test acceptance -- 3 4`.

use std::process::ExitCode;
use std::time::Instant;

use mdsvm_core::checkpoint::{decode_network, encode_network, load_checkpoint, save_checkpoint};
use mdsvm_core::pipeline::*;
use mdsvm_core::snake::{cumulate_offsets, snake_conv_axis};
use mdsvm_core::verify::{gradient_suite, pipeline_suite, Fault, GradSummary};
use mdsvm_core::volume::MdsvFile;
use mdsvm_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Target total for the full configuration, in parameters.
const PUBLISHED_PARAMS: f64 = 26.7e6;
const PARAM_BAND: f64 = 0.15;
const SNAKE_TOLERANCE: f64 = 1e-10;
const SCAN_TOLERANCE: f64 = 1e-12;
const CHUNK_TOLERANCE: f64 = 1e-9;
const OVERFIT_DICE: f64 = 0.95;
const OVERFIT_EPOCHS: usize = 200;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_1() -> Result<Outcome> {
    let cfg = NetworkConfig::default();
    let n = cfg.parameter_count()? as f64;
    let built = Network::build(cfg, 0)?.parameter_count() as f64;
    let rel = (n - PUBLISHED_PARAMS) / PUBLISHED_PARAMS;
    Ok(outcome(
        n == built && rel.abs() <= PARAM_BAND,
        format!("{n} parameters, {:+.1}% from 26.7M (band +/-15%)", 100.0 * rel),
    ))
}

fn criterion_2() -> Result<Outcome> {
    let summaries = gradient_suite(10, Fault::None)?;
    let failed: Vec<&str> = summaries.iter().filter(|s| !s.passed()).map(|s| s.name).collect();
    let worst = summaries
        .iter()
        .map(|s: &GradSummary| s.result.max_rel_error)
        .fold(0.0, f64::max);
    Ok(outcome(
        failed.is_empty(),
        format!(
            "{} cases x 10 seeds, worst rel err {worst:.2e}, failing {failed:?}",
            summaries.len()
        ),
    ))
}

/// `sum_t w[o,i,t] * x[i, p + (t - k) e_axis]` with clamped indices.
fn line_conv(x: &Tensor, w: &Tensor, axis: usize) -> Vec<f64> {
    let s = x.shape().to_vec();
    let (cout, cin, taps) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let half = (taps / 2) as isize;
    let mut out = Vec::with_capacity(cout * s[2] * s[3] * s[4]);
    for o in 0..cout {
        for h in 0..s[2] {
            for v in 0..s[3] {
                for d in 0..s[4] {
                    let mut acc = 0.0;
                    for i in 0..cin {
                        for t in 0..taps {
                            let mut p = [h as isize, v as isize, d as isize];
                            p[axis] = (p[axis] + t as isize - half).clamp(0, s[2 + axis] as isize - 1);
                            acc += w.at(&[o, i, t]) * x.at(&[0, i, p[0] as usize, p[1] as usize, p[2] as usize]);
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn criterion_3() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let cin = rng.random_range(1..=3);
        let cout = rng.random_range(1..=3);
        let shape = [
            1,
            cin,
            rng.random_range(1..=6),
            rng.random_range(1..=6),
            rng.random_range(1..=6),
        ];
        let half = rng.random_range(1..=4);
        let axis = Axis::ALL[rng.random_range(0..3)];
        let spec = SnakeKernelSpec::new(axis, half, cin, cout);
        let x = random_tensor(&mut rng, &shape);
        let w = random_tensor(&mut rng, &[cout, cin, 2 * half + 1]);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let raw = g.constant(Tensor::zeros([1, spec.offset_channels(), shape[2], shape[3], shape[4]]));
        let wv = g.constant(w.clone());
        let coords = cumulate_offsets(&mut g, &SnakeKernelOffsets { raw, spec })?;
        let y = snake_conv_axis(&mut g, xv, spec, wv, None, coords)?;
        worst = worst.max(max_abs_diff(g.value(y).data(), &line_conv(&x, &w, axis.index())));
    }
    Ok(outcome(
        worst <= SNAKE_TOLERANCE,
        format!("50 instances, max |diff| {worst:.2e} (tol 1e-10)"),
    ))
}

/// Step-by-step recurrence `h = exp(dt a) h + dt b u`, `y = c.h + d u`.
fn unroll(u: &Tensor, dt: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor) -> Vec<f64> {
    let (l, e, n) = (u.shape()[0], u.shape()[1], a.shape()[1]);
    let mut y = vec![0.0; l * e];
    for ch in 0..e {
        let mut h = vec![0.0; n];
        for t in 0..l {
            let (x, step) = (u.at(&[t, ch]), dt.at(&[t, ch]));
            let mut acc = d.at(&[ch]) * x;
            for (k, hk) in h.iter_mut().enumerate() {
                *hk = (step * a.at(&[ch, k])).exp() * *hk + step * b.at(&[t, k]) * x;
                acc += c.at(&[t, k]) * *hk;
            }
            y[t * e + ch] = acc;
        }
    }
    y
}

fn scan(ops: [&Tensor; 6], strategy: ScanStrategy) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let v: Vec<Var> = ops.iter().map(|t| g.constant((*t).clone())).collect();
    let y = g.selective_scan(v[0], v[1], v[2], v[3], v[4], Some(v[5]), strategy)?;
    Ok(g.value(y).data().to_vec())
}

fn criterion_4() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_unroll, mut worst_chunk) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let (l, e, n) = (
            rng.random_range(1..=64),
            rng.random_range(1..=8),
            rng.random_range(1..=16),
        );
        let u = random_tensor(&mut rng, &[l, e]);
        let dt = Tensor::from_fn([l, e], |_| rng.random_range(0.001..1.0));
        let a = Tensor::from_fn([e, n], |_| -rng.random_range(0.01..1.0));
        let b = random_tensor(&mut rng, &[l, n]);
        let c = random_tensor(&mut rng, &[l, n]);
        let d = random_tensor(&mut rng, &[e]);
        let ops = [&u, &dt, &a, &b, &c, &d];
        let seq = scan(ops, ScanStrategy::Sequential)?;
        worst_unroll = worst_unroll.max(max_abs_diff(&seq, &unroll(&u, &dt, &a, &b, &c, &d)));
        let chunked = scan(ops, ScanStrategy::Chunked(rng.random_range(1..=16)))?;
        worst_chunk = worst_chunk.max(max_abs_diff(&seq, &chunked));
    }
    let l = 40;
    let u = random_tensor(&mut rng, &[l, 1]);
    let ones = Tensor::ones([l, 1]);
    let y = scan(
        [&u, &ones, &Tensor::zeros([1, 1]), &ones, &ones, &Tensor::zeros([1])],
        ScanStrategy::Sequential,
    )?;
    let mut run = 0.0;
    let cumsum = u.data().iter().zip(&y).all(|(x, y)| {
        run += x;
        run == *y
    });
    Ok(outcome(
        worst_unroll <= SCAN_TOLERANCE && worst_chunk <= CHUNK_TOLERANCE && cumsum,
        format!(
            "100 instances, unroll {worst_unroll:.2e} (tol 1e-12), chunked {worst_chunk:.2e} (tol 1e-9), A=0 cumsum exact: {cumsum}"
        ),
    ))
}

/// Surface voxels by the six-neighbour rule, scaled to physical units.
fn surface(v: &LabelVolume) -> Vec<[f64; 3]> {
    let [nh, nw, nd] = v.shape();
    let s = v.spacing().map_or([1.0; 3], |s| s.map(f64::from));
    let fg = |p: [isize; 3]| {
        p.iter().all(|&c| c >= 0)
            && (p[0] as usize) < nh
            && (p[1] as usize) < nw
            && (p[2] as usize) < nd
            && v.get(p[0] as usize, p[1] as usize, p[2] as usize)
    };
    let mut out = Vec::new();
    for h in 0..nh {
        for w in 0..nw {
            for d in 0..nd {
                let p = [h as isize, w as isize, d as isize];
                let steps = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
                let boundary = steps.iter().any(|st| !fg([p[0] + st[0], p[1] + st[1], p[2] + st[2]]));
                if v.get(h, w, d) && boundary {
                    out.push([h as f64 * s[0], w as f64 * s[1], d as f64 * s[2]]);
                }
            }
        }
    }
    out
}

/// `(HD, AHD)` from every pairwise distance.
fn pairwise(a: &LabelVolume, b: &LabelVolume) -> (f64, f64) {
    let directed = |x: &[[f64; 3]], y: &[[f64; 3]]| {
        let mins: Vec<f64> = x
            .iter()
            .map(|p| {
                y.iter()
                    .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        (
            mins.iter().copied().fold(0.0, f64::max),
            mins.iter().sum::<f64>() / mins.len() as f64,
        )
    };
    let (sa, sb) = (surface(a), surface(b));
    let (ab, ba) = (directed(&sa, &sb), directed(&sb, &sa));
    (ab.0.max(ba.0), ab.1.max(ba.1))
}

fn criterion_5() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut pairs, mut mismatches, mut spacing_bad) = (0, 0, 0);
    while pairs < 100 {
        let shape = [
            rng.random_range(2..=16),
            rng.random_range(2..=16),
            rng.random_range(2..=16),
        ];
        let density = rng.random_range(0.01..0.4);
        let a = LabelVolume::from_fn(shape, |_, _, _| rng.random_bool(density))?;
        let b = LabelVolume::from_fn(shape, |_, _, _| rng.random_bool(density))?;
        if a.count() == 0 || b.count() == 0 {
            continue;
        }
        pairs += 1;
        if (hausdorff(&a, &b)?, average_hausdorff(&a, &b)?) != pairwise(&a, &b) {
            mismatches += 1;
        }
        let a2 = a.clone().with_spacing(Some([2.0; 3]))?;
        let b2 = b.clone().with_spacing(Some([2.0; 3]))?;
        if hausdorff(&a2, &b2)? != 2.0 * hausdorff(&a, &b)?
            || average_hausdorff(&a2, &b2)? != 2.0 * average_hausdorff(&a, &b)?
        {
            spacing_bad += 1;
        }
    }
    let p = LabelVolume::from_points([8, 8, 8], &[[0, 0, 0]])?;
    let q = LabelVolume::from_points([8, 8, 8], &[[3, 4, 0]])?;
    let hand = hausdorff(&p, &q)? == 5.0
        && average_hausdorff(&p, &q)? == 5.0
        && hausdorff(&p, &p)? == 0.0
        && average_hausdorff(&q, &q)? == 0.0;
    Ok(outcome(
        mismatches == 0 && spacing_bad == 0 && hand,
        format!("100 pairs, {mismatches} oracle mismatches, {spacing_bad} spacing failures, hand cases exact: {hand}"),
    ))
}

fn criterion_6() -> Result<Outcome> {
    // the pipeline suite runs five randomized cases per unit
    let checks = pipeline_suite(10)?;
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{}: {}", c.name, c.detail))
        .collect();
    let names: Vec<&str> = checks.iter().map(|c| c.name.as_str()).collect();
    Ok(outcome(
        failed.is_empty() && checks.len() == 4,
        format!("50 cases, checks {names:?}, failing {failed:?}"),
    ))
}

fn synth_case(seed: u64) -> Result<Sample> {
    let (image, label) = synth_generate(&SynthSpec {
        seed,
        noise_sigma: 0.02,
        ..SynthSpec::default()
    })?;
    Ok(Sample { image, label })
}

fn overfit_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lr: 1e-2,
        milestones: vec![],
        stop_at_dice: Some(0.97),
        ..TrainConfig::stage1()
    }
}

fn criterion_7() -> Result<Outcome> {
    let start = Instant::now();
    let case = synth_case(7)?;
    let mut net = Network::build(NetworkConfig::toy(), 7)?;
    let report = train_stage(std::slice::from_ref(&case), &overfit_config(OVERFIT_EPOCHS), &mut net)?;
    let overfit = sample_dice(&net, &case)?;

    let mut again = Network::build(NetworkConfig::toy(), 7)?;
    let short = train_stage(std::slice::from_ref(&case), &overfit_config(3), &mut again)?;
    let mut reference = Network::build(NetworkConfig::toy(), 7)?;
    let replay = train_stage(std::slice::from_ref(&case), &overfit_config(3), &mut reference)?;
    let deterministic = short.epochs == replay.epochs
        && encode_network(&again) == encode_network(&reference)
        && short.epochs[..] == report.epochs[..3];

    let train: Vec<Sample> = (100..105).map(synth_case).collect::<Result<_>>()?;
    let test: Vec<Sample> = (200..205).map(synth_case).collect::<Result<_>>()?;
    let coarse = [32, 32, 16];
    let side = 16;
    let mut net1 = Network::build(NetworkConfig::toy(), 1)?;
    let c1 = TrainConfig {
        epochs: 60,
        lr: 1e-2,
        stop_at_dice: Some(0.9),
        ..TrainConfig::stage1()
    };
    train_stage(&stage1_dataset(&train, coarse)?, &c1, &mut net1)?;
    let sampling = BlockSamplingConfig {
        coarse_shape: coarse,
        block_side: side,
        threshold: 0.5,
        pos_per_neg: 3,
        seed: 0,
    };
    let blocks = stage2_dataset(&train, Guidance::Coarse(&net1), &sampling)?;
    let mut net2 = Network::build(NetworkConfig::toy(), 2)?;
    let c2 = TrainConfig {
        epochs: 30,
        lr: 1e-2,
        milestones: vec![20],
        batch_size: 4,
        stop_at_dice: Some(0.95),
        ..TrainConfig::stage2()
    };
    train_stage(&blocks, &c2, &mut net2)?;
    let infer = InferConfig {
        coarse_shape: coarse,
        block_side: side,
        threshold: 0.5,
    };
    let (mut one, mut two) = (0.0, 0.0);
    for c in &test {
        one += dice_coefficient(&stage1_only(&c.image, &net1, &infer)?, &c.label)?;
        two += dice_coefficient(&two_stage_infer(&c.image, &net1, &net2, &infer)?.label, &c.label)?;
    }
    let (one, two) = (one / test.len() as f64, two / test.len() as f64);
    Ok(outcome(
        overfit > OVERFIT_DICE && report.epochs.len() <= OVERFIT_EPOCHS && deterministic && two > one,
        format!(
            "overfit Dice {overfit:.4} after {} epochs, deterministic: {deterministic}, held-out mean Dice stage-1 {one:.4} vs two-stage {two:.4}, {:.0} s",
            report.epochs.len(),
            start.elapsed().as_secs_f64()
        ),
    ))
}

fn small_config() -> NetworkConfig {
    NetworkConfig {
        ladder: vec![4, 8],
        c_max: 1,
        state_dim: 2,
        ..NetworkConfig::toy()
    }
}

fn criterion_8() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let case = synth_case(8)?;
    let data = stage1_dataset(std::slice::from_ref(&case), [16, 16, 8])?;
    let cfg = TrainConfig {
        epochs: 2,
        lr: 1e-2,
        milestones: vec![],
        ..TrainConfig::stage1()
    };
    let run = || -> Result<(Vec<u8>, Vec<u8>)> {
        let mut net = Network::build(small_config(), 11)?;
        train_stage(&data, &cfg, &mut net)?;
        let probs = net.predict(&data[0].image.to_tensor())?;
        Ok((
            encode_network(&net),
            probs.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
        ))
    };
    let (ckpt_a, pred_a) = run()?;
    let (ckpt_b, pred_b) = run()?;
    let runs_identical = ckpt_a == ckpt_b && pred_a == pred_b;

    let ckpt_path = dir.path().join("model.ckpt");
    let net = decode_network(&ckpt_a)?;
    save_checkpoint(&ckpt_path, &net)?;
    let ckpt_round_trip =
        std::fs::read(&ckpt_path)? == ckpt_a && encode_network(&load_checkpoint(&ckpt_path)?) == ckpt_a;

    let img_path = dir.path().join("case.img.mdsv");
    let lbl_path = dir.path().join("case.lbl.mdsv");
    let image = case.image.clone().with_spacing(Some([0.5, 0.5, 0.8]))?;
    image.write(&img_path)?;
    case.label.write(&lbl_path)?;
    let volumes_round_trip = Volume::read(&img_path)? == image
        && std::fs::read(&img_path)? == image.to_bytes()
        && LabelVolume::read(&lbl_path)? == case.label
        && matches!(MdsvFile::read(&lbl_path)?, MdsvFile::Label(ref l) if *l == case.label);
    Ok(outcome(
        runs_identical && ckpt_round_trip && volumes_round_trip,
        format!(
            "repeat runs identical: {runs_identical}, checkpoint round trip: {ckpt_round_trip}, volume round trips: {volumes_round_trip}"
        ),
    ))
}

type Criterion = fn() -> Result<Outcome>;

fn main() -> ExitCode {
    let all: [(usize, &str, Criterion); 8] = [
        (1, "parameter count", criterion_1),
        (2, "gradient suite", criterion_2),
        (3, "zero-offset snake degeneracy", criterion_3),
        (4, "scan oracle", criterion_4),
        (5, "metric oracles", criterion_5),
        (6, "pipeline invariants", criterion_6),
        (7, "toy overfit and two-stage gain", criterion_7),
        (8, "determinism and round trips", criterion_8),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let selected: Vec<_> = all
        .iter()
        .filter(|(n, _, _)| wanted.is_empty() || wanted.contains(n))
        .collect();
    let results: Vec<(usize, &str, Result<Outcome>)> = std::thread::scope(|s| {
        let handles: Vec<_> = selected.iter().map(|&&(n, name, f)| (n, name, s.spawn(f))).collect();
        handles
            .into_iter()
            .map(|(n, name, h)| {
                (
                    n,
                    name,
                    h.join()
                        .unwrap_or_else(|_| Err(Error::Contract("criterion panicked".into()))),
                )
            })
            .collect()
    });
    let mut failures = 0;
    for (n, name, r) in results {
        let (mark, detail) = match r {
            Ok(o) if o.passed => ("PASS", o.detail),
            Ok(o) => ("FAIL", o.detail),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        if mark == "FAIL" {
            failures += 1;
        }
        println!("criterion {n} {mark}: {name}: {detail}");
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
