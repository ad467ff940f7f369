use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Graph;
use crate::gradcheck::{check_gradients, check_store_gradients, random_projection, random_tensor, GradCheckConfig};
use crate::params::{Bound, ParamStore};
use crate::verify::{clamped_line_conv, perturb_store};

fn coords_for(raw: &Tensor, spec: SnakeKernelSpec) -> Tensor {
    let mut g = Graph::new();
    let raw = g.constant(raw.clone());
    let c = cumulate_offsets(&mut g, &SnakeKernelOffsets { raw, spec }).unwrap();
    g.value(c).clone()
}

#[test]
fn zero_predictor_gives_zero_offsets() {
    let spec = SnakeKernelSpec::new(Axis::Y, 4, 3, 2);
    let mut g = Graph::new();
    let x = g.constant(random_tensor([1, 3, 4, 4, 4], 1, 1.0));
    let w = g.constant(Tensor::zeros([spec.offset_channels(), 3, 3, 3, 3]));
    let b = g.constant(Tensor::zeros([spec.offset_channels()]));
    let off = predict_offsets(&mut g, x, spec, w, Some(b)).unwrap();
    assert_eq!(g.shape(off.raw), &[1, 18, 4, 4, 4]);
    assert!(g.value(off.raw).data().iter().all(|&v| v == 0.0));
}

#[test]
fn offsets_are_bounded_by_scale() {
    let spec = SnakeKernelSpec {
        offset_scale: 0.7,
        ..SnakeKernelSpec::new(Axis::Z, 2, 2, 2)
    };
    let mut g = Graph::new();
    let x = g.constant(random_tensor([1, 2, 3, 3, 3], 2, 10.0));
    let w = g.constant(random_tensor([spec.offset_channels(), 2, 3, 3, 3], 3, 5.0));
    let off = predict_offsets(&mut g, x, spec, w, None).unwrap();
    assert!(g.value(off.raw).data().iter().all(|v| v.abs() <= 0.7));
}

#[test]
fn predictor_channel_mismatch_is_rejected() {
    let spec = SnakeKernelSpec::new(Axis::X, 1, 1, 1);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([1, 1, 2, 2, 2]));
    let w = g.constant(Tensor::zeros([5, 1, 3, 3, 3]));
    assert!(predict_offsets(&mut g, x, spec, w, None).is_err());
}

#[test]
fn invalid_offset_scale_is_a_config_error() {
    let spec = SnakeKernelSpec {
        offset_scale: 0.0,
        ..SnakeKernelSpec::new(Axis::X, 1, 1, 1)
    };
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([1, 1, 2, 2, 2]));
    let w = g.constant(Tensor::zeros([6, 1, 3, 3, 3]));
    assert!(matches!(
        predict_offsets(&mut g, x, spec, w, None),
        Err(Error::Config(_))
    ));
}

#[test]
fn predictor_gradient_matches_finite_differences() {
    let spec = SnakeKernelSpec::new(Axis::X, 2, 1, 1);
    let inputs = [
        random_tensor([1, 1, 4, 4, 4], 4, 1.0),
        random_tensor([spec.offset_channels(), 1, 3, 3, 3], 5, 0.5),
        random_tensor([spec.offset_channels()], 6, 0.5),
    ];
    let r = check_gradients(
        |g, v| {
            let off = predict_offsets(g, v[0], spec, v[1], Some(v[2]))?;
            random_projection(g, off.raw, 7)
        },
        &inputs,
        GradCheckConfig::default(),
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn zero_offsets_give_the_straight_stencil() {
    for axis in Axis::ALL {
        let spec = SnakeKernelSpec::new(axis, 3, 1, 1);
        let c = coords_for(&Tensor::zeros([1, spec.offset_channels(), 2, 3, 4]), spec);
        for t in 0..spec.taps() {
            for p in [[0, 0, 0], [1, 0, 1], [1, 2, 3]] {
                for a in 0..3 {
                    let want = p[a] as f64 + if a == axis.index() { t as f64 - 3.0 } else { 0.0 };
                    assert_eq!(c.at(&[0, t, a, p[0], p[1], p[2]]), want);
                }
            }
        }
    }
}

#[test]
fn constant_step_unrolls_by_hand() {
    let spec = SnakeKernelSpec::new(Axis::X, 2, 1, 1);
    let mut raw = Tensor::zeros([1, 10, 1, 1, 1]);
    for t in 0..5 {
        raw.set(&[0, t, 0, 0, 0], 0.5);
    }
    let c = coords_for(&raw, spec);
    let dy: Vec<f64> = (0..5).map(|t| c.at(&[0, t, 1, 0, 0, 0])).collect();
    assert_eq!(dy, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
    let dz: Vec<f64> = (0..5).map(|t| c.at(&[0, t, 2, 0, 0, 0])).collect();
    assert_eq!(dz, vec![0.0; 5]);
    let dx: Vec<f64> = (0..5).map(|t| c.at(&[0, t, 0, 0, 0, 0])).collect();
    assert_eq!(dx, vec![-2.0, -1.0, 0.0, 1.0, 2.0]);
}

#[test]
fn zero_offset_snake_is_a_clamped_line_convolution() {
    for (k, axis) in Axis::ALL.into_iter().enumerate() {
        let spec = SnakeKernelSpec::new(axis, 4, 2, 3);
        let x = random_tensor([1, 2, 5, 4, 6], k as u64, 1.0);
        let w = random_tensor([3, 2, 9], 10 + k as u64, 1.0);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let raw = g.constant(Tensor::zeros([1, spec.offset_channels(), 5, 4, 6]));
        let coords = cumulate_offsets(&mut g, &SnakeKernelOffsets { raw, spec }).unwrap();
        let y = snake_conv_axis(&mut g, xv, spec, wv, None, coords).unwrap();
        let want = clamped_line_conv(&x, &w, axis.index());
        let d = g
            .value(y)
            .data()
            .iter()
            .zip(want.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(d <= 1e-10, "{axis:?}: {d}");
    }
}

#[test]
fn symmetric_displacements_cancel_on_a_ramp() {
    let c = 2;
    let spec = SnakeKernelSpec::new(Axis::X, c, 1, 1);
    let shape = [5, 9, 3];
    let x = Tensor::from_fn([1, 1, shape[0], shape[1], shape[2]], |i| {
        ((i / shape[2]) % shape[1]) as f64
    });
    let mut raw = Tensor::zeros([1, spec.offset_channels(), shape[0], shape[1], shape[2]]);
    let sp = shape.iter().product::<usize>();
    raw.data_mut()[..spec.taps() * sp].fill(0.5);
    let w = Tensor::full([1, 1, spec.taps()], 1.0 / spec.taps() as f64);
    let mut g = Graph::new();
    let (xv, wv, rv) = (g.constant(x), g.constant(w), g.constant(raw));
    let coords = cumulate_offsets(&mut g, &SnakeKernelOffsets { raw: rv, spec }).unwrap();
    let y = snake_conv_axis(&mut g, xv, spec, wv, None, coords).unwrap();
    let y = g.value(y);
    for h in 0..shape[0] {
        for wy in 1..shape[1] - 1 {
            for d in 0..shape[2] {
                assert!((y.at(&[0, 0, h, wy, d]) - wy as f64).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn snake_gradient_through_offsets() {
    let spec = SnakeKernelSpec::new(Axis::Y, 2, 2, 2);
    let inputs = [
        random_tensor([1, 2, 4, 4, 3], 20, 1.0),
        random_tensor([1, spec.offset_channels(), 4, 4, 3], 21, 0.45),
        random_tensor([2, 2, spec.taps()], 22, 1.0),
    ];
    let r = check_gradients(
        |g, v| {
            let coords = cumulate_offsets(g, &SnakeKernelOffsets { raw: v[1], spec })?;
            let y = snake_conv_axis(g, v[0], spec, v[2], None, coords)?;
            random_projection(g, y, 23)
        },
        &inputs,
        GradCheckConfig::default(),
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
    assert!(r.kinks * 10 <= r.checked, "{r:?}");
}

#[test]
fn gn_group_rule() {
    assert_eq!(gn_groups(4).unwrap(), 4);
    assert_eq!(gn_groups(16).unwrap(), 8);
    assert!(gn_groups(12).is_err());
}

fn block_store(block: &MdsConvBlock, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    block.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    store
}

#[test]
fn mdsconv_of_zero_input_is_zero() {
    let block = MdsConvBlock::new("b", 2, 4, 4);
    let store = block_store(&block, 1);
    let mut ctx = Bound::new(&store, false);
    let x = ctx.graph.constant(Tensor::zeros([1, 2, 4, 4, 4]));
    let y = block.forward(&mut ctx, x).unwrap();
    assert_eq!(ctx.graph.shape(y), &[1, 4, 4, 4, 4]);
    assert!(ctx.graph.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn mdsconv_reduces_to_standard_branch() {
    let block = MdsConvBlock::new("b", 2, 4, 2);
    let mut store = block_store(&block, 2);
    perturb_store(&mut store, 3, 0.3);
    for axis in ["x", "y", "z"] {
        store
            .get_mut(&format!("b.snake_{axis}.weight"))
            .unwrap()
            .data_mut()
            .fill(0.0);
        store
            .get_mut(&format!("b.snake_{axis}.bias"))
            .unwrap()
            .data_mut()
            .fill(0.0);
    }
    let mut fuse = Tensor::zeros([4, 16, 1, 1, 1]);
    for o in 0..4 {
        fuse.set(&[o, o, 0, 0, 0], 1.0);
    }
    *store.get_mut("b.fuse.weight").unwrap() = fuse;
    store.get_mut("b.fuse.bias").unwrap().data_mut().fill(0.0);
    let x = random_tensor([1, 2, 4, 5, 3], 4, 1.0);

    let mut ctx = Bound::new(&store, false);
    let xv = ctx.graph.constant(x.clone());
    let y = block.forward(&mut ctx, xv).unwrap();
    let got = ctx.graph.value(y).clone();

    let mut g = Graph::new();
    let p = |n: &str| store.get(n).unwrap().clone();
    let (xv, w, b) = (
        g.constant(x),
        g.constant(p("b.std.weight")),
        g.constant(p("b.std.bias")),
    );
    let conv = g.conv3d(xv, w, Some(b), Conv3dOptions::padded(1)).unwrap();
    let (gg, gb) = (g.constant(p("b.gn.gain")), g.constant(p("b.gn.bias")));
    let n = g.normalize(conv, Norm::Group(4), gg, gb).unwrap();
    let want = g.relu(n);
    let d = got
        .data()
        .iter()
        .zip(g.value(want).data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(d < 1e-12, "{d}");
}

#[test]
fn mdsconv_level_two_shape() {
    let block = MdsConvBlock::new("b", 16, 32, 4);
    let store = block_store(&block, 5);
    let mut ctx = Bound::new(&store, false);
    let x = ctx.graph.constant(random_tensor([1, 16, 4, 4, 2], 6, 1.0));
    let y = block.forward(&mut ctx, x).unwrap();
    assert_eq!(ctx.graph.shape(y), &[1, 32, 4, 4, 2]);
}

#[test]
fn mdsconv_block_gradient() {
    let block = MdsConvBlock::new("b", 2, 4, 4);
    let mut store = block_store(&block, 7);
    perturb_store(&mut store, 8, 0.2);
    let r = check_store_gradients(
        &store,
        &[random_tensor([1, 2, 6, 6, 6], 9, 1.0)],
        |ctx, v| {
            let y = block.forward(ctx, v[0])?;
            random_projection(&mut ctx.graph, y, 10)
        },
        GradCheckConfig {
            max_coords: Some(24),
            ..GradCheckConfig::default()
        },
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn centre_tap_and_continuity(
        axis in 0usize..3, half in 1usize..5, scale in 0.1f64..2.0, seed in 0u64..10_000
    ) {
        let spec = SnakeKernelSpec { offset_scale: scale, ..SnakeKernelSpec::new(Axis::ALL[axis], half, 1, 1) };
        let mut g = Graph::new();
        let x = g.constant(random_tensor([1, 1, 3, 3, 2], seed, 3.0));
        let w = g.constant(random_tensor([spec.offset_channels(), 1, 3, 3, 3], seed + 1, 3.0));
        let off = predict_offsets(&mut g, x, spec, w, None).unwrap();
        let c = cumulate_offsets(&mut g, &off).unwrap();
        let c = g.value(c);
        for p in 0..18usize {
            let pos = [p / 6, (p / 2) % 3, p % 2];
            for a in 0..3 {
                prop_assert_eq!(c.at(&[0, half, a, pos[0], pos[1], pos[2]]), pos[a] as f64);
                for t in 0..2 * half {
                    let step = (c.at(&[0, t + 1, a, pos[0], pos[1], pos[2]]) - c.at(&[0, t, a, pos[0], pos[1], pos[2]])).abs();
                    prop_assert!(step <= 1.0 + scale + 1e-12);
                }
                for t in 0..=2 * half {
                    if a != axis {
                        let disp = (c.at(&[0, t, a, pos[0], pos[1], pos[2]]) - pos[a] as f64).abs();
                        prop_assert!(disp <= half as f64 * scale + 1e-12);
                    }
                }
            }
        }
    }
}
