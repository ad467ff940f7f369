use proptest::prelude::*;

use super::*;
use crate::gradcheck::{check_gradients, random_projection, random_tensor, GradCheckConfig};

fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn run1(x: &Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = f(&mut g, v).unwrap();
    g.value(y).clone()
}

fn identity_kernel(c: usize) -> Tensor {
    let mut w = Tensor::zeros([c, c, 3, 3, 3]);
    for i in 0..c {
        w.set(&[i, i, 1, 1, 1], 1.0);
    }
    w
}

// ---- conv3d ----

#[test]
fn conv_of_zero_input_is_zero() {
    let x = Tensor::zeros([1, 1, 3, 3, 3]);
    let w = random_tensor([2, 1, 3, 3, 3], 1, 1.0);
    let y = conv3d_forward(&x, &w, Some(&Tensor::zeros([2])), Conv3dOptions::padded(1)).unwrap();
    assert_eq!(y.shape(), &[1, 2, 3, 3, 3]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_identity_kernel_is_exact_identity() {
    let x = random_tensor([2, 3, 4, 5, 3], 2, 1.0);
    let y = conv3d_forward(&x, &identity_kernel(3), None, Conv3dOptions::padded(1)).unwrap();
    assert_eq!(y, x);
    let y = conv3d_forward_generic(&x, &identity_kernel(3), None, Conv3dOptions::padded(1)).unwrap();
    assert_eq!(y, x);
}

#[test]
fn conv_hand_sum_of_eight_voxels() {
    let x = Tensor::from_fn([1, 1, 2, 2, 2], |i| i as f64);
    let y = conv3d_forward(&x, &Tensor::ones([1, 1, 2, 2, 2]), None, Conv3dOptions::default()).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1, 1]);
    assert_eq!(y.data(), &[28.0]);
}

#[test]
fn conv_output_extent_follows_floor_formula() {
    let x = Tensor::zeros([1, 2, 7, 6, 5]);
    let opts = Conv3dOptions {
        stride: [2, 3, 1],
        padding: [1, 0, 2],
        dilation: [1, 1, 2],
        groups: 1,
    };
    let y = conv3d_forward(&x, &Tensor::zeros([3, 2, 3, 2, 3]), None, opts).unwrap();
    // (7 + 2 - 3) / 2 + 1, (6 - 2) / 3 + 1, (5 + 4 - 5) / 1 + 1
    assert_eq!(y.shape(), &[1, 3, 4, 2, 5]);
}

#[test]
fn conv_errors_name_the_axis() {
    let x = Tensor::zeros([1, 3, 4, 4, 4]);
    let err = conv3d_forward(&x, &Tensor::zeros([2, 2, 3, 3, 3]), None, Conv3dOptions::padded(1)).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }), "{err}");
    assert!(err.to_string().contains("channels"), "{err}");
    let err = conv3d_forward(
        &x,
        &Tensor::zeros([2, 1, 3, 3, 3]),
        None,
        Conv3dOptions::padded(1).with_groups(2),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Shape { .. } | Error::Config(_)), "{err}");
}

fn fast_vs_generic(xs: [usize; 5], ws: [usize; 5], opts: Conv3dOptions, seed: u64) {
    let x = random_tensor(xs, seed, 1.0);
    let w = random_tensor(ws, seed + 1, 1.0);
    let b = random_tensor([ws[0]], seed + 2, 1.0);
    let y = conv3d_forward(&x, &w, Some(&b), opts).unwrap();
    let yg = conv3d_forward_generic(&x, &w, Some(&b), opts).unwrap();
    assert_eq!(y.shape(), yg.shape());
    let d = y
        .data()
        .iter()
        .zip(yg.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(d < 1e-12, "forward differs by {d}");
    let gy = random_tensor(y.shape().to_vec(), seed + 3, 1.0);
    let (gx, gw, gb) = conv3d_backward(&x, &w, &gy, opts, [true; 3]).unwrap();
    let (hx, hw, hb) = conv3d_backward_generic(&x, &w, &gy, opts, [true; 3]).unwrap();
    for (a, b) in [(gx.unwrap(), hx.unwrap()), (gw.unwrap(), hw.unwrap())] {
        let d = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(d < 1e-11, "backward differs by {d}");
    }
    let (gb, hb) = (gb.unwrap(), hb.unwrap());
    let d = gb
        .data()
        .iter()
        .zip(hb.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(d < 1e-11, "bias gradient differs by {d}");
}

#[test]
fn fast_3x3x3_path_matches_generic() {
    fast_vs_generic([2, 5, 6, 5, 7], [6, 5, 3, 3, 3], Conv3dOptions::padded(1), 10);
    fast_vs_generic([1, 1, 1, 2, 9], [3, 1, 3, 3, 3], Conv3dOptions::padded(1), 11);
}

#[test]
fn fast_pointwise_path_matches_generic() {
    fast_vs_generic([2, 7, 3, 4, 5], [5, 7, 1, 1, 1], Conv3dOptions::default(), 12);
}

// ---- grid sampling ----

#[test]
fn grid_sample_on_grid_and_midpoint() {
    let x = Tensor::from_fn([1, 1, 3, 3, 3], |i| (i * i) as f64);
    let c = t(&[1, 1, 3], vec![1.0, 1.0, 1.0]);
    assert_eq!(grid_sample_forward(&x, &c).unwrap().data(), &[x.at(&[0, 0, 1, 1, 1])]);

    let mut x = Tensor::zeros([1, 1, 2, 1, 1]);
    x.set(&[0, 0, 1, 0, 0], 2.0);
    let c = t(&[1, 1, 3], vec![0.5, 0.0, 0.0]);
    assert_eq!(grid_sample_forward(&x, &c).unwrap().data(), &[1.0]);
}

/// Clamp every coordinate first, then interpolate the eight neighbours.
fn clamp_then_interpolate(x: &Tensor, p: [f64; 3]) -> f64 {
    let s = x.shape();
    let q: Vec<f64> = (0..3).map(|a| p[a].clamp(0.0, (s[2 + a] - 1) as f64)).collect();
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut idx = [0usize; 3];
        let mut wgt = 1.0;
        for a in 0..3 {
            let lo = q[a].floor();
            let f = q[a] - lo;
            let up = (corner >> a) & 1 == 1;
            idx[a] = ((lo as usize) + up as usize).min(s[2 + a] - 1);
            wgt *= if up { f } else { 1.0 - f };
        }
        acc += wgt * x.at(&[0, 0, idx[0], idx[1], idx[2]]);
    }
    acc
}

#[test]
fn grid_sample_clamps_to_border() {
    let x = random_tensor([1, 1, 4, 3, 5], 3, 1.0);
    for p in [[-3.0, 0.0, 0.0], [5.5, 1.2, -0.4], [0.3, 9.0, 4.7], [2.25, 1.5, 3.75]] {
        let got = grid_sample_forward(&x, &t(&[1, 1, 3], p.to_vec())).unwrap().data()[0];
        let want = clamp_then_interpolate(&x, p);
        assert!((got - want).abs() < 1e-14, "{p:?}: {got} vs {want}");
    }
    let got = grid_sample_forward(&x, &t(&[1, 1, 3], vec![-3.0, 0.0, 0.0])).unwrap();
    assert_eq!(got.data()[0], x.at(&[0, 0, 0, 0, 0]));
}

// ---- activations ----

#[test]
fn activation_values() {
    let x = t(&[3], vec![-1.0, 2.0, 0.0]);
    assert_eq!(run1(&x, |g, v| Ok(g.relu(v))).data(), &[0.0, 2.0, 0.0]);
    let s = run1(&t(&[2], vec![0.0, 1.0]), |g, v| Ok(g.silu(v)));
    assert_eq!(s.data()[0], 0.0);
    let sig = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((s.data()[1] - sig).abs() < 1e-15);
    assert!((s.data()[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
}

// ---- normalization ----

#[test]
fn normalize_constant_gives_zero() {
    let x = Tensor::full([1, 4, 2, 2, 2], 3.5);
    let y = run1(&x, |g, v| {
        let (gain, bias) = (g.constant(Tensor::ones([4])), g.constant(Tensor::zeros([4])));
        g.normalize(v, Norm::Group(2), gain, bias)
    });
    assert!(y.data().iter().all(|&v| v == 0.0));
    assert_eq!(y.shape(), x.shape());
}

#[test]
fn normalize_two_value_group() {
    let x = t(&[1, 2], vec![-1.0, 1.0]);
    let y = run1(&x, |g, v| {
        let (gain, bias) = (g.constant(Tensor::ones([2])), g.constant(Tensor::zeros([2])));
        g.normalize(v, Norm::Layer, gain, bias)
    });
    let c = 1.0 / (1.0 + NORM_EPS).sqrt();
    assert!(
        (y.data()[0] + c).abs() < 1e-15 && (y.data()[1] - c).abs() < 1e-15,
        "{y:?}"
    );
}

#[test]
fn normalize_rejects_indivisible_groups() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([1, 6, 2, 2, 2]));
    let (gain, bias) = (g.constant(Tensor::ones([6])), g.constant(Tensor::zeros([6])));
    assert!(matches!(
        g.normalize(x, Norm::Group(4), gain, bias),
        Err(Error::Config(_))
    ));
}

#[test]
fn group_statistics_after_normalization() {
    let x = random_tensor([2, 4, 3, 2, 2], 4, 3.0);
    let y = run1(&x, |g, v| {
        let (gain, bias) = (g.constant(Tensor::ones([4])), g.constant(Tensor::zeros([4])));
        g.normalize(v, Norm::Group(2), gain, bias)
    });
    let per_group = 2 * 12;
    for (k, grp) in y.data().chunks(per_group).enumerate() {
        let src = &x.data()[k * per_group..][..per_group];
        let n = per_group as f64;
        let mean = grp.iter().sum::<f64>() / n;
        let var = grp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sm = src.iter().sum::<f64>() / n;
        let sv = src.iter().map(|v| (v - sm).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-10);
        assert!(
            (var - sv / (sv + NORM_EPS)).abs() < 1e-12,
            "{var} vs {}",
            sv / (sv + NORM_EPS)
        );
    }
}

// ---- linear ----

#[test]
fn linear_examples() {
    let x = random_tensor([3, 2], 5, 1.0);
    let eye = t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    let mut g = Graph::new();
    let (xv, w, b) = (g.constant(x.clone()), g.constant(eye), g.constant(Tensor::zeros([2])));
    let y = g.linear(xv, w, Some(b)).unwrap();
    assert_eq!(g.value(y), &x);

    let zw = g.constant(Tensor::zeros([3, 2]));
    let bias = g.constant(t(&[3], vec![1.0, -2.0, 0.5]));
    let y = g.linear(xv, zw, Some(bias)).unwrap();
    assert_eq!(g.value(y).data(), [1.0, -2.0, 0.5].repeat(3).as_slice());

    let xv = g.constant(t(&[2], vec![1.0, 2.0]));
    let w = g.constant(t(&[2, 2], vec![1.0, 1.0, 0.0, 1.0]));
    let y = g.linear(xv, w, None).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 2.0]);
}

// ---- depthwise conv ----

#[test]
fn dwconv_examples() {
    let x = random_tensor([1, 2, 3, 4, 3], 6, 1.0);
    let mut center = Tensor::zeros([2, 1, 3, 3, 3]);
    center.set(&[0, 0, 1, 1, 1], 1.0);
    center.set(&[1, 0, 1, 1, 1], 1.0);
    assert_eq!(
        run1(&x, |g, v| {
            let w = g.constant(center.clone());
            g.dwconv3d(v, w, None)
        }),
        x
    );

    let x = Tensor::from_fn([1, 2, 3, 3, 3], |i| if i < 27 { 2.0 } else { -0.5 });
    let y = run1(&x, |g, v| {
        let w = g.constant(Tensor::ones([2, 1, 3, 3, 3]));
        g.dwconv3d(v, w, None)
    });
    assert_eq!(y.at(&[0, 0, 1, 1, 1]), 54.0);
    assert_eq!(y.at(&[0, 1, 1, 1, 1]), -13.5);

    let w = random_tensor([2, 1, 3, 3, 3], 7, 1.0);
    let base = random_tensor([1, 2, 3, 3, 3], 8, 1.0);
    let mut bumped = base.clone();
    for i in 0..27 {
        bumped.data_mut()[i] += 1.0;
    }
    let f = |x: &Tensor| {
        run1(x, |g, v| {
            let wv = g.constant(w.clone());
            g.dwconv3d(v, wv, None)
        })
    };
    let (a, b) = (f(&base), f(&bumped));
    assert_eq!(a.data()[27..], b.data()[27..]);
    assert_ne!(a.data()[..27], b.data()[..27]);
}

// ---- upsampling and pooling ----

#[test]
fn upsample_constant_and_shape() {
    let x = Tensor::full([1, 2, 2, 3, 1], 1.25);
    let y = upsample_forward(&x).unwrap();
    assert_eq!(y.shape(), &[1, 2, 4, 6, 2]);
    assert!(y.data().iter().all(|&v| v == 1.25));
}

#[test]
fn upsample_reproduces_ramp_with_half_pixel_centres() {
    let n = 4;
    let x = Tensor::from_fn([1, 1, n, 1, 1], |i| 3.0 * i as f64 + 1.0);
    let y = upsample_forward(&x).unwrap();
    for o in 0..2 * n {
        let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
        let want = 3.0 * src + 1.0;
        assert!((y.at(&[0, 0, o, 0, 0]) - want).abs() < 1e-14, "{o}");
    }
}

#[test]
fn max_pool_examples() {
    let c = Tensor::full([1, 1, 2, 4, 2], -2.0);
    assert!(max_pool2_forward(&c).unwrap().0.data().iter().all(|&v| v == -2.0));
    let x = Tensor::from_fn([1, 1, 2, 2, 2], |i| i as f64);
    assert_eq!(max_pool2_forward(&x).unwrap().0.data(), &[7.0]);
    assert!(max_pool2_forward(&Tensor::zeros([1, 1, 3, 2, 2])).is_err());

    let x = t(&[1, 1, 2, 2, 2], vec![0.3, 0.9, 0.1, 0.2, 0.4, 0.5, 0.6, 0.7]);
    let mut g = Graph::new();
    let v = g.param(x);
    let y = g.pool_max3d(v).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(v).unwrap().data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn max_pool_ties_go_to_first_index() {
    let mut g = Graph::new();
    let v = g.param(Tensor::ones([1, 1, 2, 2, 2]));
    let y = g.pool_max3d(v).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(v).unwrap().data()[0], 1.0);
    assert_eq!(g.grad(v).unwrap().sum(), 1.0);
}

// ---- combine ----

#[test]
fn combine_examples() {
    let x = random_tensor([1, 2, 2, 2, 2], 9, 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let z = g.constant(Tensor::zeros(x.shape().to_vec()));
    let o = g.constant(Tensor::ones(x.shape().to_vec()));
    let a = g.combine(xv, z, Combine::Add).unwrap();
    let h = g.combine(xv, o, Combine::Hadamard).unwrap();
    assert_eq!(g.value(a), &x);
    assert_eq!(g.value(h), &x);

    let parts: Vec<Var> = (0..4).map(|_| g.constant(Tensor::zeros([1, 16, 2, 2, 2]))).collect();
    let cat = g.concat(&parts, 1).unwrap();
    assert_eq!(g.shape(cat), &[1, 64, 2, 2, 2]);
    let odd = g.constant(Tensor::zeros([1, 16, 2, 2, 4]));
    assert!(g.combine(parts[0], odd, Combine::Concat).is_err());
    assert!(g.combine(parts[0], odd, Combine::Add).is_err());
}

// ---- backward ----

#[test]
fn gradient_of_sum_is_ones_and_of_square_is_2x() {
    let x = random_tensor([2, 3], 10, 1.0);
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let s = g.sum(v);
    g.backward(s).unwrap();
    assert!(g.grad(v).unwrap().data().iter().all(|&d| d == 1.0));

    let mut g = Graph::new();
    let v = g.param(x.clone());
    let sq = g.mul(v, v).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    let want: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(g.grad(v).unwrap().data(), want.as_slice());
}

#[test]
fn backward_needs_a_scalar() {
    let mut g = Graph::new();
    let v = g.param(Tensor::ones([3]));
    let y = g.exp(v);
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::ones([2]));
    let p = g.param(Tensor::ones([2]));
    let y = g.mul(c, p).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(c).is_none());
    assert!(g.grad(p).is_some());
}

#[test]
fn conv_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let inputs = [
            random_tensor([1, 2, 3, 4, 3], seed, 1.0),
            random_tensor([3, 2, 3, 3, 3], seed + 1, 1.0),
            random_tensor([3], seed + 2, 1.0),
        ];
        let r = check_gradients(
            |g, v| {
                let y = g.conv3d(v[0], v[1], Some(v[2]), Conv3dOptions::padded(1))?;
                random_projection(g, y, seed)
            },
            &inputs,
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}

#[test]
fn ops_are_pure() {
    let x = random_tensor([1, 2, 4, 4, 4], 11, 1.0);
    let f = |x: &Tensor| {
        run1(x, |g, v| {
            let w = g.constant(random_tensor([2, 2, 3, 3, 3], 12, 1.0));
            let c = g.conv3d(v, w, None, Conv3dOptions::padded(1))?;
            let p = g.pool_max3d(c)?;
            let u = g.upsample_trilinear(p)?;
            Ok(g.silu(u))
        })
    };
    assert_eq!(f(&x), f(&x));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn identity_kernel_is_identity_for_any_shape(
        b in 1usize..3, c in 1usize..4, h in 1usize..6, w in 1usize..6, d in 1usize..6, seed in 0u64..1000
    ) {
        let x = random_tensor([b, c, h, w, d], seed, 2.0);
        let y = conv3d_forward(&x, &identity_kernel(c), None, Conv3dOptions::padded(1)).unwrap();
        prop_assert_eq!(y, x);
    }

    #[test]
    fn integer_coordinates_reproduce_values_exactly(
        h in 1usize..5, w in 1usize..5, d in 1usize..5, seed in 0u64..1000
    ) {
        let x = random_tensor([1, 2, h, w, d], seed, 1.0);
        let mut coords = Vec::new();
        for i in 0..h { for j in 0..w { for k in 0..d {
            coords.extend([i as f64, j as f64, k as f64]);
        }}}
        let m = h * w * d;
        let y = grid_sample_forward(&x, &t(&[1, m, 3], coords)).unwrap();
        prop_assert_eq!(y.data(), x.data());
    }

    #[test]
    fn upsample_then_pool_preserves_shape(c in 1usize..3, h in 1usize..4, w in 1usize..4, d in 1usize..4) {
        let x = random_tensor([1, c, h, w, d], 0, 1.0);
        let y = upsample_forward(&x).unwrap();
        let (p, _) = max_pool2_forward(&y).unwrap();
        prop_assert_eq!(p.shape(), x.shape());
    }
}
