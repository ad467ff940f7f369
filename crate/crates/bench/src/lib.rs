//! Deterministic inputs shared by the kernel benchmarks.

use mdsvm_core::gradcheck::random_tensor;
use mdsvm_core::{LabelVolume, Tensor};

/// `[1, c, s, s, s]` features and a `[c, c, 3, 3, 3]` kernel.
pub fn conv_inputs(c: usize, s: usize) -> (Tensor, Tensor) {
    (
        random_tensor([1, c, s, s, s], 1, 1.0),
        random_tensor([c, c, 3, 3, 3], 2, 0.1),
    )
}

/// `[1, c, s, s, s]` features and `m` in-range sample points.
pub fn sample_inputs(c: usize, s: usize, m: usize) -> (Tensor, Tensor) {
    let x = random_tensor([1, c, s, s, s], 3, 1.0);
    let half = (s as f64 - 1.0) / 2.0;
    let raw = random_tensor([1, m, 3], 4, 1.0);
    let coords = Tensor::new([1, m, 3], raw.data().iter().map(|v| half + v * half).collect()).expect("shape");
    (x, coords)
}

/// Scan operands `(u, delta, a, b, c, d)` for length `l`, `e` channels, state `n`.
pub fn scan_inputs(l: usize, e: usize, n: usize) -> [Tensor; 6] {
    let shifted = |t: Tensor, f: fn(f64) -> f64| {
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("shape")
    };
    [
        random_tensor([l, e], 5, 1.0),
        shifted(random_tensor([l, e], 6, 1.0), |v| 0.001 + 0.5 * (v + 1.0)),
        shifted(random_tensor([e, n], 7, 1.0), |v| -0.01 - 0.5 * (v + 1.0)),
        random_tensor([l, n], 8, 1.0),
        random_tensor([l, n], 9, 1.0),
        random_tensor([e], 10, 1.0),
    ]
}

/// Two overlapping solid tubes along `d` in an `s^3` grid.
pub fn tube_pair(s: usize) -> (LabelVolume, LabelVolume) {
    let tube = |ch: f64, cw: f64, r: f64| {
        LabelVolume::from_fn([s, s, s], move |h, w, _| {
            (h as f64 - ch).powi(2) + (w as f64 - cw).powi(2) <= r * r
        })
        .expect("shape")
    };
    let c = s as f64 / 2.0;
    (tube(c, c, s as f64 / 6.0), tube(c + 2.0, c - 1.0, s as f64 / 5.0))
}
