//! Specialised kernels for the two convolution shapes the network uses
//! almost exclusively: 3x3x3 with unit stride and `same` padding, and 1x1x1.

use rayon::prelude::*;

use super::gemm::{gemm, Mat};

/// Output channels updated together by the 3x3x3 kernel.
const OB: usize = 4;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dims {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub spatial: [usize; 3],
}

impl Dims {
    fn sp(&self) -> usize {
        self.spatial.iter().product()
    }
}

/// `row[j] += a0 * x[j-1] + a1 * x[j] + a2 * x[j+1]`, zero outside `x`.
#[inline]
fn row3(row: &mut [f64], x: &[f64], a: [f64; 3]) {
    let n = row.len();
    if n == 1 {
        row[0] += a[1] * x[0];
        return;
    }
    row[0] += a[1] * x[0] + a[2] * x[1];
    for (((r, xm), x0), xp) in row[1..n - 1].iter_mut().zip(&x[..n - 2]).zip(&x[1..n - 1]).zip(&x[2..]) {
        *r += a[0] * xm + a[1] * x0 + a[2] * xp;
    }
    row[n - 1] += a[0] * x[n - 2] + a[1] * x[n - 1];
}

/// Three shifted dot products `sum_j g[j] * x[j + t - 1]` for `t = 0, 1, 2`.
#[inline]
fn dot3(g: &[f64], x: &[f64]) -> [f64; 3] {
    let n = g.len();
    if n == 1 {
        return [0.0, g[0] * x[0], 0.0];
    }
    let mut acc = [[0.0f64; 4]; 3];
    let inner = n - 2;
    let chunks = inner / 4;
    for c in 0..chunks {
        for l in 0..4 {
            let j = 1 + 4 * c + l;
            acc[0][l] += g[j] * x[j - 1];
            acc[1][l] += g[j] * x[j];
            acc[2][l] += g[j] * x[j + 1];
        }
    }
    let mut s = acc.map(|a| (a[0] + a[1]) + (a[2] + a[3]));
    for j in 1 + 4 * chunks..n - 1 {
        s[0] += g[j] * x[j - 1];
        s[1] += g[j] * x[j];
        s[2] += g[j] * x[j + 1];
    }
    s[1] += g[0] * x[0];
    s[2] += g[0] * x[1];
    s[0] += g[n - 1] * x[n - 2];
    s[1] += g[n - 1] * x[n - 1];
    s
}

/// Valid `(kh, ih)` pairs for output index `o` on an axis of length `n`.
#[inline]
fn taps(o: usize, n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..3usize).filter_map(move |k| {
        let i = (o + k).checked_sub(1)?;
        (i < n).then_some((k, i))
    })
}

/// `w: [cout, cin, 3, 3, 3]`.
pub(crate) fn same3_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, dims: Dims) -> Vec<f64> {
    let Dims { cin, cout, .. } = dims;
    let [h, wd, d] = dims.spatial;
    let sp = dims.sp();
    let mut out = vec![0.0; dims.batch * cout * sp];
    out.par_chunks_mut(cout * sp).enumerate().for_each(|(b, out_b)| {
        out_b.par_chunks_mut(OB * sp).enumerate().for_each(|(blk, out_blk)| {
            let o0 = blk * OB;
            let nb = out_blk.len() / sp;
            if let Some(bias) = bias {
                for k in 0..nb {
                    out_blk[k * sp..][..sp].fill(bias[o0 + k]);
                }
            }
            for ci in 0..cin {
                let xc = &x[(b * cin + ci) * sp..][..sp];
                let wk: Vec<&[f64]> = (0..nb).map(|k| &w[((o0 + k) * cin + ci) * 27..][..27]).collect();
                for oh in 0..h {
                    for ow in 0..wd {
                        let base = (oh * wd + ow) * d;
                        for (kh, ih) in taps(oh, h) {
                            for (kw, iw) in taps(ow, wd) {
                                let irow = &xc[(ih * wd + iw) * d..][..d];
                                let t = (kh * 3 + kw) * 3;
                                for (k, wk) in wk.iter().enumerate() {
                                    let row = &mut out_blk[k * sp + base..][..d];
                                    row3(row, irow, [wk[t], wk[t + 1], wk[t + 2]]);
                                }
                            }
                        }
                    }
                }
            }
        });
    });
    out
}

/// Input gradient: a `same` convolution of `gy` with the spatially flipped,
/// channel-transposed kernel.
pub(crate) fn same3_input_grad(gy: &[f64], w: &[f64], dims: Dims) -> Vec<f64> {
    let Dims { cin, cout, .. } = dims;
    let mut wt = vec![0.0; w.len()];
    for o in 0..cout {
        for ci in 0..cin {
            let src = &w[(o * cin + ci) * 27..][..27];
            let dst = &mut wt[(ci * cout + o) * 27..][..27];
            for k in 0..27 {
                dst[k] = src[26 - k];
            }
        }
    }
    let flipped = Dims {
        cin: cout,
        cout: cin,
        ..dims
    };
    same3_forward(gy, &wt, None, flipped)
}

/// Weight gradient `[cout, cin, 27]`; batches and rows are summed in a fixed order.
pub(crate) fn same3_weight_grad(x: &[f64], gy: &[f64], dims: Dims) -> Vec<f64> {
    let Dims { cin, cout, .. } = dims;
    let [h, wd, d] = dims.spatial;
    let sp = dims.sp();
    let mut gw = vec![0.0; cout * cin * 27];
    gw.par_chunks_mut(cin * 27).enumerate().for_each(|(o, gwo)| {
        for b in 0..dims.batch {
            let gyo = &gy[(b * cout + o) * sp..][..sp];
            for ci in 0..cin {
                let xc = &x[(b * cin + ci) * sp..][..sp];
                let acc = &mut gwo[ci * 27..][..27];
                for oh in 0..h {
                    for ow in 0..wd {
                        let grow = &gyo[(oh * wd + ow) * d..][..d];
                        for (kh, ih) in taps(oh, h) {
                            for (kw, iw) in taps(ow, wd) {
                                let irow = &xc[(ih * wd + iw) * d..][..d];
                                let s = dot3(grow, irow);
                                let t = (kh * 3 + kw) * 3;
                                acc[t] += s[0];
                                acc[t + 1] += s[1];
                                acc[t + 2] += s[2];
                            }
                        }
                    }
                }
            }
        }
    });
    gw
}

/// `w: [cout, cin]` applied at every voxel.
pub(crate) fn pointwise_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, dims: Dims) -> Vec<f64> {
    let Dims { cin, cout, .. } = dims;
    let sp = dims.sp();
    let mut out = vec![0.0; dims.batch * cout * sp];
    out.par_chunks_mut(cout * sp).enumerate().for_each(|(b, out_b)| {
        let beta = match bias {
            Some(bias) => {
                for (o, c) in out_b.chunks_mut(sp).enumerate() {
                    c.fill(bias[o]);
                }
                1.0
            }
            None => 0.0,
        };
        gemm(
            Mat::new(w, cout, cin),
            Mat::new(&x[b * cin * sp..][..cin * sp], cin, sp),
            beta,
            out_b,
        );
    });
    out
}

pub(crate) fn pointwise_input_grad(gy: &[f64], w: &[f64], dims: Dims) -> Vec<f64> {
    let Dims { cin, cout, .. } = dims;
    let sp = dims.sp();
    let mut gx = vec![0.0; dims.batch * cin * sp];
    gx.par_chunks_mut(cin * sp).enumerate().for_each(|(b, gx_b)| {
        gemm(
            Mat::t(w, cin, cout),
            Mat::new(&gy[b * cout * sp..][..cout * sp], cout, sp),
            0.0,
            gx_b,
        );
    });
    gx
}

pub(crate) fn pointwise_weight_grad(x: &[f64], gy: &[f64], dims: Dims) -> Vec<f64> {
    let Dims { cin, cout, .. } = dims;
    let sp = dims.sp();
    let mut gw = vec![0.0; cout * cin];
    for b in 0..dims.batch {
        gemm(
            Mat::new(&gy[b * cout * sp..][..cout * sp], cout, sp),
            Mat::t(&x[b * cin * sp..][..cin * sp], sp, cin),
            1.0,
            &mut gw,
        );
    }
    gw
}
