//! Trilinear sampling, half-pixel upsampling and 2x max pooling.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Interpolation support along one axis under border clamping.
///
/// Returns `(i0, i1, frac, slope)` where the sample is
/// `(1 - frac) * v[i0] + frac * v[i1]` and `slope` is `d frac / d coord`
/// (zero where the clamp is active).
#[inline]
pub(crate) fn axis_support(coord: f64, size: usize) -> (usize, usize, f64, f64) {
    if size == 1 {
        return (0, 0, 0.0, 0.0);
    }
    let hi = (size - 1) as f64;
    let inside = (0.0..=hi).contains(&coord);
    let c = coord.clamp(0.0, hi);
    let i0 = (c.floor() as usize).min(size - 2);
    let frac = c - i0 as f64;
    (i0, i0 + 1, frac, if inside { 1.0 } else { 0.0 })
}

struct Corners {
    idx: [usize; 8],
    w: [f64; 8],
    // d w / d coord for each of the three axes
    dw: [[f64; 8]; 3],
}

#[inline]
fn corners(p: [f64; 3], dims: [usize; 3]) -> Corners {
    let (h0, h1, fh, sh) = axis_support(p[0], dims[0]);
    let (w0, w1, fw, sw) = axis_support(p[1], dims[1]);
    let (d0, d1, fd, sd) = axis_support(p[2], dims[2]);
    let hs = [(h0, 1.0 - fh, -sh), (h1, fh, sh)];
    let ws = [(w0, 1.0 - fw, -sw), (w1, fw, sw)];
    let ds = [(d0, 1.0 - fd, -sd), (d1, fd, sd)];
    let mut c = Corners {
        idx: [0; 8],
        w: [0.0; 8],
        dw: [[0.0; 8]; 3],
    };
    let mut k = 0;
    for &(hi, hw, hdw) in &hs {
        for &(wi, ww, wdw) in &ws {
            for &(di, dwt, ddw) in &ds {
                c.idx[k] = (hi * dims[1] + wi) * dims[2] + di;
                c.w[k] = hw * ww * dwt;
                c.dw[0][k] = hdw * ww * dwt;
                c.dw[1][k] = hw * wdw * dwt;
                c.dw[2][k] = hw * ww * ddw;
                k += 1;
            }
        }
    }
    c
}

fn check_sample_shapes(x: &[usize], coords: &[usize]) -> Result<()> {
    if x.len() != 5 {
        return Err(shape_err("grid_sample_trilinear", "input rank", format!("{x:?}")));
    }
    if coords.len() != 3 || coords[2] != 3 {
        return Err(shape_err(
            "grid_sample_trilinear",
            "coords",
            format!("expected [B,M,3], got {coords:?}"),
        ));
    }
    if coords[0] != x[0] {
        return Err(shape_err(
            "grid_sample_trilinear",
            "B",
            format!("input {} vs coords {}", x[0], coords[0]),
        ));
    }
    Ok(())
}

/// Samples `x: [B,C,H,W,D]` at fractional voxel coordinates `coords: [B,M,3]`.
pub fn grid_sample_forward(x: &Tensor, coords: &Tensor) -> Result<Tensor> {
    check_sample_shapes(x.shape(), coords.shape())?;
    let s = x.shape();
    let (b_n, c_n, dims) = (s[0], s[1], [s[2], s[3], s[4]]);
    let m_n = coords.shape()[1];
    let sp: usize = dims.iter().product();
    let mut out = vec![0.0; b_n * c_n * m_n];
    for b in 0..b_n {
        let cb = &coords.data()[b * m_n * 3..][..m_n * 3];
        for m in 0..m_n {
            let p = [cb[3 * m], cb[3 * m + 1], cb[3 * m + 2]];
            let cr = corners(p, dims);
            for c in 0..c_n {
                let xc = &x.data()[(b * c_n + c) * sp..][..sp];
                let mut v = 0.0;
                for k in 0..8 {
                    v += cr.w[k] * xc[cr.idx[k]];
                }
                out[(b * c_n + c) * m_n + m] = v;
            }
        }
    }
    Tensor::new(vec![b_n, c_n, m_n], out)
}

pub fn grid_sample_backward(
    x: &Tensor,
    coords: &Tensor,
    gy: &Tensor,
    need: [bool; 2],
) -> (Option<Tensor>, Option<Tensor>) {
    let s = x.shape();
    let (b_n, c_n, dims) = (s[0], s[1], [s[2], s[3], s[4]]);
    let m_n = coords.shape()[1];
    let sp: usize = dims.iter().product();
    let mut gx = need[0].then(|| vec![0.0; x.len()]);
    let mut gc = need[1].then(|| vec![0.0; coords.len()]);
    for b in 0..b_n {
        let cb = &coords.data()[b * m_n * 3..][..m_n * 3];
        for m in 0..m_n {
            let p = [cb[3 * m], cb[3 * m + 1], cb[3 * m + 2]];
            let cr = corners(p, dims);
            let mut dp = [0.0; 3];
            for c in 0..c_n {
                let g = gy.data()[(b * c_n + c) * m_n + m];
                if g == 0.0 {
                    continue;
                }
                if let Some(gx) = gx.as_mut() {
                    let gxc = &mut gx[(b * c_n + c) * sp..][..sp];
                    for k in 0..8 {
                        gxc[cr.idx[k]] += g * cr.w[k];
                    }
                }
                if gc.is_some() {
                    let xc = &x.data()[(b * c_n + c) * sp..][..sp];
                    for (a, dpa) in dp.iter_mut().enumerate() {
                        let mut v = 0.0;
                        for k in 0..8 {
                            v += cr.dw[a][k] * xc[cr.idx[k]];
                        }
                        *dpa += g * v;
                    }
                }
            }
            if let Some(gc) = gc.as_mut() {
                gc[(b * m_n + m) * 3..][..3].copy_from_slice(&dp);
            }
        }
    }
    (
        gx.map(|v| Tensor::new(x.shape().to_vec(), v).expect("shape")),
        gc.map(|v| Tensor::new(coords.shape().to_vec(), v).expect("shape")),
    )
}

/// Splits a shape into (outer, axis extent, inner) around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Source taps for output index `o` of a 2x half-pixel upsample along an axis of length `n`.
///
/// Source coordinate is `(o + 0.5) / 2 - 0.5`, clamped to the valid range.
#[inline]
fn upsample_taps(o: usize, n: usize) -> [(usize, f64); 2] {
    let i = o / 2;
    let nb = if o.is_multiple_of(2) {
        i.saturating_sub(1)
    } else {
        (i + 1).min(n - 1)
    };
    let near_w = if nb == i { 1.0 } else { 0.75 };
    [(i, near_w), (nb, 1.0 - near_w)]
}

fn upsample_axis(data: &[f64], shape: &[usize], axis: usize) -> (Vec<f64>, Vec<usize>) {
    let (outer, n, inner) = split_at_axis(shape, axis);
    let mut out = vec![0.0; outer * 2 * n * inner];
    for o in 0..outer {
        let src = &data[o * n * inner..][..n * inner];
        let dst = &mut out[o * 2 * n * inner..][..2 * n * inner];
        for j in 0..2 * n {
            let [(a, wa), (b, wb)] = upsample_taps(j, n);
            let row = &mut dst[j * inner..][..inner];
            for (k, r) in row.iter_mut().enumerate() {
                *r = wa * src[a * inner + k] + wb * src[b * inner + k];
            }
        }
    }
    let mut s = shape.to_vec();
    s[axis] *= 2;
    (out, s)
}

fn upsample_axis_adjoint(grad: &[f64], out_shape: &[usize], axis: usize) -> (Vec<f64>, Vec<usize>) {
    let (outer, n2, inner) = split_at_axis(out_shape, axis);
    let n = n2 / 2;
    let mut gin = vec![0.0; outer * n * inner];
    for o in 0..outer {
        let g = &grad[o * n2 * inner..][..n2 * inner];
        let dst = &mut gin[o * n * inner..][..n * inner];
        for j in 0..n2 {
            let [(a, wa), (b, wb)] = upsample_taps(j, n);
            for k in 0..inner {
                let v = g[j * inner + k];
                dst[a * inner + k] += wa * v;
                dst[b * inner + k] += wb * v;
            }
        }
    }
    let mut s = out_shape.to_vec();
    s[axis] = n;
    (gin, s)
}

/// 2x trilinear upsampling of the three trailing axes of `[B,C,H,W,D]`.
pub fn upsample_forward(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 5 {
        return Err(shape_err("upsample_trilinear", "rank", format!("{:?}", x.shape())));
    }
    let (mut data, mut shape) = (x.data().to_vec(), x.shape().to_vec());
    for axis in 2..5 {
        (data, shape) = upsample_axis(&data, &shape, axis);
    }
    Tensor::new(shape, data)
}

pub fn upsample_backward(gy: &Tensor) -> Tensor {
    let (mut data, mut shape) = (gy.data().to_vec(), gy.shape().to_vec());
    for axis in (2..5).rev() {
        (data, shape) = upsample_axis_adjoint(&data, &shape, axis);
    }
    Tensor::new(shape, data).expect("shape")
}

/// 2x2x2 stride-2 max pooling. Returns the output and, for each output
/// element, the flat input index of the (first) maximum.
pub fn max_pool2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(shape_err("pool_max3d", "rank", format!("{s:?}")));
    }
    for (a, name) in ["H", "W", "D"].iter().enumerate() {
        if !s[2 + a].is_multiple_of(2) {
            return Err(shape_err("pool_max3d", *name, format!("odd extent {}", s[2 + a])));
        }
    }
    let (h, w, d) = (s[2], s[3], s[4]);
    let (ho, wo, dout) = (h / 2, w / 2, d / 2);
    let planes = s[0] * s[1];
    let mut out = Vec::with_capacity(planes * ho * wo * dout);
    let mut arg = Vec::with_capacity(out.capacity());
    for p in 0..planes {
        let base = p * h * w * d;
        for i in 0..ho {
            for j in 0..wo {
                for k in 0..dout {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for a in 0..2 {
                        for b in 0..2 {
                            for c in 0..2 {
                                let idx = base + ((2 * i + a) * w + 2 * j + b) * d + 2 * k + c;
                                if x.data()[idx] > best {
                                    best = x.data()[idx];
                                    best_i = idx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    Ok((Tensor::new(vec![s[0], s[1], ho, wo, dout], out)?, arg))
}
