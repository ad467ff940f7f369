//! Direct 3D convolution kernels.
//!
//! Loops are arranged so the innermost work is an axpy or dot product over a
//! contiguous `D` row, which the compiler vectorises. Work is split across
//! output channels (forward, weight gradient) or input channels (input
//! gradient); every output element is produced by exactly one task in a fixed
//! summation order, so results do not depend on the thread count.

use rayon::prelude::*;

use super::conv_fast::{self, Dims};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dOptions {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub dilation: [usize; 3],
    pub groups: usize,
}

impl Default for Conv3dOptions {
    fn default() -> Self {
        Self {
            stride: [1; 3],
            padding: [0; 3],
            dilation: [1; 3],
            groups: 1,
        }
    }
}

impl Conv3dOptions {
    /// Unit stride with symmetric padding `p` on every axis.
    pub fn padded(p: usize) -> Self {
        Self {
            padding: [p; 3],
            ..Self::default()
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    batch: usize,
    cin: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
    opts: Conv3dOptions,
}

impl Geometry {
    fn in_len(&self) -> usize {
        self.input.iter().product()
    }
    fn out_len(&self) -> usize {
        self.output.iter().product()
    }
    fn k_len(&self) -> usize {
        self.kernel.iter().product()
    }

    pub(crate) fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.output[0], self.output[1], self.output[2]]
    }

    /// Input index along `axis` touched by output `o` and tap `k`, if in range.
    #[inline]
    fn src(&self, axis: usize, o: usize, k: usize) -> Option<usize> {
        let i = (o * self.opts.stride[axis] + k * self.opts.dilation[axis]) as isize - self.opts.padding[axis] as isize;
        (i >= 0 && (i as usize) < self.input[axis]).then_some(i as usize)
    }

    /// Range of output `d` indices whose source index along D is in bounds for tap `kd`.
    #[inline]
    fn d_range(&self, kd: usize) -> (usize, usize, usize) {
        let s = self.opts.stride[2] as isize;
        let off = (kd * self.opts.dilation[2]) as isize - self.opts.padding[2] as isize;
        let n_in = self.input[2] as isize;
        // need 0 <= od*s + off < n_in
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = if n_in - off <= 0 { 0 } else { (n_in - off + s - 1) / s };
        let hi = hi.min(self.output[2] as isize);
        let lo = lo.min(hi);
        (lo as usize, hi as usize, (lo * s + off) as usize)
    }
}

pub(crate) fn geometry(x: &[usize], w: &[usize], bias: Option<&[usize]>, opts: Conv3dOptions) -> Result<Geometry> {
    if x.len() != 5 {
        return Err(shape_err("conv3d", "input rank", format!("expected 5, got {x:?}")));
    }
    if w.len() != 5 {
        return Err(shape_err("conv3d", "weight rank", format!("expected 5, got {w:?}")));
    }
    let g = opts.groups;
    if g == 0 || opts.stride.contains(&0) || opts.dilation.contains(&0) {
        return Err(Error::Config(
            "conv3d: groups, stride and dilation must be positive".into(),
        ));
    }
    let (cin, cout) = (x[1], w[0]);
    if cin % g != 0 || cout % g != 0 {
        return Err(shape_err(
            "conv3d",
            "channels",
            format!("Cin={cin}, Cout={cout} not divisible by groups={g}"),
        ));
    }
    if w[1] != cin / g {
        return Err(shape_err(
            "conv3d",
            "channels",
            format!(
                "weight expects {} input channels per group, input has {}",
                w[1],
                cin / g
            ),
        ));
    }
    if let Some(b) = bias {
        if b != [cout] {
            return Err(shape_err("conv3d", "bias", format!("expected [{cout}], got {b:?}")));
        }
    }
    let mut output = [0; 3];
    for a in 0..3 {
        let span = opts.dilation[a] * (w[2 + a] - 1) + 1;
        let padded = x[2 + a] + 2 * opts.padding[a];
        if padded < span {
            return Err(shape_err(
                "conv3d",
                ["H", "W", "D"][a],
                format!("padded extent {padded} smaller than kernel span {span}"),
            ));
        }
        output[a] = (padded - span) / opts.stride[a] + 1;
    }
    Ok(Geometry {
        batch: x[0],
        cin,
        cout,
        cin_g: cin / g,
        cout_g: cout / g,
        input: [x[2], x[3], x[4]],
        kernel: [w[2], w[3], w[4]],
        output,
        opts,
    })
}

#[inline]
fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    // four accumulators so the reduction vectorises
    let mut acc = [0.0f64; 4];
    let n = x.len().min(y.len());
    let chunks = n / 4;
    for i in 0..chunks {
        for j in 0..4 {
            acc[j] += x[4 * i + j] * y[4 * i + j];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..n {
        s += x[i] * y[i];
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Fast {
    Same3,
    Pointwise,
}

impl Geometry {
    fn fast(&self) -> Option<Fast> {
        let o = self.opts;
        if o.groups != 1 || o.stride != [1; 3] || o.dilation != [1; 3] {
            return None;
        }
        match (self.kernel, o.padding) {
            ([3, 3, 3], [1, 1, 1]) => Some(Fast::Same3),
            ([1, 1, 1], [0, 0, 0]) => Some(Fast::Pointwise),
            _ => None,
        }
    }

    fn dims(&self) -> Dims {
        Dims {
            batch: self.batch,
            cin: self.cin,
            cout: self.cout,
            spatial: self.input,
        }
    }
}

pub fn conv3d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, opts: Conv3dOptions) -> Result<Tensor> {
    let geo = geometry(x.shape(), w.shape(), bias.map(|b| b.shape()), opts)?;
    let b = bias.map(|b| b.data());
    let out = match geo.fast() {
        Some(Fast::Same3) => conv_fast::same3_forward(x.data(), w.data(), b, geo.dims()),
        Some(Fast::Pointwise) => conv_fast::pointwise_forward(x.data(), w.data(), b, geo.dims()),
        None => return generic_forward(x, w, bias, geo),
    };
    Tensor::new(geo.output_shape(), out)
}

/// Loop-nest reference used for every configuration without a fast path.
pub fn conv3d_forward_generic(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, opts: Conv3dOptions) -> Result<Tensor> {
    let geo = geometry(x.shape(), w.shape(), bias.map(|b| b.shape()), opts)?;
    generic_forward(x, w, bias, geo)
}

fn generic_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, geo: Geometry) -> Result<Tensor> {
    let (isp, osp, ksz) = (geo.in_len(), geo.out_len(), geo.k_len());
    let [_, wi, di] = geo.input;
    let [ho, wo, dout] = geo.output;
    let [kh_n, kw_n, kd_n] = geo.kernel;
    let sd = geo.opts.stride[2];
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0.0; geo.batch * geo.cout * osp];
    out.par_chunks_mut(osp).enumerate().for_each(|(bc, out_c)| {
        let (b, o) = (bc / geo.cout, bc % geo.cout);
        if let Some(bias) = bias {
            out_c.fill(bias.data()[o]);
        }
        let grp = o / geo.cout_g;
        for cil in 0..geo.cin_g {
            let ci = grp * geo.cin_g + cil;
            let xc = &xd[(b * geo.cin + ci) * isp..][..isp];
            let wk = &wd[(o * geo.cin_g + cil) * ksz..][..ksz];
            for oh in 0..ho {
                for ow in 0..wo {
                    let orow = &mut out_c[(oh * wo + ow) * dout..][..dout];
                    for kh in 0..kh_n {
                        let Some(ih) = geo.src(0, oh, kh) else { continue };
                        for kw in 0..kw_n {
                            let Some(iw) = geo.src(1, ow, kw) else { continue };
                            let irow = &xc[(ih * wi + iw) * di..][..di];
                            for kd in 0..kd_n {
                                let wv = wk[(kh * kw_n + kw) * kd_n + kd];
                                let (lo, hi, first) = geo.d_range(kd);
                                if hi <= lo {
                                    continue;
                                }
                                if sd == 1 {
                                    axpy(&mut orow[lo..hi], &irow[first..first + hi - lo], wv);
                                } else {
                                    for (j, od) in (lo..hi).enumerate() {
                                        orow[od] += wv * irow[first + j * sd];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(geo.output_shape(), out)
}

/// Gradients of a convolution. Each requested gradient is `Some`.
pub fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    opts: Conv3dOptions,
    need: [bool; 3],
) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
    let geo = geometry(x.shape(), w.shape(), None, opts)?;
    if gy.shape() != geo.output_shape().as_slice() {
        return Err(shape_err("conv3d backward", "grad", format!("{:?}", gy.shape())));
    }
    let Some(fast) = geo.fast() else {
        return generic_backward(x, w, gy, geo, need);
    };
    let dims = geo.dims();
    let (xd, wd, gd) = (x.data(), w.data(), gy.data());
    let gx = need[0].then(|| match fast {
        Fast::Same3 => conv_fast::same3_input_grad(gd, wd, dims),
        Fast::Pointwise => conv_fast::pointwise_input_grad(gd, wd, dims),
    });
    let gw = need[1].then(|| match fast {
        Fast::Same3 => conv_fast::same3_weight_grad(xd, gd, dims),
        Fast::Pointwise => conv_fast::pointwise_weight_grad(xd, gd, dims),
    });
    let gx = gx.map(|v| Tensor::new(x.shape().to_vec(), v)).transpose()?;
    let gw = gw.map(|v| Tensor::new(w.shape().to_vec(), v)).transpose()?;
    let gb = need[2].then(|| bias_grad(gy, &geo)).transpose()?;
    Ok((gx, gw, gb))
}

pub fn conv3d_backward_generic(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    opts: Conv3dOptions,
    need: [bool; 3],
) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
    let geo = geometry(x.shape(), w.shape(), None, opts)?;
    if gy.shape() != geo.output_shape().as_slice() {
        return Err(shape_err("conv3d backward", "grad", format!("{:?}", gy.shape())));
    }
    generic_backward(x, w, gy, geo, need)
}

fn generic_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    geo: Geometry,
    need: [bool; 3],
) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
    let (isp, osp, ksz) = (geo.in_len(), geo.out_len(), geo.k_len());
    let [_, wi, di] = geo.input;
    let [ho, wo, dout] = geo.output;
    let [kh_n, kw_n, kd_n] = geo.kernel;
    let sd = geo.opts.stride[2];
    let (xd, wd, gd) = (x.data(), w.data(), gy.data());

    let gx = need[0].then(|| {
        let mut gx = vec![0.0; geo.batch * geo.cin * isp];
        gx.par_chunks_mut(isp).enumerate().for_each(|(bc, gxc)| {
            let (b, ci) = (bc / geo.cin, bc % geo.cin);
            let grp = ci / geo.cin_g;
            let cil = ci % geo.cin_g;
            for ol in 0..geo.cout_g {
                let o = grp * geo.cout_g + ol;
                let gyc = &gd[(b * geo.cout + o) * osp..][..osp];
                let wk = &wd[(o * geo.cin_g + cil) * ksz..][..ksz];
                for oh in 0..ho {
                    for ow in 0..wo {
                        let grow = &gyc[(oh * wo + ow) * dout..][..dout];
                        for kh in 0..kh_n {
                            let Some(ih) = geo.src(0, oh, kh) else { continue };
                            for kw in 0..kw_n {
                                let Some(iw) = geo.src(1, ow, kw) else { continue };
                                let xrow = &mut gxc[(ih * wi + iw) * di..][..di];
                                for kd in 0..kd_n {
                                    let wv = wk[(kh * kw_n + kw) * kd_n + kd];
                                    let (lo, hi, first) = geo.d_range(kd);
                                    if hi <= lo {
                                        continue;
                                    }
                                    if sd == 1 {
                                        axpy(&mut xrow[first..first + hi - lo], &grow[lo..hi], wv);
                                    } else {
                                        for (j, od) in (lo..hi).enumerate() {
                                            xrow[first + j * sd] += wv * grow[od];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        gx
    });

    let gw = need[1].then(|| {
        let mut gw = vec![0.0; w.len()];
        gw.par_chunks_mut(geo.cin_g * ksz).enumerate().for_each(|(o, gwo)| {
            let grp = o / geo.cout_g;
            for b in 0..geo.batch {
                let gyc = &gd[(b * geo.cout + o) * osp..][..osp];
                for cil in 0..geo.cin_g {
                    let ci = grp * geo.cin_g + cil;
                    let xc = &xd[(b * geo.cin + ci) * isp..][..isp];
                    let gwk = &mut gwo[cil * ksz..][..ksz];
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let grow = &gyc[(oh * wo + ow) * dout..][..dout];
                            for kh in 0..kh_n {
                                let Some(ih) = geo.src(0, oh, kh) else { continue };
                                for kw in 0..kw_n {
                                    let Some(iw) = geo.src(1, ow, kw) else { continue };
                                    let irow = &xc[(ih * wi + iw) * di..][..di];
                                    for kd in 0..kd_n {
                                        let (lo, hi, first) = geo.d_range(kd);
                                        if hi <= lo {
                                            continue;
                                        }
                                        let s = if sd == 1 {
                                            dot(&grow[lo..hi], &irow[first..first + hi - lo])
                                        } else {
                                            (lo..hi)
                                                .enumerate()
                                                .map(|(j, od)| grow[od] * irow[first + j * sd])
                                                .sum()
                                        };
                                        gwk[(kh * kw_n + kw) * kd_n + kd] += s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        gw
    });

    Ok((
        gx.map(|v| Tensor::new(x.shape().to_vec(), v)).transpose()?,
        gw.map(|v| Tensor::new(w.shape().to_vec(), v)).transpose()?,
        need[2].then(|| bias_grad(gy, &geo)).transpose()?,
    ))
}

fn bias_grad(gy: &Tensor, geo: &Geometry) -> Result<Tensor> {
    let osp = geo.out_len();
    let mut gb = vec![0.0; geo.cout];
    for b in 0..geo.batch {
        for (o, g) in gb.iter_mut().enumerate() {
            *g += gy.data()[(b * geo.cout + o) * osp..][..osp].iter().sum::<f64>();
        }
    }
    Tensor::new([geo.cout], gb)
}

/// Transposed convolution whose kernel equals its stride (non-overlapping
/// scatter). Weight layout is `[Cin, Cout, k, k, k]`.
pub fn conv_transpose3d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 5 || ws.len() != 5 || ws[0] != xs[1] {
        return Err(shape_err(
            "conv_transpose3d",
            "channels",
            format!("input {xs:?}, weight {ws:?}"),
        ));
    }
    let (b_n, cin, cout) = (xs[0], xs[1], ws[1]);
    let k = [ws[2], ws[3], ws[4]];
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(shape_err("conv_transpose3d", "bias", format!("{:?}", b.shape())));
        }
    }
    let ins = [xs[2], xs[3], xs[4]];
    let outs = [ins[0] * k[0], ins[1] * k[1], ins[2] * k[2]];
    let (isp, osp, ksz) = (
        ins.iter().product::<usize>(),
        outs.iter().product::<usize>(),
        k.iter().product::<usize>(),
    );
    let mut out = vec![0.0; b_n * cout * osp];
    out.par_chunks_mut(osp).enumerate().for_each(|(bc, oc)| {
        let (b, o) = (bc / cout, bc % cout);
        if let Some(bias) = bias {
            oc.fill(bias.data()[o]);
        }
        for ci in 0..cin {
            let xc = &x.data()[(b * cin + ci) * isp..][..isp];
            let wk = &w.data()[(ci * cout + o) * ksz..][..ksz];
            for (idx, &xv) in xc.iter().enumerate() {
                let (h, r) = (idx / (ins[1] * ins[2]), idx % (ins[1] * ins[2]));
                let (wv, d) = (r / ins[2], r % ins[2]);
                for a in 0..k[0] {
                    for bb in 0..k[1] {
                        for c in 0..k[2] {
                            let oi = ((h * k[0] + a) * outs[1] + wv * k[1] + bb) * outs[2] + d * k[2] + c;
                            oc[oi] += xv * wk[(a * k[1] + bb) * k[2] + c];
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![b_n, cout, outs[0], outs[1], outs[2]], out)
}

pub fn conv_transpose3d_backward(x: &Tensor, w: &Tensor, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (xs, ws) = (x.shape(), w.shape());
    let (b_n, cin, cout) = (xs[0], xs[1], ws[1]);
    let k = [ws[2], ws[3], ws[4]];
    let ins = [xs[2], xs[3], xs[4]];
    let outs = [ins[0] * k[0], ins[1] * k[1], ins[2] * k[2]];
    let (isp, osp, ksz) = (
        ins.iter().product::<usize>(),
        outs.iter().product::<usize>(),
        k.iter().product::<usize>(),
    );
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; cout];
    let out_index = |idx: usize, a: usize, bb: usize, c: usize| {
        let (h, r) = (idx / (ins[1] * ins[2]), idx % (ins[1] * ins[2]));
        let (wv, d) = (r / ins[2], r % ins[2]);
        ((h * k[0] + a) * outs[1] + wv * k[1] + bb) * outs[2] + d * k[2] + c
    };
    for b in 0..b_n {
        for o in 0..cout {
            let gc = &gy.data()[(b * cout + o) * osp..][..osp];
            gb[o] += gc.iter().sum::<f64>();
            for ci in 0..cin {
                let xc = &x.data()[(b * cin + ci) * isp..][..isp];
                let wbase = (ci * cout + o) * ksz;
                for idx in 0..isp {
                    let mut acc = 0.0;
                    for a in 0..k[0] {
                        for bb in 0..k[1] {
                            for c in 0..k[2] {
                                let kk = (a * k[1] + bb) * k[2] + c;
                                let g = gc[out_index(idx, a, bb, c)];
                                acc += g * w.data()[wbase + kk];
                                gw[wbase + kk] += g * xc[idx];
                            }
                        }
                    }
                    gx[(b * cin + ci) * isp + idx] += acc;
                }
            }
        }
    }
    (
        Tensor::new(xs.to_vec(), gx).expect("shape"),
        Tensor::new(ws.to_vec(), gw).expect("shape"),
        Tensor::new([cout], gb).expect("shape"),
    )
}
