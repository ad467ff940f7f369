//! Axis-specific snake convolutions and their four-branch fusion (MDSConv).
//!
//! A snake kernel is a 1D stencil of `2 * half_length + 1` taps laid along one
//! axis. Its on-axis coordinates stay on the regular grid; the two off-axis
//! coordinates drift by per-step offsets accumulated outward from the centre
//! tap, so neighbouring taps never move more than `offset_scale` apart
//! off-axis. Samples at the resulting fractional positions are taken with
//! border-clamped trilinear interpolation.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Conv3dOptions, Graph, Norm, OffsetLayout, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{init, Bound, ParamStore};
use crate::tensor::Tensor;

/// Kernel axis; X, Y, Z map to tensor axes H, W, D.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        self as usize
    }

    /// The two deformed axes, in increasing order.
    pub fn off_axes(self) -> [usize; 2] {
        match self {
            Axis::X => [1, 2],
            Axis::Y => [0, 2],
            Axis::Z => [0, 1],
        }
    }

    fn name(self) -> &'static str {
        ["x", "y", "z"][self.index()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnakeKernelSpec {
    pub axis: Axis,
    pub half_length: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub offset_scale: f64,
}

impl SnakeKernelSpec {
    pub fn new(axis: Axis, half_length: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            axis,
            half_length,
            in_channels,
            out_channels,
            offset_scale: 1.0,
        }
    }

    pub fn taps(&self) -> usize {
        2 * self.half_length + 1
    }

    /// Channels of the raw offset field: one per tap for each off-axis component.
    pub fn offset_channels(&self) -> usize {
        2 * self.taps()
    }

    fn validate(&self) -> Result<()> {
        if !(self.offset_scale > 0.0) {
            return Err(Error::Config(format!(
                "offset_scale must be positive, got {}",
                self.offset_scale
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("snake kernel needs positive channel counts".into()));
        }
        Ok(())
    }

    fn layout(&self) -> OffsetLayout {
        OffsetLayout {
            axis: self.axis.index(),
            half: self.half_length,
        }
    }
}

/// Raw per-step offsets `[B, 2 * taps, H, W, D]`: channels `0..taps` hold the
/// first off-axis component, `taps..2*taps` the second.
#[derive(Clone, Copy, Debug)]
pub struct SnakeKernelOffsets {
    pub raw: Var,
    pub spec: SnakeKernelSpec,
}

/// `scale * tanh(conv3x3x3(features))`.
pub fn predict_offsets(
    g: &mut Graph,
    features: Var,
    spec: SnakeKernelSpec,
    weight: Var,
    bias: Option<Var>,
) -> Result<SnakeKernelOffsets> {
    spec.validate()?;
    let conv = g.conv3d(features, weight, bias, Conv3dOptions::padded(1))?;
    if g.shape(conv)[1] != spec.offset_channels() {
        return Err(shape_err(
            "predict_offsets",
            "C",
            format!(
                "predictor emits {} channels, kernel needs {}",
                g.shape(conv)[1],
                spec.offset_channels()
            ),
        ));
    }
    let t = g.tanh(conv);
    let raw = g.mul_scalar(t, spec.offset_scale);
    Ok(SnakeKernelOffsets { raw, spec })
}

fn cumulate_values(raw: &Tensor, layout: OffsetLayout) -> Result<Tensor> {
    let s = raw.shape();
    let taps = 2 * layout.half + 1;
    if s.len() != 5 || s[1] != 2 * taps {
        return Err(shape_err(
            "cumulate_offsets",
            "C",
            format!("expected [B,{},H,W,D], got {s:?}", 2 * taps),
        ));
    }
    let (b_n, dims) = (s[0], [s[2], s[3], s[4]]);
    let sp: usize = dims.iter().product();
    let off = match layout.axis {
        0 => [1, 2],
        1 => [0, 2],
        _ => [0, 1],
    };
    let c = layout.half;
    let mut out = vec![0.0; b_n * taps * 3 * sp];
    let mut disp = vec![0.0; taps];
    for b in 0..b_n {
        for v in 0..sp {
            let grid = [v / (dims[1] * dims[2]), (v / dims[2]) % dims[1], v % dims[2]];
            // on-axis component
            for t in 0..taps {
                let o = ((b * taps + t) * 3 + layout.axis) * sp + v;
                out[o] = grid[layout.axis] as f64 + t as f64 - c as f64;
            }
            for (j, &a) in off.iter().enumerate() {
                let step = |t: usize| raw.data()[((b * 2 * taps) + j * taps + t) * sp + v];
                disp[c] = 0.0;
                for t in c + 1..taps {
                    disp[t] = disp[t - 1] + step(t);
                }
                for t in (0..c).rev() {
                    disp[t] = disp[t + 1] - step(t);
                }
                for t in 0..taps {
                    out[((b * taps + t) * 3 + a) * sp + v] = grid[a] as f64 + disp[t];
                }
            }
        }
    }
    Tensor::new(vec![b_n, taps, 3, dims[0], dims[1], dims[2]], out)
}

pub(crate) fn cumulate_offsets_backward(raw_shape: &[usize], g: &Tensor, layout: OffsetLayout) -> Tensor {
    let taps = 2 * layout.half + 1;
    let b_n = raw_shape[0];
    let sp: usize = raw_shape[2..].iter().product();
    let off = match layout.axis {
        0 => [1, 2],
        1 => [0, 2],
        _ => [0, 1],
    };
    let c = layout.half;
    let mut graw = vec![0.0; raw_shape.iter().product()];
    for b in 0..b_n {
        for v in 0..sp {
            for (j, &a) in off.iter().enumerate() {
                let gc = |t: usize| g.data()[((b * taps + t) * 3 + a) * sp + v];
                let mut acc = 0.0;
                for s in (c + 1..taps).rev() {
                    acc += gc(s);
                    graw[((b * 2 * taps) + j * taps + s) * sp + v] = acc;
                }
                acc = 0.0;
                for s in 0..c {
                    acc += gc(s);
                    graw[((b * 2 * taps) + j * taps + s) * sp + v] = -acc;
                }
            }
        }
    }
    Tensor::new(raw_shape.to_vec(), graw).expect("shape")
}

/// Deformed tap coordinates `[B, taps, 3, H, W, D]` (voxel units, axis order H, W, D).
pub fn cumulate_offsets(g: &mut Graph, offsets: &SnakeKernelOffsets) -> Result<Var> {
    let layout = offsets.spec.layout();
    let value = cumulate_values(g.value(offsets.raw), layout)?;
    Ok(g.cumulate_offsets_op(offsets.raw, value, layout))
}

/// Samples `features` at the deformed taps and contracts with `weight: [Cout, Cin, taps]`.
pub fn snake_conv_axis(
    g: &mut Graph,
    features: Var,
    spec: SnakeKernelSpec,
    weight: Var,
    bias: Option<Var>,
    coords: Var,
) -> Result<Var> {
    let fs = g.shape(features).to_vec();
    let cs = g.shape(coords).to_vec();
    let taps = spec.taps();
    if fs.len() != 5 || fs[1] != spec.in_channels {
        return Err(shape_err(
            "snake_conv_axis",
            "Cin",
            format!("features {fs:?}, spec {}", spec.in_channels),
        ));
    }
    if cs != [fs[0], taps, 3, fs[2], fs[3], fs[4]] {
        return Err(shape_err(
            "snake_conv_axis",
            "coords",
            format!("{cs:?} for features {fs:?}"),
        ));
    }
    if g.shape(weight) != [spec.out_channels, spec.in_channels, taps] {
        return Err(shape_err("snake_conv_axis", "weight", format!("{:?}", g.shape(weight))));
    }
    let sp = fs[2] * fs[3] * fs[4];
    let pts = g.permute(coords, &[0, 1, 3, 4, 5, 2])?;
    let pts = g.reshape(pts, [fs[0], taps * sp, 3])?;
    let sampled = g.grid_sample_trilinear(features, pts)?;
    let sampled = g.reshape(sampled, [fs[0], spec.in_channels * taps, fs[2], fs[3], fs[4]])?;
    let w = g.reshape(weight, [spec.out_channels, spec.in_channels * taps, 1, 1, 1])?;
    g.conv3d(sampled, w, bias, Conv3dOptions::default())
}

/// Group count used by every group norm: `min(8, C)`, which must divide `C`.
pub fn gn_groups(channels: usize) -> Result<usize> {
    let groups = channels.min(8);
    if groups == 0 || !channels.is_multiple_of(groups) {
        return Err(Error::Config(format!(
            "{channels} channels not divisible by {groups} norm groups"
        )));
    }
    Ok(groups)
}

/// Standard 3x3x3 branch, three snake branches, 1x1x1 fusion, GN, ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct MdsConvBlock {
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub half_length: usize,
    pub offset_scale: f64,
}

impl MdsConvBlock {
    pub fn new(prefix: impl Into<String>, in_channels: usize, out_channels: usize, half_length: usize) -> Self {
        Self {
            prefix: prefix.into(),
            in_channels,
            out_channels,
            half_length,
            offset_scale: 1.0,
        }
    }

    pub fn spec(&self, axis: Axis) -> SnakeKernelSpec {
        SnakeKernelSpec {
            offset_scale: self.offset_scale,
            ..SnakeKernelSpec::new(axis, self.half_length, self.in_channels, self.out_channels)
        }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        gn_groups(self.out_channels)?;
        let (ci, co) = (self.in_channels, self.out_channels);
        let taps = 2 * self.half_length + 1;
        store.insert(
            self.name("std.weight"),
            init::he_uniform(&[co, ci, 3, 3, 3], ci * 27, rng),
        )?;
        store.insert(self.name("std.bias"), Tensor::zeros([co]))?;
        for axis in Axis::ALL {
            let a = axis.name();
            store.insert(
                self.name(&format!("offset_{a}.weight")),
                Tensor::zeros([2 * taps, ci, 3, 3, 3]),
            )?;
            store.insert(self.name(&format!("offset_{a}.bias")), Tensor::zeros([2 * taps]))?;
            store.insert(
                self.name(&format!("snake_{a}.weight")),
                init::he_uniform(&[co, ci, taps], ci * taps, rng),
            )?;
            store.insert(self.name(&format!("snake_{a}.bias")), Tensor::zeros([co]))?;
        }
        store.insert(
            self.name("fuse.weight"),
            init::he_uniform(&[co, 4 * co, 1, 1, 1], 4 * co, rng),
        )?;
        store.insert(self.name("fuse.bias"), Tensor::zeros([co]))?;
        store.insert(self.name("gn.gain"), Tensor::ones([co]))?;
        store.insert(self.name("gn.bias"), Tensor::zeros([co]))?;
        Ok(())
    }

    pub fn forward(&self, ctx: &mut Bound, x: Var) -> Result<Var> {
        let groups = gn_groups(self.out_channels)?;
        let (w, b) = (ctx.param(&self.name("std.weight"))?, ctx.param(&self.name("std.bias"))?);
        let mut branches = vec![ctx.graph.conv3d(x, w, Some(b), Conv3dOptions::padded(1))?];
        for axis in Axis::ALL {
            let a = axis.name();
            let spec = self.spec(axis);
            let pw = ctx.param(&self.name(&format!("offset_{a}.weight")))?;
            let pb = ctx.param(&self.name(&format!("offset_{a}.bias")))?;
            let sw = ctx.param(&self.name(&format!("snake_{a}.weight")))?;
            let sb = ctx.param(&self.name(&format!("snake_{a}.bias")))?;
            let offsets = predict_offsets(&mut ctx.graph, x, spec, pw, Some(pb))?;
            let coords = cumulate_offsets(&mut ctx.graph, &offsets)?;
            branches.push(snake_conv_axis(&mut ctx.graph, x, spec, sw, Some(sb), coords)?);
        }
        let cat = ctx.graph.concat(&branches, 1)?;
        let (fw, fb) = (
            ctx.param(&self.name("fuse.weight"))?,
            ctx.param(&self.name("fuse.bias"))?,
        );
        let fused = ctx.graph.conv3d(cat, fw, Some(fb), Conv3dOptions::default())?;
        let (gg, gb) = (ctx.param(&self.name("gn.gain"))?, ctx.param(&self.name("gn.bias"))?);
        let normed = ctx.graph.normalize(fused, Norm::Group(groups), gg, gb)?;
        Ok(ctx.graph.relu(normed))
    }
}

/// Applies `mdsconv_forward` on an already-bound context.
pub fn mdsconv_forward(ctx: &mut Bound, features: Var, block: &MdsConvBlock) -> Result<Var> {
    block.forward(ctx, features)
}

#[cfg(test)]
mod tests;
