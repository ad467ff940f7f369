//! Group and layer normalisation kernels.
//!
//! Both reduce over contiguous "segments": for group norm a segment is one
//! (sample, group) slab of `C/G * spatial` values; for layer norm it is one
//! row of the trailing axis. Affine gain/bias are indexed by channel.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// Segment geometry: `segments` contiguous blocks, each made of `chans`
/// channel runs of length `run`; channel of run `r` in segment `s` is
/// `channel_of(s, r)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct NormLayout {
    pub segments: usize,
    pub seg_len: usize,
    pub channels: usize,
    kind: Kind,
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    /// `[B, C, ...]`, `groups` groups, `spatial` trailing elements per channel.
    Group { groups: usize, spatial: usize },
    /// rows of length `C` on the last axis.
    Layer,
}

impl NormLayout {
    pub(crate) fn group(shape: &[usize], groups: usize) -> Result<Self> {
        if shape.len() < 2 {
            return Err(shape_err("group_norm", "rank", format!("{shape:?}")));
        }
        let c = shape[1];
        if groups == 0 || !c.is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        let spatial: usize = shape[2..].iter().product();
        Ok(Self {
            segments: shape[0] * groups,
            seg_len: c / groups * spatial,
            channels: c,
            kind: Kind::Group { groups, spatial },
        })
    }

    pub(crate) fn layer(shape: &[usize]) -> Result<Self> {
        let c = *shape
            .last()
            .ok_or_else(|| shape_err("layer_norm", "rank", "scalar input"))?;
        let n: usize = shape.iter().product();
        Ok(Self {
            segments: n / c,
            seg_len: c,
            channels: c,
            kind: Kind::Layer,
        })
    }

    #[inline]
    fn channel(&self, seg: usize, offset: usize) -> usize {
        match self.kind {
            Kind::Group { groups, spatial } => {
                let g = seg % groups;
                g * (self.channels / groups) + offset / spatial
            }
            Kind::Layer => offset,
        }
    }
}

pub(crate) struct NormSaved {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn check_affine(op: &'static str, layout: &NormLayout, gain: &Tensor, bias: &Tensor) -> Result<()> {
    for (name, t) in [("gain", gain), ("bias", bias)] {
        if t.shape() != [layout.channels] {
            return Err(shape_err(
                op,
                name,
                format!("expected [{}], got {:?}", layout.channels, t.shape()),
            ));
        }
    }
    Ok(())
}

pub(crate) fn norm_forward(x: &Tensor, gain: &Tensor, bias: &Tensor, layout: NormLayout) -> (Tensor, NormSaved) {
    let mut out = vec![0.0; x.len()];
    let mut saved = NormSaved {
        mean: Vec::with_capacity(layout.segments),
        rstd: Vec::with_capacity(layout.segments),
    };
    let n = layout.seg_len as f64;
    for s in 0..layout.segments {
        let seg = &x.data()[s * layout.seg_len..][..layout.seg_len];
        let mean = seg.iter().sum::<f64>() / n;
        let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / (var + NORM_EPS).sqrt();
        let o = &mut out[s * layout.seg_len..][..layout.seg_len];
        for (i, (ov, xv)) in o.iter_mut().zip(seg).enumerate() {
            let c = layout.channel(s, i);
            *ov = (xv - mean) * rstd * gain.data()[c] + bias.data()[c];
        }
        saved.mean.push(mean);
        saved.rstd.push(rstd);
    }
    (Tensor::new(x.shape().to_vec(), out).expect("shape"), saved)
}

pub(crate) fn norm_backward(
    x: &Tensor,
    gain: &Tensor,
    gy: &Tensor,
    layout: NormLayout,
    saved: &NormSaved,
) -> (Tensor, Tensor, Tensor) {
    let mut gx = vec![0.0; x.len()];
    let mut gg = vec![0.0; layout.channels];
    let mut gb = vec![0.0; layout.channels];
    let n = layout.seg_len as f64;
    let mut gxhat = vec![0.0; layout.seg_len];
    for s in 0..layout.segments {
        let seg = &x.data()[s * layout.seg_len..][..layout.seg_len];
        let gseg = &gy.data()[s * layout.seg_len..][..layout.seg_len];
        let (mean, rstd) = (saved.mean[s], saved.rstd[s]);
        let (mut m1, mut m2) = (0.0, 0.0);
        for i in 0..layout.seg_len {
            let c = layout.channel(s, i);
            let xhat = (seg[i] - mean) * rstd;
            gg[c] += gseg[i] * xhat;
            gb[c] += gseg[i];
            gxhat[i] = gseg[i] * gain.data()[c];
            m1 += gxhat[i];
            m2 += gxhat[i] * xhat;
        }
        m1 /= n;
        m2 /= n;
        let o = &mut gx[s * layout.seg_len..][..layout.seg_len];
        for i in 0..layout.seg_len {
            let xhat = (seg[i] - mean) * rstd;
            o[i] = rstd * (gxhat[i] - m1 - xhat * m2);
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx).expect("shape"),
        Tensor::new([layout.channels], gg).expect("shape"),
        Tensor::new([layout.channels], gb).expect("shape"),
    )
}
