//! Resizing between the full and coarse grids, using half-pixel centres:
//! destination voxel `i` maps to source coordinate `(i + 0.5) * S / T - 0.5`.

use crate::error::{shape_err, Result};
use crate::volume::{linear_index, LabelVolume, Volume};

fn check_target(target: [usize; 3]) -> Result<()> {
    if target.contains(&0) {
        return Err(shape_err("resample", "target", format!("zero extent in {target:?}")));
    }
    Ok(())
}

/// Per-axis `(i0, i1, frac)` lookup for linear interpolation.
fn linear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let x = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = x.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, x - i0 as f64)
        })
        .collect()
}

fn nearest_taps(src: usize, dst: usize) -> Vec<usize> {
    (0..dst)
        .map(|i| (((i as f64 + 0.5) * src as f64 / dst as f64).floor() as usize).min(src - 1))
        .collect()
}

/// Trilinear resize for intensities and probabilities.
pub fn resample_trilinear(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    check_target(target)?;
    let s = v.shape();
    if s == target {
        return Ok(v.clone());
    }
    let t: Vec<_> = (0..3).map(|a| linear_taps(s[a], target[a])).collect();
    let src = v.data();
    let at = |h, w, d| src[linear_index(s, h, w, d)] as f64;
    let data = Volume::from_fn(target, |h, w, d| {
        let (h0, h1, fh) = t[0][h];
        let (w0, w1, fw) = t[1][w];
        let (d0, d1, fd) = t[2][d];
        let lerp = |a: f64, b: f64, f: f64| a + (b - a) * f;
        let plane = |hh| {
            lerp(
                lerp(at(hh, w0, d0), at(hh, w0, d1), fd),
                lerp(at(hh, w1, d0), at(hh, w1, d1), fd),
                fw,
            )
        };
        lerp(plane(h0), plane(h1), fh) as f32
    })?;
    data.with_spacing(
        v.spacing()
            .map(|sp| std::array::from_fn(|a| sp[a] * s[a] as f32 / target[a] as f32)),
    )
}

/// Nearest-neighbour resize for labels (keeps them binary).
pub fn resample_nearest(v: &LabelVolume, target: [usize; 3]) -> Result<LabelVolume> {
    check_target(target)?;
    let s = v.shape();
    if s == target {
        return Ok(v.clone());
    }
    let t: Vec<_> = (0..3).map(|a| nearest_taps(s[a], target[a])).collect();
    let out = LabelVolume::from_fn(target, |h, w, d| v.get(t[0][h], t[1][w], t[2][d]))?;
    out.with_spacing(
        v.spacing()
            .map(|sp| std::array::from_fn(|a| sp[a] * s[a] as f32 / target[a] as f32)),
    )
}

/// Intensity downsampling used ahead of the coarse stage.
pub fn downsample_volume(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    resample_trilinear(v, target)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_stays_constant() {
        let v = Volume::from_fn([8, 6, 4], |_, _, _| 2.5).unwrap();
        let out = downsample_volume(&v, [4, 3, 2]).unwrap();
        assert!(out.data().iter().all(|&x| x == 2.5));
    }

    #[test]
    fn ramp_matches_half_pixel_formula() {
        let v = Volume::from_fn([16, 2, 2], |h, _, _| h as f32).unwrap();
        let out = downsample_volume(&v, [5, 2, 2]).unwrap();
        for i in 0..5 {
            let x = ((i as f64 + 0.5) * 16.0 / 5.0 - 0.5).clamp(0.0, 15.0);
            assert!((out.get(i, 0, 0) as f64 - x).abs() < 1e-5, "{i}");
        }
        // exact factor two averages neighbouring pairs
        let out = downsample_volume(&v, [8, 2, 2]).unwrap();
        assert_eq!(out.get(3, 1, 1), 6.5);
    }

    #[test]
    fn label_downsampling_stays_binary() {
        let l = LabelVolume::from_fn([8, 8, 8], |h, w, d| (h * 7 + w * 3 + d) % 5 == 0).unwrap();
        let out = resample_nearest(&l, [4, 4, 4]).unwrap();
        assert!(out.data().iter().all(|&v| v <= 1));
        assert_eq!(out.get(1, 2, 3), l.get(3, 5, 7));
    }

    #[test]
    fn nearest_upscaling_replicates_blocks() {
        let l = LabelVolume::from_points([2, 2, 2], &[[1, 0, 1]]).unwrap();
        let up = resample_nearest(&l, [4, 4, 4]).unwrap();
        assert_eq!(up.count(), 8);
        assert!(up.get(2, 1, 3) && up.get(3, 0, 2) && !up.get(1, 0, 2));
    }
}
