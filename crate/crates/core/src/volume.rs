//! 3D intensity and label grids and the MDSV file format.
//!
//! Layout on disk (little endian): `b"MDSV"`, `u8` version (1), `u8` dtype
//! (0 = f32 intensity, 1 = u8 label), `u16` reserved (0), three `u32` extents
//! `H W D`, three `f32` spacings (0 = unknown), then `H*W*D` elements at
//! linear index `(h*W + w)*D + d`.

use std::fs;
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const MDSV_MAGIC: &[u8; 4] = b"MDSV";
pub const MDSV_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 1 + 2 + 12 + 12;

/// Voxel size in mm along `H, W, D`.
pub type Spacing = [f32; 3];

fn check_shape(shape: [usize; 3], len: usize, op: &'static str) -> Result<()> {
    if shape.contains(&0) {
        return Err(shape_err(op, "extent", format!("zero extent in {shape:?}")));
    }
    if shape.iter().product::<usize>() != len {
        return Err(shape_err(op, "data", format!("{len} values for shape {shape:?}")));
    }
    Ok(())
}

fn check_spacing(spacing: Option<Spacing>) -> Result<()> {
    match spacing {
        Some(s) if s.iter().any(|v| !(v.is_finite() && *v > 0.0)) => {
            Err(Error::Contract(format!("spacing must be positive, got {s:?}")))
        }
        _ => Ok(()),
    }
}

#[inline]
pub fn linear_index(shape: [usize; 3], h: usize, w: usize, d: usize) -> usize {
    (h * shape[1] + w) * shape[2] + d
}

/// Intensity or probability grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    data: Vec<f32>,
    spacing: Option<Spacing>,
}

impl Volume {
    pub fn new(shape: [usize; 3], data: Vec<f32>, spacing: Option<Spacing>) -> Result<Self> {
        check_shape(shape, data.len(), "Volume::new")?;
        check_spacing(spacing)?;
        Ok(Self { shape, data, spacing })
    }

    pub fn zeros(shape: [usize; 3]) -> Result<Self> {
        Self::new(shape, vec![0.0; shape.iter().product()], None)
    }

    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.iter().product());
        for h in 0..shape[0] {
            for w in 0..shape[1] {
                for d in 0..shape[2] {
                    data.push(f(h, w, d));
                }
            }
        }
        Self::new(shape, data, None)
    }

    pub fn with_spacing(mut self, spacing: Option<Spacing>) -> Result<Self> {
        check_spacing(spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> Option<Spacing> {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, h: usize, w: usize, d: usize) -> f32 {
        self.data[linear_index(self.shape, h, w, d)]
    }

    /// `[1, 1, H, W, D]` network input.
    pub fn to_tensor(&self) -> Tensor {
        let [h, w, d] = self.shape;
        Tensor::new([1, 1, h, w, d], self.data.iter().map(|&v| v as f64).collect()).expect("valid volume")
    }

    /// Takes channel 0 of batch item 0 of a `[B, C, H, W, D]` tensor.
    pub fn from_tensor(t: &Tensor, spacing: Option<Spacing>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 5 {
            return Err(shape_err("Volume::from_tensor", "rank", format!("{s:?}")));
        }
        let shape = [s[2], s[3], s[4]];
        let n = shape.iter().product();
        Self::new(shape, t.data()[..n].iter().map(|&v| v as f32).collect(), spacing)
    }

    /// Binary mask of voxels strictly above `threshold`.
    pub fn threshold(&self, threshold: f32) -> LabelVolume {
        LabelVolume {
            shape: self.shape,
            data: self.data.iter().map(|&v| u8::from(v > threshold)).collect(),
            spacing: self.spacing,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = header(0, self.shape, self.spacing, self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        match MdsvFile::from_bytes(&fs::read(path)?)? {
            MdsvFile::Intensity(v) => Ok(v),
            MdsvFile::Label(_) => Err(Error::Format(
                "expected an intensity volume, found a label volume".into(),
            )),
        }
    }
}

/// Binary occupancy grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    shape: [usize; 3],
    data: Vec<u8>,
    spacing: Option<Spacing>,
}

impl LabelVolume {
    pub fn new(shape: [usize; 3], data: Vec<u8>, spacing: Option<Spacing>) -> Result<Self> {
        check_shape(shape, data.len(), "LabelVolume::new")?;
        check_spacing(spacing)?;
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Contract(format!("label value {v} is not binary")));
        }
        Ok(Self { shape, data, spacing })
    }

    pub fn zeros(shape: [usize; 3]) -> Result<Self> {
        Self::new(shape, vec![0; shape.iter().product()], None)
    }

    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> bool) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.iter().product());
        for h in 0..shape[0] {
            for w in 0..shape[1] {
                for d in 0..shape[2] {
                    data.push(u8::from(f(h, w, d)));
                }
            }
        }
        Self::new(shape, data, None)
    }

    /// Mask containing exactly the listed voxels.
    pub fn from_points(shape: [usize; 3], points: &[[usize; 3]]) -> Result<Self> {
        let mut v = Self::zeros(shape)?;
        for p in points {
            if (0..3).any(|a| p[a] >= shape[a]) {
                return Err(shape_err(
                    "LabelVolume::from_points",
                    "point",
                    format!("{p:?} outside {shape:?}"),
                ));
            }
            v.set(p[0], p[1], p[2], true);
        }
        Ok(v)
    }

    pub fn with_spacing(mut self, spacing: Option<Spacing>) -> Result<Self> {
        check_spacing(spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> Option<Spacing> {
        self.spacing
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, h: usize, w: usize, d: usize) -> bool {
        self.data[linear_index(self.shape, h, w, d)] != 0
    }

    pub fn set(&mut self, h: usize, w: usize, d: usize, value: bool) {
        let i = linear_index(self.shape, h, w, d);
        self.data[i] = u8::from(value);
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn to_tensor(&self) -> Tensor {
        let [h, w, d] = self.shape;
        Tensor::new([1, 1, h, w, d], self.data.iter().map(|&v| v as f64).collect()).expect("valid volume")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = header(1, self.shape, self.spacing, self.data.len());
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        match MdsvFile::from_bytes(&fs::read(path)?)? {
            MdsvFile::Label(v) => Ok(v),
            MdsvFile::Intensity(_) => Err(Error::Format(
                "expected a label volume, found an intensity volume".into(),
            )),
        }
    }
}

fn header(dtype: u8, shape: [usize; 3], spacing: Option<Spacing>, payload: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload);
    out.extend_from_slice(MDSV_MAGIC);
    out.push(MDSV_VERSION);
    out.push(dtype);
    out.extend_from_slice(&0u16.to_le_bytes());
    for e in shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for s in spacing.unwrap_or([0.0; 3]) {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

/// Either kind of MDSV payload.
#[derive(Clone, Debug, PartialEq)]
pub enum MdsvFile {
    Intensity(Volume),
    Label(LabelVolume),
}

impl MdsvFile {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: String| Err(Error::Format(m));
        if bytes.len() < HEADER_LEN {
            return fmt(format!("MDSV file too short ({} bytes)", bytes.len()));
        }
        if &bytes[..4] != MDSV_MAGIC {
            return fmt("bad volume magic".into());
        }
        if bytes[4] != MDSV_VERSION {
            return fmt(format!("unsupported MDSV version {}", bytes[4]));
        }
        let dtype = bytes[5];
        if bytes[6..8] != [0, 0] {
            return fmt("reserved MDSV header bytes are not zero".into());
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let shape = [u32_at(8), u32_at(12), u32_at(16)];
        let sp = [f32_at(20), f32_at(24), f32_at(28)];
        let spacing = if sp == [0.0; 3] { None } else { Some(sp) };
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| Error::Format(format!("extents {shape:?} overflow")))?;
        let payload = &bytes[HEADER_LEN..];
        let elem = match dtype {
            0 => 4,
            1 => 1,
            other => return fmt(format!("unknown MDSV dtype {other}")),
        };
        if payload.len() != n * elem {
            return fmt(format!(
                "MDSV payload has {} bytes, shape {shape:?} needs {}",
                payload.len(),
                n * elem
            ));
        }
        let wrap = |e: Error| Error::Format(e.to_string());
        match dtype {
            0 => {
                let data = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Volume::new(shape, data, spacing).map(Self::Intensity).map_err(wrap)
            }
            _ => LabelVolume::new(shape, payload.to_vec(), spacing)
                .map(Self::Label)
                .map_err(wrap),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let v = Volume::new([1, 2, 3], vec![0.5; 6], Some([0.5, 0.5, 1.0])).unwrap();
        let b = v.to_bytes();
        assert_eq!(&b[..4], b"MDSV");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 0);
        assert_eq!(&b[6..8], &[0, 0]);
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[16..20], &3u32.to_le_bytes());
        assert_eq!(&b[28..32], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 32 + 24);
    }

    #[test]
    fn element_order_is_d_fastest() {
        let v = Volume::from_fn([2, 2, 2], |h, w, d| (h * 4 + w * 2 + d) as f32).unwrap();
        assert_eq!(v.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        assert_eq!(v.get(1, 0, 1), 5.0);
    }

    #[test]
    fn label_round_trip() {
        let l = LabelVolume::from_fn([3, 2, 4], |h, w, d| (h + w + d) % 3 == 0).unwrap();
        let back = MdsvFile::from_bytes(&l.to_bytes()).unwrap();
        assert_eq!(back, MdsvFile::Label(l));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let v = Volume::zeros([2, 2, 2]).unwrap();
        let mut b = v.to_bytes();
        b[0] = b'X';
        assert!(matches!(MdsvFile::from_bytes(&b), Err(Error::Format(_))));
        let b = v.to_bytes();
        assert!(matches!(MdsvFile::from_bytes(&b[..b.len() - 1]), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_non_binary_labels() {
        assert!(LabelVolume::new([1, 1, 2], vec![0, 2], None).is_err());
        let mut b = LabelVolume::zeros([1, 1, 2]).unwrap().to_bytes();
        *b.last_mut().unwrap() = 7;
        assert!(matches!(MdsvFile::from_bytes(&b), Err(Error::Format(_))));
    }

    #[test]
    fn threshold_is_strict() {
        let v = Volume::new([1, 1, 3], vec![0.4, 0.5, 0.6], None).unwrap();
        assert_eq!(v.threshold(0.5).data(), &[0, 0, 1]);
    }
}
