//! MDSVCKPT checkpoint files.
//!
//! Layout (little endian): `b"MDSVCKPT"`, `u32` version (1), `u32` record
//! count, then per record: `u32` name length, UTF-8 name, `u32` rank, `u32`
//! extents, `f64` data. Network hyperparameters travel as `meta.*` records
//! ahead of the parameters, so a checkpoint alone rebuilds its network.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig};
use crate::params::ParamStore;
use crate::ssm::ScanStrategy;
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 8] = b"MDSVCKPT";
pub const CKPT_VERSION: u32 = 1;

/// Serialises named tensors in order.
pub fn encode_records<'a>(records: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let records: Vec<_> = records.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

/// Parses a checkpoint into ordered `(name, tensor)` records.
pub fn decode_records(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).ok() != Some(&CKPT_MAGIC[..]) {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()? as u32;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| Error::Format(format!("record {name}: shape overflows")))?;
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("record too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("record {name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    Ok(out)
}

fn meta(config: &NetworkConfig) -> Vec<(String, Tensor)> {
    let f = |v: Vec<f64>| Tensor::new([v.len()], v).expect("nonempty");
    let chunk = match config.scan {
        ScanStrategy::Sequential => 0.0,
        ScanStrategy::Chunked(c) => c as f64,
    };
    vec![
        (
            "meta.ladder".into(),
            f(config.ladder.iter().map(|&c| c as f64).collect()),
        ),
        (
            "meta.config".into(),
            f(vec![
                config.in_channels as f64,
                config.out_classes as f64,
                config.c_max as f64,
                config.offset_scale,
                config.expand as f64,
                config.state_dim as f64,
                f64::from(u8::from(config.dense_skips)),
                f64::from(u8::from(config.transposed_head)),
                chunk,
            ]),
        ),
    ]
}

fn config_from_meta(ladder: &Tensor, cfg: &Tensor) -> Result<NetworkConfig> {
    let as_usize = |v: f64| {
        if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
            Ok(v as usize)
        } else {
            Err(Error::Format(format!("bad integer {v} in checkpoint metadata")))
        }
    };
    let c = cfg.data();
    if c.len() != 9 {
        return Err(Error::Format("meta.config must hold 9 values".into()));
    }
    let chunk = as_usize(c[8])?;
    Ok(NetworkConfig {
        ladder: ladder.data().iter().map(|&v| as_usize(v)).collect::<Result<_>>()?,
        in_channels: as_usize(c[0])?,
        out_classes: as_usize(c[1])?,
        c_max: as_usize(c[2])?,
        offset_scale: c[3],
        expand: as_usize(c[4])?,
        state_dim: as_usize(c[5])?,
        dense_skips: c[6] != 0.0,
        transposed_head: c[7] != 0.0,
        scan: if chunk == 0 {
            ScanStrategy::Sequential
        } else {
            ScanStrategy::Chunked(chunk)
        },
    })
}

pub fn encode_network(net: &Network) -> Vec<u8> {
    let meta = meta(net.config());
    let records = meta.iter().map(|(n, t)| (n.as_str(), t)).chain(net.params().iter());
    encode_records(records)
}

pub fn decode_network(bytes: &[u8]) -> Result<Network> {
    let mut records = decode_records(bytes)?.into_iter();
    let mut next_meta = |want: &str| match records.next() {
        Some((name, t)) if name == want => Ok(t),
        _ => Err(Error::Format(format!("checkpoint is missing {want}"))),
    };
    let ladder = next_meta("meta.ladder")?;
    let cfg = next_meta("meta.config")?;
    let config = config_from_meta(&ladder, &cfg)?;
    let mut store = ParamStore::new();
    for (name, t) in records {
        store.insert(name, t).map_err(|e| Error::Format(e.to_string()))?;
    }
    Network::from_params(config, store)
}

pub fn save_checkpoint(path: impl AsRef<Path>, net: &Network) -> Result<()> {
    fs::write(path, encode_network(net))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    decode_network(&fs::read(path)?)
}
