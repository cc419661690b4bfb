//! Binary parameter files: `DRNET1`, a version byte, then one record per
//! tensor in sorted name order until end of file. A record is a `u32` name
//! length, the UTF-8 name, a `u32` rank, `u64` dims and little-endian `f32`
//! values.

use std::io::{Read, Write};
use std::path::Path;

use crate::classifier::{Classifier, ClassifierConfig};
use crate::error::{Error, Result};
use crate::params::NetworkParams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"DRNET1";
pub const VERSION: u8 = 1;
const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;

pub fn write_params(params: &NetworkParams, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    // NetworkParams iterates in sorted order.
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn corrupt(msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("corrupt checkpoint: {msg}"))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| corrupt("truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| corrupt(format!("dimension {v}")))
    }
}

pub fn read_params(r: &mut impl Read) -> Result<NetworkParams> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io("<checkpoint>", e))?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(corrupt("bad magic"));
    }
    let version = c.take(1)?[0];
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let mut params = NetworkParams::new();
    while c.pos < bytes.len() {
        let len = c.u32()?;
        if len == 0 || len > MAX_NAME {
            return Err(corrupt(format!("name length {len}")));
        }
        let name = std::str::from_utf8(c.take(len)?).map_err(|_| corrupt("name is not UTF-8"))?.to_string();
        let rank = c.u32()?;
        if rank > MAX_RANK {
            return Err(corrupt(format!("rank {rank} of `{name}`")));
        }
        let shape = (0..rank).map(|_| c.u64()).collect::<Result<Vec<_>>>()?;
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("size overflow"))?;
        let raw = c.take(count.checked_mul(4).ok_or_else(|| corrupt("size overflow"))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        if params.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(corrupt(format!("duplicate tensor `{name}`")));
        }
    }
    Ok(params)
}

pub fn save_params(params: &NetworkParams, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut buf = Vec::new();
    write_params(params, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<NetworkParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_params(&mut bytes.as_slice()).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        e => e,
    })
}

const META_PREFIX: &str = "meta.classifier.";

fn meta_scalar(v: usize) -> Tensor {
    Tensor::scalar(v as f32)
}

fn meta_list(v: &[usize]) -> Tensor {
    Tensor::new([v.len()], v.iter().map(|&x| x as f32).collect()).expect("1-d")
}

/// Parameters plus the architecture as `meta.classifier.*` tensors.
pub fn save_classifier(model: &Classifier, params: &NetworkParams, path: &Path) -> Result<()> {
    model.check_params(params)?;
    let c = model.config();
    let mut all = params.clone();
    all.insert(format!("{META_PREFIX}stem_channels"), meta_scalar(c.stem_channels));
    all.insert(format!("{META_PREFIX}widths"), meta_list(&c.widths));
    all.insert(format!("{META_PREFIX}fc"), meta_list(&c.fc));
    all.insert(format!("{META_PREFIX}input_size"), meta_scalar(c.input_size));
    save_params(&all, path)
}

pub fn load_classifier(path: &Path) -> Result<(Classifier, NetworkParams)> {
    let all = load_params(path)?;
    let meta = |key: &str| -> Result<Vec<usize>> {
        let t = all.get(&format!("{META_PREFIX}{key}")).map_err(|_| {
            Error::Data(format!("{}: not a classifier checkpoint (no {META_PREFIX}{key})", path.display()))
        })?;
        t.data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Data(format!("{}: bad {META_PREFIX}{key} value {v}", path.display())))
                }
            })
            .collect()
    };
    let single = |key: &str| -> Result<usize> {
        match meta(key)?.as_slice() {
            &[v] => Ok(v),
            _ => Err(Error::Data(format!("{}: {META_PREFIX}{key} must be a scalar", path.display()))),
        }
    };
    let config = ClassifierConfig {
        stem_channels: single("stem_channels")?,
        widths: meta("widths")?,
        fc: meta("fc")?,
        input_size: single("input_size")?,
    };
    let model = Classifier::new(config)?;
    let mut params = NetworkParams::new();
    for (name, t) in all.iter().filter(|(n, _)| !n.starts_with("meta.")) {
        params.insert(name.clone(), t.clone());
    }
    model.check_params(&params)?;
    Ok((model, params))
}
