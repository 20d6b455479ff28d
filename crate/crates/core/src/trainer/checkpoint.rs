//! Binary checkpoints.
//!
//! ```text
//! magic    b"NEPFCKPT"
//! version  u32
//! config   u64 length + JSON bytes
//! step     u64
//! tensors  u64 count, then per tensor: u64 rows, u64 cols, f64 data
//! adam     u8 flag; when 1: u64 t, then the m and v tensors as above
//! crc32    u32 over everything before it
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use super::Adam;
use crate::config::Config;
use crate::diffengine::Tensor;
use crate::fields::{init_fields, ParameterSnapshot};
use crate::Error;

const MAGIC: &[u8; 8] = b"NEPFCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub step: u64,
    pub snapshot: ParameterSnapshot,
    pub adam: Option<Adam>,
}

fn put_tensors(out: &mut Vec<u8>, tensors: &[&Tensor]) {
    out.extend((tensors.len() as u64).to_le_bytes());
    for t in tensors {
        out.extend((t.rows() as u64).to_le_bytes());
        out.extend((t.cols() as u64).to_le_bytes());
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend((config.len() as u64).to_le_bytes());
        out.extend(config);
        out.extend(self.step.to_le_bytes());
        put_tensors(&mut out, &self.snapshot.tensors());
        match &self.adam {
            None => out.push(0),
            Some(adam) => {
                out.push(1);
                out.extend(adam.t.to_le_bytes());
                put_tensors(&mut out, &adam.m.iter().collect::<Vec<_>>());
                put_tensors(&mut out, &adam.v.iter().collect::<Vec<_>>());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend(crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, Error> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let mut r = Reader { bytes: body, at: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("version {version}, expected {VERSION}")));
        }
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("corrupt file: checksum mismatch".into()));
        }
        let len = r.u64()? as usize;
        let config: Config = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("corrupt file: config: {e}")))?;
        let step = r.u64()?;
        let mut snapshot = init_fields(&config.fields, 0);
        let tensors = r.tensors()?;
        fill(&mut snapshot.tensors_mut(), tensors)?;
        let adam = match r.take(1)?[0] {
            0 => None,
            1 => {
                let t = r.u64()?;
                let shapes: Vec<[usize; 2]> = snapshot.tensors().iter().map(|t| t.shape()).collect();
                let mut adam = Adam::new(&shapes, config.train.adam_beta1, config.train.adam_beta2, config.train.adam_eps);
                adam.t = t;
                fill(&mut adam.m.iter_mut().collect::<Vec<_>>(), r.tensors()?)?;
                fill(&mut adam.v.iter_mut().collect::<Vec<_>>(), r.tensors()?)?;
                Some(adam)
            }
            _ => return Err(Error::Checkpoint("corrupt file: optimizer flag".into())),
        };
        if r.at != body.len() {
            return Err(Error::Checkpoint("corrupt file: trailing bytes".into()));
        }
        Ok(Checkpoint { config, step, snapshot, adam })
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn fill(dst: &mut [&mut Tensor], src: Vec<Tensor>) -> Result<(), Error> {
    if dst.len() != src.len() {
        return Err(Error::Checkpoint(format!("{} tensors, config expects {}", src.len(), dst.len())));
    }
    for (i, (d, s)) in dst.iter_mut().zip(src).enumerate() {
        if d.shape() != s.shape() {
            return Err(Error::Checkpoint(format!("tensor {i} has shape {:?}, config expects {:?}", s.shape(), d.shape())));
        }
        **d = s;
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], Error> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("corrupt file: truncated".into()))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, Error> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, Error> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensors(&mut self) -> Result<Vec<Tensor>, Error> {
        let n = self.u64()? as usize;
        let mut out = Vec::new();
        for _ in 0..n {
            let rows = self.u64()? as usize;
            let cols = self.u64()? as usize;
            let count = rows.checked_mul(cols).filter(|&c| c <= self.bytes.len() / 8);
            let count = count.ok_or_else(|| Error::Checkpoint("corrupt file: tensor size".into()))?;
            let raw = self.take(count * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            out.push(Tensor::from_vec(rows, cols, data));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::NetConfig;

    fn small() -> Checkpoint {
        let mut config = Config::default();
        for net in [&mut config.fields.sdf, &mut config.fields.radiance, &mut config.fields.material, &mut config.fields.photon] {
            *net = NetConfig { depth: 2, width: 8, ..net.clone() };
        }
        config.fields.sdf_skip = vec![1];
        config.fields.feature_dim = 4;
        let snapshot = init_fields(&config.fields, 3);
        let shapes: Vec<_> = snapshot.tensors().iter().map(|t| t.shape()).collect();
        let mut adam = Adam::new(&shapes, 0.9, 0.999, 1e-8);
        adam.t = 7;
        adam.m[0].data_mut()[0] = 0.25;
        Checkpoint { config, step: 7, snapshot, adam: Some(adam) }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = small();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let plain = Checkpoint { adam: None, ..ck };
        assert_eq!(Checkpoint::from_bytes(&plain.to_bytes()).unwrap(), plain);
    }

    #[test]
    fn damage_is_reported() {
        let bytes = small().to_bytes();
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut at {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 1;
        let err = Checkpoint::from_bytes(&flipped).unwrap_err().to_string();
        assert!(err.contains("corrupt"), "{err}");
        let mut versioned = bytes;
        versioned[8] = 99;
        let err = Checkpoint::from_bytes(&versioned).unwrap_err().to_string();
        assert!(err.contains("version 99"), "{err}");
    }
}
