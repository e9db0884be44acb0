//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SPIDECK1"                      8 bytes
//! tensor count                    u32
//! per tensor:
//!   name length                   u16
//!   name                          UTF-8
//!   ndim                          u8
//!   dims                          ndim × u32
//!   values                        row-major f64
//! config length                   u32
//! config                          UTF-8 key = value text
//! rng state                       4 × u64
//! ```
//!
//! Optimizer momentum buffers are stored as tensors named
//! `momentum.<parameter name>`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, SpideError};
use crate::network::NetworkParams;
use crate::training::OptimizerState;

pub const MAGIC: &[u8; 8] = b"SPIDECK1";
const MAGIC_PREFIX: &[u8; 7] = b"SPIDECK";
pub const MOMENTUM_PREFIX: &str = "momentum.";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    pub config: String,
    pub rng_state: [u64; 4],
}

impl Checkpoint {
    /// Snapshot parameters and (optionally) optimizer buffers.
    pub fn capture(params: &NetworkParams, opt: Option<&OptimizerState>, config: String, rng_state: [u64; 4]) -> Self {
        let mut tensors: Vec<NamedTensor> = params
            .tensors()
            .into_iter()
            .map(|t| NamedTensor {
                name: t.name,
                shape: t.shape,
                data: t.data.to_vec(),
            })
            .collect();
        if let Some(opt) = opt {
            tensors.extend(opt.momentum.tensors().into_iter().map(|t| NamedTensor {
                name: format!("{MOMENTUM_PREFIX}{}", t.name),
                shape: t.shape,
                data: t.data.to_vec(),
            }));
        }
        Self {
            tensors,
            config,
            rng_state,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Copy stored values into `params` (and `opt` when given). Every
    /// destination tensor must be present with the same shape.
    pub fn restore(&self, params: &mut NetworkParams, opt: Option<&mut OptimizerState>) -> Result<()> {
        fn fill(ck: &Checkpoint, prefix: &str, dst: Vec<crate::network::TensorViewMut<'_>>) -> Result<()> {
            for t in dst {
                let name = format!("{prefix}{}", t.name);
                let src = ck.tensor(&name).ok_or_else(|| SpideError::ShapeConflict {
                    name: name.clone(),
                    expected: t.shape.clone(),
                    found: vec![],
                })?;
                if src.shape != t.shape {
                    return Err(SpideError::ShapeConflict {
                        name,
                        expected: t.shape,
                        found: src.shape.clone(),
                    });
                }
                t.data.copy_from_slice(&src.data);
            }
            Ok(())
        }
        // validate everything before mutating
        let mut scratch = params.clone();
        fill(self, "", scratch.tensors_mut())?;
        if let Some(opt) = opt {
            let mut m = opt.momentum.clone();
            fill(self, MOMENTUM_PREFIX, m.tensors_mut())?;
            opt.momentum = m;
        }
        *params = scratch;
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&u32::try_from(self.tensors.len()).map_err(|_| too_big("tensor count"))?.to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            out.extend_from_slice(&u16::try_from(name.len()).map_err(|_| too_big("tensor name"))?.to_le_bytes());
            out.extend_from_slice(name);
            out.push(u8::try_from(t.shape.len()).map_err(|_| too_big("tensor rank"))?);
            for &d in &t.shape {
                out.extend_from_slice(&u32::try_from(d).map_err(|_| too_big("tensor dim"))?.to_le_bytes());
            }
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(SpideError::Contract(format!("tensor `{}` data does not match its shape", t.name)));
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let cfg = self.config.as_bytes();
        out.extend_from_slice(&u32::try_from(cfg.len()).map_err(|_| too_big("config"))?.to_le_bytes());
        out.extend_from_slice(cfg);
        for v in self.rng_state {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            if magic.starts_with(MAGIC_PREFIX) {
                return Err(SpideError::VersionMismatch {
                    found: String::from_utf8_lossy(magic).into_owned(),
                    expected: String::from_utf8_lossy(MAGIC).into_owned(),
                });
            }
            return Err(SpideError::Parse {
                offset: 0,
                message: "not a checkpoint file (bad magic)".into(),
            });
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = usize::from(r.u16("name length")?);
            let at = r.pos;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| SpideError::Parse {
                    offset: at as u64,
                    message: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let ndim = usize::from(r.u8("ndim")?);
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("dim")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| SpideError::Parse {
                    offset: r.pos as u64,
                    message: format!("tensor `{name}` declares more data than the file holds"),
                })?;
            let raw = r.take(n * 8, "tensor values")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        let cfg_len = r.u32("config length")? as usize;
        let at = r.pos;
        let config = std::str::from_utf8(r.take(cfg_len, "config")?)
            .map_err(|_| SpideError::Parse {
                offset: at as u64,
                message: "config is not UTF-8".into(),
            })?
            .to_string();
        let mut rng_state = [0u64; 4];
        for v in &mut rng_state {
            *v = r.u64("rng state")?;
        }
        Ok(Self {
            tensors,
            config,
            rng_state,
        })
    }
}

fn too_big(what: &str) -> SpideError {
    SpideError::Contract(format!("{what} too large for the checkpoint format"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(SpideError::Parse {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Write atomically: a temporary sibling file is renamed into place.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = ck.encode()?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_network;
    use crate::training::SgdHyper;

    fn sample() -> (NetworkParams, OptimizerState) {
        let p = build_network(&[6, 5, 4], 3, true, 8).unwrap();
        let mut opt = OptimizerState::new(
            &p,
            SgdHyper {
                lr: 0.1,
                momentum: 0.9,
                weight_decay: 0.0,
                loss_scale: 1.0,
            },
        );
        opt.momentum.readout_bias[1] = -0.125;
        (p, opt)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (p, opt) = sample();
        let ck = Checkpoint::capture(&p, Some(&opt), "seed = 1\n".into(), [1, 2, 3, u64::MAX]);
        let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
        assert_eq!(back, ck);
        let mut q = build_network(&[6, 5, 4], 3, true, 99).unwrap();
        let mut opt2 = OptimizerState::new(&q, opt.hyper);
        back.restore(&mut q, Some(&mut opt2)).unwrap();
        assert_eq!(q, p);
        assert_eq!(opt2.momentum, opt.momentum);
    }

    #[test]
    fn file_round_trip() {
        let (p, _) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ck = Checkpoint::capture(&p, None, String::new(), [0; 4]);
        save_checkpoint(&path, &ck).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
    }

    #[test]
    fn shape_conflict_names_tensor() {
        let (p, _) = sample();
        let ck = Checkpoint::capture(&p, None, String::new(), [0; 4]);
        let mut other = build_network(&[6, 7, 4], 3, true, 0).unwrap();
        match ck.restore(&mut other, None).unwrap_err() {
            SpideError::ShapeConflict { name, .. } => assert_eq!(name, "layer1.weight"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn version_and_truncation() {
        let (p, _) = sample();
        let mut bytes = Checkpoint::capture(&p, None, String::new(), [0; 4]).encode().unwrap();
        for cut in [0, 5, 12, 40, bytes.len() - 1] {
            assert!(Checkpoint::decode(&bytes[..cut]).is_err());
        }
        bytes[7] = b'2';
        assert!(matches!(Checkpoint::decode(&bytes), Err(SpideError::VersionMismatch { .. })));
    }
}
