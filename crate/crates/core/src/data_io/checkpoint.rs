//! Versioned tensor container: named tensors, a config snapshot and an
//! opaque JSON state block.

use std::path::Path;

use super::formats::Reader;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{checksum, Parameterized, Tensor};

pub const CKPT_MAGIC: &[u8; 4] = b"CKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Curriculum stages completed when written.
    pub stage: u32,
    pub tensors: Vec<(String, Tensor<f32>)>,
    /// Rendered `key = value` configuration.
    pub config: String,
    /// Pipeline state needed to resume (JSON).
    pub state: String,
}

impl Checkpoint {
    pub fn from_params<T: Scalar>(params: &dyn Parameterized<T>, stage: u32, config: String, state: String) -> Self {
        let mut tensors = Vec::new();
        params.visit(&mut |name, t| {
            let mut c = t.cast::<f32>();
            c.set_requires_grad(false);
            tensors.push((name.to_string(), c));
        });
        Self {
            stage,
            tensors,
            config,
            state,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrites every tensor of `params` by name, keeping their
    /// trainable flags. Errors name the first missing or mis-shaped tensor.
    pub fn load_into<T: Scalar>(&self, params: &mut dyn Parameterized<T>) -> Result<()> {
        let mut err = None;
        params.visit_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            match self.get(name) {
                None => err = Some(Error::Format {
                    offset: 0,
                    detail: format!("checkpoint is missing tensor `{name}`"),
                }),
                Some(src) if src.shape() != t.shape() => {
                    err = Some(Error::Format {
                        offset: 0,
                        detail: format!("tensor `{name}`: shape {:?} vs expected {:?}", src.shape(), t.shape()),
                    })
                }
                Some(src) => {
                    let rg = t.requires_grad();
                    *t = src.cast::<T>();
                    t.set_requires_grad(rg);
                }
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// Digest of the stored tensors.
    pub fn checksum(&self) -> String {
        checksum(self.tensors.iter().map(|(_, t)| t))
    }

    /// SHA-256 of the full serialized container.
    pub fn digest(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.stage.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| Error::Contract(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            let rank = u8::try_from(t.shape().len()).map_err(|_| Error::Contract("rank exceeds 255".into()))?;
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        for block in [&self.config, &self.state] {
            out.extend_from_slice(&(block.len() as u32).to_le_bytes());
            out.extend_from_slice(block.as_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(CKPT_MAGIC)?;
        let at = r.pos() as u64;
        let version = r.u32("version")?;
        if version != CKPT_VERSION {
            return Err(Error::Format {
                offset: at,
                detail: format!("checkpoint version {version}, this build reads {CKPT_VERSION}"),
            });
        }
        let stage = r.u32("stage")?;
        let n = r.u32("entry count")? as usize;
        let mut tensors = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let len = r.u16("name length")? as usize;
            let at = r.pos() as u64;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Format {
                    offset: at,
                    detail: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let rank = r.u8("rank")? as usize;
            let dims = (0..rank).map(|_| r.u32("dim").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = dims.iter().product();
            let data = r.f32s(numel, &format!("payload of `{name}`"))?;
            tensors.push((name, Tensor::new(dims, data)?));
        }
        let mut block = |what: &str| -> Result<String> {
            let len = r.u32(what)? as usize;
            let at = r.pos() as u64;
            String::from_utf8(r.take(len, what)?.to_vec()).map_err(|_| Error::Format {
                offset: at,
                detail: format!("{what} is not UTF-8"),
            })
        };
        let config = block("config block")?;
        let state = block("state block")?;
        r.finish()?;
        Ok(Self {
            stage,
            tensors,
            config,
            state,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
