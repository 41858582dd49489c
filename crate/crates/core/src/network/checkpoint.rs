//! Self-describing binary checkpoint.
//!
//! ```text
//! magic      8 bytes  "POPSANCK"
//! version    u32 LE
//! header     u32 LE length + UTF-8 JSON (actor kind and spec)
//! dtype      u8 length + ASCII ("f32" | "f64")
//! count      u32 LE
//! tensor*    u16 name length, name, u8 ndim, ndim × u64 dims, raw LE values
//! checksum   u64 LE FNV-1a over every preceding byte
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NetworkSpec, PopSan};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"POPSANCK";
pub const FORMAT_VERSION: u32 = 1;

/// What kind of actor a checkpoint holds; stored as the JSON header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActorSpec {
    Popsan { spec: NetworkSpec },
    Dense { spec: crate::mlp::DenseSpec },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub actor: ActorSpec,
    pub dtype: String,
    pub tensors: Vec<StoredTensor>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn encode<S: Scalar>(actor: &ActorSpec, tensors: &[(String, Vec<usize>, &[S])]) -> Vec<u8> {
    let header = serde_json::to_vec(actor).expect("actor spec serialises");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.push(S::DTYPE.len() as u8);
    out.extend_from_slice(S::DTYPE.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in data.iter() {
            x.write_le(&mut out);
        }
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

pub fn write<S: Scalar>(
    path: &Path,
    actor: &ActorSpec,
    tensors: &[(String, Vec<usize>, &[S])],
) -> Result<()> {
    std::fs::write(path, encode(actor, tensors)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt {
                path: self.path.to_path_buf(),
                reason: format!("truncated while reading {what}"),
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

    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::Corrupt {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { path, bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(r.corrupt("not a PopSAN checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if bytes.len() < r.pos + 8 {
        return Err(r.corrupt("truncated before checksum"));
    }
    let body_end = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let header_len = r.u32("header length")? as usize;
    let header = r.take(header_len, "header")?;
    let actor: ActorSpec = serde_json::from_slice(header)
        .map_err(|e| r.corrupt(format!("header is not a valid actor spec: {e}")))?;
    let dtype_len = r.u8("dtype length")? as usize;
    let dtype = String::from_utf8(r.take(dtype_len, "dtype")?.to_vec())
        .map_err(|_| r.corrupt("dtype is not UTF-8"))?;
    let width = match dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(r.corrupt(format!("unknown dtype `{other}`"))),
    };
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| r.corrupt(format!("tensor {i} name is not UTF-8")))?;
        let ndim = r.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("tensor dim")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| r.corrupt(format!("tensor `{name}` has an absurd shape")))?;
        let data = r.take(n, &format!("tensor `{name}`"))?.to_vec();
        tensors.push(StoredTensor {
            name,
            shape,
            bytes: data,
        });
    }
    if r.pos != body_end {
        return Err(r.corrupt(if r.pos > body_end {
            "truncated (tensor data overlaps checksum)".to_string()
        } else {
            format!("{} unexpected trailing bytes", body_end - r.pos)
        }));
    }
    if fnv1a(&bytes[..body_end]) != stored {
        return Err(r.corrupt("checksum mismatch"));
    }
    Ok(Checkpoint {
        actor,
        dtype,
        tensors,
    })
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}

impl Checkpoint {
    /// Copies stored values into `targets`, matching by name and shape.
    pub fn restore_into<S: Scalar>(
        &self,
        targets: Vec<(String, Vec<usize>, &mut [S])>,
    ) -> Result<()> {
        if self.dtype != S::DTYPE {
            return Err(Error::Mismatch(format!(
                "checkpoint holds {} values, network uses {}",
                self.dtype,
                S::DTYPE
            )));
        }
        for (name, shape, dst) in targets {
            let stored = self
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::TensorMismatch {
                    tensor: name.clone(),
                    expected: shape.clone(),
                    found: vec![],
                })?;
            if stored.shape != shape {
                return Err(Error::TensorMismatch {
                    tensor: name,
                    expected: shape,
                    found: stored.shape.clone(),
                });
            }
            for (d, chunk) in dst.iter_mut().zip(stored.bytes.chunks_exact(S::BYTES)) {
                *d = S::read_le(chunk);
            }
        }
        Ok(())
    }
}

impl<S: Scalar> PopSan<S> {
    fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[S])> {
        self.params
            .tensors()
            .into_iter()
            .map(|t| (t.name, t.shape, t.data))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode(
            &ActorSpec::Popsan {
                spec: self.spec.clone(),
            },
            &self.named_tensors(),
        )
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Rebuilds the network described by the checkpoint header.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let spec = match &ckpt.actor {
            ActorSpec::Popsan { spec } => spec.clone(),
            ActorSpec::Dense { .. } => {
                return Err(Error::Mismatch(
                    "checkpoint holds a dense actor, not a PopSAN".into(),
                ))
            }
        };
        let mut net = PopSan::new(spec)?;
        net.restore(ckpt)?;
        Ok(net)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&read(path)?)
    }

    /// Overwrites this network's parameters; every tensor must exist in the
    /// checkpoint with the same shape.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let shapes: Vec<(String, Vec<usize>)> = self
            .params
            .tensors()
            .into_iter()
            .map(|t| (t.name, t.shape))
            .collect();
        let targets = shapes
            .into_iter()
            .zip(self.params.tensors_mut())
            .map(|((n, s), d)| (n, s, d))
            .collect();
        ckpt.restore_into(targets)
    }
}
