//! Binary checkpoint: a JSON header (model kind, every config field, seed,
//! loss history, optimizer hyper-parameters) followed by the named tensors,
//! the Adam moments and a SHA-256 trailer.
//!
//! ```text
//! "COSPACKP" u32:version u64:len header-json
//! u64:count { u32:len name u8:kind u32:rank u64*rank:dims f64*2n:re,im }
//! moments: for each entry, twice (first, second): u8:present [f64*2n]
//! 32 bytes SHA-256 of everything above
//! ```
//!
//! All integers and floats are little endian; floats are stored bit-exact
//! so a resumed run continues exactly where it stopped.

use std::path::Path;

use cospa_core::cospa::{CospaConfig, Trainer};
use cospa_core::ctensor::{AdamState, ParamKind, ParamStore};
use cospa_core::C64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{ModelKind, Network};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"COSPACKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelKind,
    pub config: CospaConfig,
    /// Initialization seed.
    pub seed: u64,
    /// Mean training loss per completed epoch.
    pub history: Vec<f64>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: Header,
    pub params: ParamStore,
    pub first_moment: Vec<Option<Vec<C64>>>,
    pub second_moment: Vec<Option<Vec<C64>>>,
}

impl Checkpoint {
    pub fn from_trainer(model: ModelKind, config: &CospaConfig, seed: u64, trainer: &Trainer) -> Self {
        let a = &trainer.adam;
        Self {
            header: Header {
                model,
                config: config.clone(),
                seed,
                history: trainer.history.clone(),
                learning_rate: a.learning_rate,
                beta1: a.beta1,
                beta2: a.beta2,
                epsilon: a.epsilon,
                step_count: a.step_count,
            },
            params: trainer.params.clone(),
            first_moment: a.first_moment.clone(),
            second_moment: a.second_moment.clone(),
        }
    }

    /// Network, weights and optimizer state ready to continue training.
    pub fn into_trainer(self) -> Result<(Network, Trainer)> {
        let (net, params) = self.restore()?;
        let h = self.header;
        let adam = AdamState {
            learning_rate: h.learning_rate,
            beta1: h.beta1,
            beta2: h.beta2,
            epsilon: h.epsilon,
            step_count: h.step_count,
            first_moment: self.first_moment,
            second_moment: self.second_moment,
        };
        Ok((net, Trainer { params, adam, history: h.history }))
    }

    /// Rebuilds the network from the header and copies the stored tensors
    /// in, checking that names, kinds and shapes agree.
    pub fn restore(&self) -> Result<(Network, ParamStore)> {
        let (net, mut store) = Network::build(self.header.model, self.header.config.clone(), self.header.seed)?;
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for this config, found {}",
                store.len(),
                self.params.len()
            )));
        }
        for (id, saved) in store.ids().zip(self.params.entries()) {
            let e = store.entry(id);
            if e.name != saved.name || e.kind != saved.kind || e.tensor.shape() != saved.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    saved.name,
                    saved.tensor.shape(),
                    e.name,
                    e.tensor.shape()
                )));
            }
            store.get_mut(id).data_mut().copy_from_slice(saved.tensor.data());
        }
        Ok((net, store))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for e in self.params.entries() {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(match e.kind {
                ParamKind::Trainable => 0,
                ParamKind::Buffer => 1,
            });
            out.extend_from_slice(&(e.tensor.shape().len() as u32).to_le_bytes());
            for d in e.tensor.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            put_values(&mut out, e.tensor.data());
        }
        for moments in [&self.first_moment, &self.second_moment] {
            for i in 0..self.params.len() {
                match moments.get(i).and_then(Option::as_ref) {
                    Some(v) => {
                        out.push(1);
                        put_values(&mut out, v);
                    }
                    None => out.push(0),
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch (file is corrupt or truncated)".into()));
        }
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = r.len()?;
        let header: Header = serde_json::from_slice(r.take(hlen)?)?;
        let count = r.len()?;
        let mut params = ParamStore::new();
        let mut sizes = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_owned();
            let kind = match r.take(1)?[0] {
                0 => ParamKind::Trainable,
                1 => ParamKind::Buffer,
                k => return Err(Error::Checkpoint(format!("unknown tensor kind {k}"))),
            };
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).ok_or_else(|| Error::Checkpoint("shape overflow".into()))?;
            let data = r.values(n)?;
            let t = cospa_core::ctensor::CTensor::new(shape, data)?;
            params.insert(name, kind, t)?;
            sizes.push(n);
        }
        let mut moments = [Vec::with_capacity(count), Vec::with_capacity(count)];
        for m in &mut moments {
            for &n in &sizes {
                m.push(match r.take(1)?[0] {
                    0 => None,
                    1 => Some(r.values(n)?),
                    f => return Err(Error::Checkpoint(format!("bad moment flag {f}"))),
                });
            }
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        let [first_moment, second_moment] = moments;
        Ok(Self {
            header,
            params,
            first_moment,
            second_moment,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn put_values(out: &mut Vec<u8>, v: &[C64]) {
    for c in v {
        out.extend_from_slice(&c.re.to_le_bytes());
        out.extend_from_slice(&c.im.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Checkpoint("length overflow".into()))
    }

    fn values(&mut self, n: usize) -> Result<Vec<C64>> {
        let bytes = n.checked_mul(16).ok_or_else(|| Error::Checkpoint("length overflow".into()))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(16)
            .map(|c| {
                C64::new(
                    f64::from_le_bytes(c[..8].try_into().expect("8 bytes")),
                    f64::from_le_bytes(c[8..].try_into().expect("8 bytes")),
                )
            })
            .collect())
    }
}
