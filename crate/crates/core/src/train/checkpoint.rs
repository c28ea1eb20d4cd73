//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! "SSFM" | version u32 | config digest [32] | config JSON length u32 | config JSON
//! | parameter count u32
//! | per parameter: name length u32 | name | rank u32 | dims u32 * rank | f32 * numel
//! | optimizer flag u8 | (if 1) step u64 | per parameter: m f32 * numel | v f32 * numel
//! ```

use std::fs;
use std::path::Path;

use super::adamw::AdamW;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SsFormer};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SSFM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn from_model(model: &SsFormer, optimizer: Option<&AdamW>) -> Self {
        Self {
            config: model.config.clone(),
            params: model
                .params()
                .iter()
                .map(|p| (p.name.clone(), Tensor::new(p.shape(), p.tensor.data().to_vec()).expect("valid shape")))
                .collect(),
            optimizer: optimizer.cloned(),
        }
    }

    /// Rebuilds the model. With `expected`, the stored configuration must
    /// have the same digest.
    pub fn to_model(&self, expected: Option<&ModelConfig>) -> Result<SsFormer> {
        if let Some(cfg) = expected {
            if cfg.digest() != self.config.digest() {
                return Err(Error::Config(
                    "checkpoint was written for a different model configuration".into(),
                ));
            }
        }
        let mut model = SsFormer::new(&self.config, 0)?;
        model.load_params(&self.params)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config.digest());
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        put_u32(&mut out, json.len());
        out.extend_from_slice(&json);
        put_u32(&mut out, self.params.len());
        for (name, t) in &self.params {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            put_f32s(&mut out, t.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.step.to_le_bytes());
                for (m, v) in opt.m.iter().zip(&opt.v) {
                    put_f32s(&mut out, m);
                    put_f32s(&mut out, v);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.err(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(4, format!("unsupported checkpoint version {version}")));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let len = r.u32()? as usize;
        let json_at = r.pos;
        let config: ModelConfig =
            serde_json::from_slice(r.take(len)?).map_err(|e| r.err(json_at, format!("bad config: {e}")))?;
        if config.digest() != digest {
            return Err(Error::Config(format!("{path}: config digest does not match the embedded config")));
        }
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name_at = r.pos;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.err(name_at, "parameter name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let dims_at = r.pos;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let data = r.f32s(numel)?;
            let t = Tensor::new(dims, data).map_err(|e| r.err(dims_at, format!("{name}: {e}")))?;
            params.push((name, t));
        }
        let flag_at = r.pos;
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
                for (_, t) in &params {
                    m.push(r.f32s(t.numel())?);
                    v.push(r.f32s(t.numel())?);
                }
                Some(AdamW { step, m, v })
            }
            f => return Err(r.err(flag_at, format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(r.err(r.pos, "trailing bytes after checkpoint"));
        }
        Ok(Self { config, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_string(),
            offset,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(self.pos, format!("truncated: wanted {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.err(self.pos, "size overflow"))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}
