//! Little-endian binary checkpoints.
//!
//! Layout:
//!
//! ```text
//! magic      8 bytes   "DLPTCKPT"
//! version    u32
//! digest     u32 length + utf8 bytes
//! count      u32
//! record*    name (u32 length + utf8), dtype u8 (0 f64, 1 f32, 2 u64),
//!            ndim u32, dims u64 * ndim, raw little-endian data
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::config::{ModelConfig, Precision};
use super::optim::{AdamHyper, OptimizerState};
use super::params::DenoiserParams;

pub const MAGIC: &[u8; 8] = b"DLPTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum RecordData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    U64(Vec<u64>),
}

impl RecordData {
    fn len(&self) -> usize {
        match self {
            RecordData::F64(v) => v.len(),
            RecordData::F32(v) => v.len(),
            RecordData::U64(v) => v.len(),
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            RecordData::F64(_) => 0,
            RecordData::F32(_) => 1,
            RecordData::U64(_) => 2,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            RecordData::F64(v) => v.clone(),
            RecordData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            RecordData::U64(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: RecordData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub digest: String,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn new(digest: impl Into<String>) -> Self {
        Self {
            digest: digest.into(),
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: RecordData) {
        self.records.push(Record {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.digest);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            put_str(&mut out, &r.name);
            out.push(r.data.dtype());
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &r.data {
                RecordData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                RecordData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                RecordData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf: bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let digest = cur.string()?;
        let count = cur.u32()? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let name = cur.string()?;
            let dtype = cur.take(1)?[0];
            let ndim = cur.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| cur.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = match dtype {
                0 => RecordData::F64(
                    cur.take(8 * n)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => RecordData::F32(
                    cur.take(4 * n)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                2 => RecordData::U64(
                    cur.take(8 * n)?
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                other => return Err(Error::Format(format!("unknown dtype {other}"))),
            };
            records.push(Record { name, shape, data });
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last record".into()));
        }
        Ok(Self { digest, records })
    }

    /// Writes atomically: a temporary sibling file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// Stores every parameter tensor under its layout name. Single-precision
    /// models are written as f32.
    pub fn put_params(&mut self, params: &DenoiserParams) {
        self.put_params_prefixed("", params);
    }

    /// Like [`Self::put_params`] with every name prefixed, so several
    /// parameter sets can share one file.
    pub fn put_params_prefixed(&mut self, prefix: &str, params: &DenoiserParams) {
        for e in &params.layout.entries {
            let slice = &params.data[e.offset..e.offset + e.len];
            let data = match params.precision {
                Precision::Double => RecordData::F64(slice.to_vec()),
                Precision::Single => RecordData::F32(slice.iter().map(|&x| x as f32).collect()),
            };
            self.push(format!("{prefix}{}", e.name), e.shape.clone(), data);
        }
    }

    pub fn params(&self, cfg: &ModelConfig) -> Result<DenoiserParams> {
        self.params_prefixed("", cfg)
    }

    pub fn params_prefixed(&self, prefix: &str, cfg: &ModelConfig) -> Result<DenoiserParams> {
        let mut params = DenoiserParams::zeros_like(cfg);
        let layout = params.layout.clone();
        for e in &layout.entries {
            let name = format!("{prefix}{}", e.name);
            let r = self
                .get(&name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if r.shape != e.shape || r.data.len() != e.len {
                return Err(Error::Format(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    e.name, r.shape, e.shape
                )));
            }
            params.data[e.offset..e.offset + e.len].copy_from_slice(&r.data.to_f64());
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("checkpoint holds non-finite weights".into()));
        }
        Ok(params)
    }

    pub fn put_optimizer(&mut self, opt: &OptimizerState) {
        let h = opt.hyper;
        self.push("opt.hyper", vec![3], RecordData::F64(vec![h.beta1, h.beta2, h.eps]));
        self.push("opt.step", vec![1], RecordData::U64(vec![opt.step]));
        self.push("opt.m", vec![opt.m.len()], RecordData::F64(opt.m.clone()));
        self.push("opt.v", vec![opt.v.len()], RecordData::F64(opt.v.clone()));
    }

    pub fn optimizer(&self) -> Result<OptimizerState> {
        let f = |name: &str| -> Result<Vec<f64>> {
            match self.get(name).map(|r| &r.data) {
                Some(RecordData::F64(v)) => Ok(v.clone()),
                _ => Err(Error::Format(format!("missing f64 record {name}"))),
            }
        };
        let hyper = f("opt.hyper")?;
        let [beta1, beta2, eps] = hyper.as_slice() else {
            return Err(Error::Format("bad opt.hyper".into()));
        };
        let step = self.scalar_u64("opt.step")?;
        Ok(OptimizerState {
            hyper: AdamHyper {
                beta1: *beta1,
                beta2: *beta2,
                eps: *eps,
            },
            step,
            m: f("opt.m")?,
            v: f("opt.v")?,
        })
    }

    pub fn scalar_u64(&self, name: &str) -> Result<u64> {
        match self.get(name).map(|r| &r.data) {
            Some(RecordData::U64(v)) if v.len() == 1 => Ok(v[0]),
            _ => Err(Error::Format(format!("missing u64 record {name}"))),
        }
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("bad utf8".into()))
    }
}
