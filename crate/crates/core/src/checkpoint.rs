//! Binary checkpoint format.
//!
//! All integers are little-endian `u32` unless noted.
//!
//! ```text
//! magic "SSMI" | version
//! arch text length | arch text (UTF-8, `ArchSpec::to_text`)
//! gcn flag (u8) | zca flag (u8)
//!   [zca] dim | epsilon f64 | mean f64×dim | whitening f64×dim²
//! param count
//!   name length | name | rank | extents×rank | f32 payload
//! batch-norm count
//!   name length | name | updates u64 | channels | mean f32×C | var f32×C
//! ```
//!
//! Parameters and running statistics are stored as `f32`; the ZCA map keeps
//! full `f64` precision.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{ArchSpec, DualHeadModel, Param};
use crate::tensor::{BatchNormState, Tensor};
use crate::transforms::{Preprocessing, ZcaState};

pub const MAGIC: &[u8; 4] = b"SSMI";
pub const VERSION: u32 = 1;

/// A trained model together with the input pipeline it expects.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: DualHeadModel,
    pub preprocessing: Preprocessing,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.model.spec().to_text());
        w.0.push(self.preprocessing.gcn as u8);
        match &self.preprocessing.zca {
            Some(z) => {
                w.0.push(1);
                w.len(z.dim());
                w.f64(z.epsilon);
                z.mean.iter().for_each(|&v| w.f64(v));
                z.whitening.iter().for_each(|&v| w.f64(v));
            }
            None => w.0.push(0),
        }
        w.len(self.model.params().len());
        for p in self.model.params() {
            w.str(&p.name);
            w.len(p.value.rank());
            p.value.shape().iter().for_each(|&e| w.len(e));
            p.value.data().iter().for_each(|&v| w.f32(v));
        }
        let bns: Vec<_> = self.model.batch_norms().collect();
        w.len(bns.len());
        for (name, s) in bns {
            w.str(name);
            w.0.extend_from_slice(&s.updates.to_le_bytes());
            w.len(s.channels());
            s.running_mean.iter().for_each(|&v| w.f32(v));
            s.running_var.iter().for_each(|&v| w.f32(v));
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic, not a checkpoint".into(),
            });
        }
        let at = r.pos;
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err_at(at, format!("unsupported version {version}")));
        }
        let at = r.pos;
        let spec = ArchSpec::from_text(&r.str()?).map_err(|e| r.err_at(at, e.to_string()))?;
        let gcn = r.flag()?;
        let zca = if r.flag()? {
            let d = r.len()?;
            let epsilon = r.f64()?;
            let mean = (0..d).map(|_| r.f64()).collect::<Result<_>>()?;
            let n = d.checked_mul(d).ok_or_else(|| r.err("ZCA dimension overflows"))?;
            let whitening = (0..n).map(|_| r.f64()).collect::<Result<_>>()?;
            Some(ZcaState {
                mean,
                whitening,
                epsilon,
            })
        } else {
            None
        };
        let n_params = r.len()?;
        let mut params = Vec::new();
        for _ in 0..n_params {
            let name = r.str()?;
            let at = r.pos;
            let rank = r.len()?;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .filter(|&c| c <= r.remaining() / 4)
                .ok_or_else(|| r.err_at(at, format!("implausible shape {shape:?} for `{name}`")))?;
            let data = (0..count).map(|_| r.f32()).collect::<Result<_>>()?;
            let value = Tensor::new(shape, data).map_err(|e| r.err_at(at, e.to_string()))?;
            params.push(Param {
                name,
                value,
                decay: false,
            });
        }
        let n_bn = r.len()?;
        let mut bn = Vec::new();
        for _ in 0..n_bn {
            let name = r.str()?;
            let updates = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
            let c = r.len()?;
            let running_mean = (0..c).map(|_| r.f32()).collect::<Result<_>>()?;
            let running_var = (0..c).map(|_| r.f32()).collect::<Result<_>>()?;
            bn.push((
                name,
                BatchNormState {
                    running_mean,
                    running_var,
                    updates,
                },
            ));
        }
        if r.remaining() != 0 {
            return Err(r.err(format!("{} trailing bytes", r.remaining())));
        }
        let end = r.pos;
        let model = DualHeadModel::from_parts(spec, params, bn).map_err(|e| match e {
            Error::Dimension(m) => Error::Format {
                offset: end as u64,
                message: m,
            },
            other => other,
        })?;
        Ok(Self {
            model,
            preprocessing: Preprocessing { gcn, zca },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn len(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("length exceeds u32"));
    }

    fn str(&mut self, s: &str) {
        self.len(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }

    fn f32(&mut self, v: f64) {
        self.0.extend_from_slice(&(v as f32).to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn err(&self, message: impl Into<String>) -> Error {
        self.err_at(self.pos, message)
    }

    fn err_at(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.remaining() < n {
            return Err(self.err(format!(
                "truncated: need {n} bytes, {} left",
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn flag(&mut self) -> Result<bool> {
        match self.take(1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(self.err_at(self.pos - 1, format!("invalid flag byte {b}"))),
        }
    }

    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        let at = self.pos;
        let raw = self.take(n)?.to_vec();
        String::from_utf8(raw).map_err(|_| self.err_at(at, "invalid UTF-8"))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
