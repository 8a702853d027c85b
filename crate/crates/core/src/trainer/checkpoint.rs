//! Checkpoint container.
//!
//! Little-endian throughout. Strings are a u32 byte length followed by UTF-8.
//!
//! ```text
//! magic "ALMC" | version u32 = 1
//! config snapshot: string
//! update step u64 | data epoch u64 | data position u64
//! parameter count u32, then per parameter:
//!     name | dtype string ("f32"/"f64") | rank u32 | dims u64... | values
//! alias count u32, then per alias:
//!     alias name | target parameter name | transposed u8
//! optimizer flag u8; when 1: momentum f64 | optimizer step u64, then one
//!     velocity per parameter in parameter order, same dtype and length
//! ```
//!
//! Aliases are views onto stored parameters (tied weights): a tied output
//! weight is never stored twice, and `transposed` records the orientation in
//! which the output layer reads it.

use std::path::Path;

use alm_tensor::{ParamId, ParamStore, Real, Tensor};

use crate::error::{Error, Result};
use crate::layout::{Alias, Layout};
use crate::trainer::optim::OptimizerState;

pub const MAGIC: &[u8; 4] = b"ALMC";
pub const VERSION: u32 = 1;

/// Position of the training data iterator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DataState {
    pub epoch: u64,
    pub position: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: String,
    pub step: usize,
    pub data: DataState,
    pub params: ParamStore<T>,
    pub aliases: Vec<Alias>,
    pub optimizer: Option<OptimizerState<T>>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn values<T: Real>(&mut self, data: &[T]) {
        self.0.extend_from_slice(&T::to_le_bytes_vec(data));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Format(format!("checkpoint truncated at byte {}", self.at)));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
    fn values<T: Real>(&mut self, dtype: &str, n: usize) -> Result<Vec<T>> {
        let bad = || Error::Format(format!("cannot decode {n} {dtype} values"));
        match dtype {
            "f32" => Ok(f32::from_le_bytes_slice(self.take(4 * n)?)
                .ok_or_else(bad)?
                .into_iter()
                .map(|v| T::from_f64_lossy(v as f64))
                .collect()),
            "f64" => Ok(f64::from_le_bytes_slice(self.take(8 * n)?)
                .ok_or_else(bad)?
                .into_iter()
                .map(T::from_f64_lossy)
                .collect()),
            other => Err(Error::Format(format!("unknown dtype '{other}'"))),
        }
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.config);
        w.u64(self.step as u64);
        w.u64(self.data.epoch);
        w.u64(self.data.position);
        let ids: Vec<ParamId> = self.params.ids().collect();
        w.u32(ids.len() as u32);
        for &id in &ids {
            let t = self.params.get(id);
            w.str(self.params.name(id));
            w.str(T::DTYPE);
            w.u32(t.rank() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.values(t.data());
        }
        w.u32(self.aliases.len() as u32);
        for a in &self.aliases {
            w.str(&a.name);
            w.str(self.params.name(a.target));
            w.u8(a.transposed as u8);
        }
        match &self.optimizer {
            Some(opt) => {
                w.u8(1);
                w.0.extend_from_slice(&opt.momentum.to_le_bytes());
                w.u64(opt.step as u64);
                for v in &opt.velocity {
                    w.values(v);
                }
            }
            None => w.u8(0),
        }
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config = r.str()?;
        let step = r.u64()? as usize;
        let data = DataState {
            epoch: r.u64()?,
            position: r.u64()?,
        };
        let mut params = ParamStore::empty();
        let mut dtypes = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let dtype = r.str()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let values = r.values(&dtype, shape.iter().product())?;
            params.insert(&name, Tensor::new(shape, values)?)?;
            dtypes.push(dtype);
        }
        let mut aliases = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let target_name = r.str()?;
            let target = params
                .id(&target_name)
                .ok_or_else(|| Error::Format(format!("alias {name} targets unknown parameter {target_name}")))?;
            aliases.push(Alias {
                name,
                target,
                transposed: r.u8()? != 0,
            });
        }
        let optimizer = match r.u8()? {
            0 => None,
            _ => {
                let momentum = r.f64()?;
                let opt_step = r.u64()? as usize;
                let velocity = params
                    .ids()
                    .map(|id| r.values(&dtypes[id.0], params.get(id).numel()))
                    .collect::<Result<Vec<_>>>()?;
                Some(OptimizerState {
                    velocity,
                    momentum,
                    step: opt_step,
                })
            }
        };
        if r.at != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes in checkpoint",
                bytes.len() - r.at
            )));
        }
        Ok(Self {
            config,
            step,
            data,
            params,
            aliases,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write-then-rename keeps the previous checkpoint intact on failure
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Checks the stored parameters and sharing graph against a model
    /// layout, listing every difference.
    pub fn check_layout(&self, layout: &Layout) -> Result<()> {
        let mut diffs = Vec::new();
        if self.params.len() != layout.specs.len() {
            diffs.push(format!(
                "{} stored parameters, model has {}",
                self.params.len(),
                layout.specs.len()
            ));
        }
        for (id, spec) in self.params.ids().zip(&layout.specs) {
            let (name, shape) = (self.params.name(id), self.params.get(id).shape());
            if name != spec.name || shape != spec.shape.as_slice() {
                diffs.push(format!("{name} {shape:?} vs {} {:?}", spec.name, spec.shape));
            }
        }
        if self.aliases != layout.aliases {
            diffs.push("sharing graph differs".to_string());
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "checkpoint does not fit the model: {}",
                diffs.join("; ")
            )))
        }
    }
}
