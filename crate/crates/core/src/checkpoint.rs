//! Binary checkpoint format.
//!
//! ```text
//! "PRIX" | version u32 | count u32
//! count x ( name_len u16 | name | dtype u8 | rank u8 | dims u32.. | values LE )
//! json_len u32 | {"config": .., "step": ..}
//! ```
//! dtype 0 is f32, 1 is f64. Integers are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Prix;
use crate::planner::{Trajectory, TrajNorm};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PRIX";
pub const VERSION: u32 = 1;

const ANCHORS: &str = "planner.anchors";
const NORM: &str = "planner.norm";

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arrays: Vec<NamedArray>,
    pub config: RunConfig,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: RunConfig,
    step: u64,
}

impl Checkpoint {
    pub fn from_model(model: &Prix<f32>, config: &RunConfig, step: u64) -> Self {
        let mut arrays: Vec<NamedArray> = model
            .store
            .iter()
            .map(|(_, p)| NamedArray {
                name: p.name.clone(),
                dims: p.value.shape().to_vec(),
                data: ArrayData::F32(p.value.data().to_vec()),
            })
            .collect();
        let pl = &model.planner;
        if !pl.anchors.is_empty() {
            arrays.push(NamedArray {
                name: ANCHORS.into(),
                dims: vec![pl.anchors.len(), pl.config.horizon, 3],
                data: ArrayData::F64(pl.anchors.iter().flat_map(Trajectory::flat).collect()),
            });
        }
        if !pl.norm.mean.is_empty() {
            arrays.push(NamedArray {
                name: NORM.into(),
                dims: vec![2, pl.norm.mean.len()],
                data: ArrayData::F64(pl.norm.mean.iter().chain(&pl.norm.std).copied().collect()),
            });
        }
        Self {
            arrays,
            config: config.clone(),
            step,
        }
    }

    /// Rebuilds the model and installs every stored array.
    pub fn to_model(&self) -> Result<Prix<f32>> {
        let mut model = Prix::<f32>::new(&self.config.model, self.config.seed)?;
        let mut seen = 0;
        for a in &self.arrays {
            match (a.name.as_str(), &a.data) {
                (ANCHORS, ArrayData::F64(v)) => {
                    let td = 3 * model.planner.config.horizon;
                    if a.dims.iter().product::<usize>() != v.len() || v.len() % td != 0 {
                        return Err(Error::Format("anchor array has the wrong size".into()));
                    }
                    model.planner.anchors = v.chunks(td).map(Trajectory::from_flat).collect();
                }
                (NORM, ArrayData::F64(v)) if v.len() % 2 == 0 => {
                    let (mean, std) = v.split_at(v.len() / 2);
                    model.planner.norm = TrajNorm {
                        mean: mean.to_vec(),
                        std: std.to_vec(),
                    };
                }
                (name, ArrayData::F32(v)) => {
                    let id = model
                        .store
                        .id(name)
                        .ok_or_else(|| Error::Format(format!("unknown parameter `{name}`")))?;
                    model.store.set_value(id, Tensor::new(&a.dims, v.clone())?)?;
                    seen += 1;
                }
                (name, _) => return Err(Error::Format(format!("array `{name}` has an unexpected dtype"))),
            }
        }
        if seen != model.store.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {seen} of {} parameters",
                model.store.len()
            )));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            let name = a.name.as_bytes();
            let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name `{}` too long", a.name)))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(match a.data {
                ArrayData::F32(_) => 0,
                ArrayData::F64(_) => 1,
            });
            out.push(a.dims.len() as u8);
            for d in &a.dims {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            match &a.data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let meta = serde_json::to_vec(&Meta {
            config: self.config.clone(),
            step: self.step,
        })?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not a PRIX checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let data = match dtype {
                0 => ArrayData::F32(
                    r.take(n.checked_mul(4).ok_or_else(|| Error::Format("array too large".into()))?)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => ArrayData::F64(
                    r.take(n.checked_mul(8).ok_or_else(|| Error::Format("array too large".into()))?)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                t => return Err(Error::Format(format!("unknown dtype tag {t} for `{name}`"))),
            };
            arrays.push(NamedArray { name, dims, data });
        }
        let len = r.u32()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format(format!("config snapshot: {e}")))?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            arrays,
            config: meta.config,
            step: meta.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("truncated checkpoint at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
